"""Training losses and evaluation metrics.

Losses are mean-reduced (MSE for the low band, MAE for the high band and the
reconstruction term) so the weights stay resolution-independent. Metrics run
in original intensity units: MAE over a body mask derived from the real
image, global-statistics SSIM, and PSNR with Q taken as the maximum intensity
of the two images being compared.
"""

from dataclasses import dataclass

import numpy as np

from .image_ops import ImageFile, gaussian_kernel, _blur2d
from .tensor_core import Tensor, abs_, add, mean_all, mul, scale, sub

SSIM_K1 = 0.01
SSIM_K2 = 0.02


@dataclass
class LossBreakdown:
    """Scalar loss components and the weighted total."""

    l_low: float
    l_high: float
    l_rec: float
    total: float
    weights: tuple

    def to_dict(self):
        return {"l_low": self.l_low, "l_high": self.l_high, "l_rec": self.l_rec,
                "total": self.total, "weights": list(self.weights)}


def loss_low(pred_low, pet_low):
    """Mean squared error between predicted and target low bands."""
    if pred_low.data.shape != pet_low.data.shape:
        raise ValueError(
            f"shape mismatch: {pred_low.data.shape} vs {pet_low.data.shape}")
    d = sub(pred_low, pet_low)
    return mean_all(mul(d, d))


def loss_high(pred_high, pet_high):
    """Mean absolute error between predicted and target high bands."""
    if pred_high.data.shape != pet_high.data.shape:
        raise ValueError(
            f"shape mismatch: {pred_high.data.shape} vs {pet_high.data.shape}")
    return mean_all(abs_(sub(pred_high, pet_high)))


def loss_total(low_pred, high_pred, final, pet_low, pet_high, pet,
               weights=(1.0, 1.0, 1.0), use_freq_branches=True):
    """Weighted objective: w_low*MSE(low) + w_high*MAE(high) + w_rec*MAE(final).

    With ``use_freq_branches`` off only the reconstruction term remains.
    Returns the differentiable total and a float breakdown.
    """
    w_low, w_high, w_rec = (float(w) for w in weights)
    if w_low < 0 or w_high < 0 or w_rec < 0:
        raise ValueError(f"loss weights must be nonnegative, got {weights}")
    l_rec = loss_high(final, pet)
    if use_freq_branches:
        l_low = loss_low(low_pred, pet_low)
        l_high = loss_high(high_pred, pet_high)
        total = add(add(scale(l_low, w_low), scale(l_high, w_high)),
                    scale(l_rec, w_rec))
        bd = LossBreakdown(l_low.item(), l_high.item(), l_rec.item(),
                           total.item(), (w_low, w_high, w_rec))
    else:
        total = scale(l_rec, w_rec)
        bd = LossBreakdown(0.0, 0.0, l_rec.item(), total.item(),
                           (w_low, w_high, w_rec))
    return total, bd


# ---------------------------------------------------------------------------
# metrics (original intensity units)
# ---------------------------------------------------------------------------

def _pixels(img):
    if isinstance(img, ImageFile):
        return img.gray()
    if isinstance(img, Tensor):
        arr = img.data
    else:
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    return arr


def body_mask(real, threshold_frac=0.01):
    """Pixels of the real image above threshold_frac of its maximum."""
    if not 0.0 <= threshold_frac < 1.0:
        raise ValueError(f"threshold_frac must be in [0, 1), got {threshold_frac}")
    arr = _pixels(real)
    mask = arr > threshold_frac * arr.max()
    if not mask.any():
        raise ValueError("body mask is empty (all-zero image?)")
    return mask


def metric_mae(real, syn, mask):
    """Mean absolute error over the masked pixels."""
    a, b = _pixels(real), _pixels(syn)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if mask.shape != a.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape}")
    h = int(mask.sum())
    if h == 0:
        raise ValueError("empty mask")
    return float(np.abs(a - b)[mask].sum() / h)


def metric_ssim(real, syn, windowed=False, window_size=11, window_sigma=1.5):
    """Structural similarity with global image statistics.

    C1 = (k1*Q)² and C2 = (k2*Q)² with k1 = 0.01, k2 = 0.02 and Q the maximum
    intensity over both images. ``windowed`` switches to an 11x11
    Gaussian-weighted local version (mean of the local SSIM map), kept as a
    cross-check; the global form is the default.
    """
    a, b = _pixels(real), _pixels(syn)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("zero-size image")
    q = max(a.max(), b.max())
    if q <= 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    c1 = (SSIM_K1 * q) ** 2
    c2 = (SSIM_K2 * q) ** 2
    if not windowed:
        mu_a, mu_b = a.mean(), b.mean()
        var_a, var_b = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        return float(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                     / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    w = gaussian_kernel(window_sigma, window_size).weights
    mu_a = _blur2d(a, w)
    mu_b = _blur2d(b, w)
    var_a = _blur2d(a * a, w) - mu_a ** 2
    var_b = _blur2d(b * b, w) - mu_b ** 2
    cov = _blur2d(a * b, w) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) \
        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def metric_psnr(real, syn):
    """Peak signal-to-noise ratio, 10*log10(Q²/MSE), in dB.

    Q is the maximum intensity over both images; identical images give +inf.
    """
    a, b = _pixels(real), _pixels(syn)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    q = max(a.max(), b.max())
    return float(10.0 * np.log10(q * q / mse))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

CSV_HEADER = "sample_id,fold,mae,psnr,ssim"


def _fmt(v):
    return f"{float(v):.6g}"


@dataclass
class MetricsReport:
    """Per-sample metric rows plus population mean/std aggregates."""

    rows: list  # (sample_id, fold, mae, psnr, ssim)
    mask_policy: str

    def _column(self, idx):
        return np.array([r[idx] for r in self.rows], dtype=np.float64)

    def mean(self, name):
        return float(self._column({"mae": 2, "psnr": 3, "ssim": 4}[name]).mean())

    def std(self, name):
        return float(self._column({"mae": 2, "psnr": 3, "ssim": 4}[name]).std())

    def summary(self):
        return {name: (self.mean(name), self.std(name))
                for name in ("mae", "psnr", "ssim")}

    def csv_text(self):
        lines = [CSV_HEADER]
        for sid, fold, mae, psnr, ssim in self.rows:
            lines.append(f"{sid},{fold},{_fmt(mae)},{_fmt(psnr)},{_fmt(ssim)}")
        lines.append(f"mean,,{_fmt(self.mean('mae'))},{_fmt(self.mean('psnr'))},"
                     f"{_fmt(self.mean('ssim'))}")
        lines.append(f"std,,{_fmt(self.std('mae'))},{_fmt(self.std('psnr'))},"
                     f"{_fmt(self.std('ssim'))}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.csv_text())
