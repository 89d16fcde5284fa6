"""Gaussian frequency decomposition, intensity scaling, and image file I/O.

The low band of an image is a normalized Gaussian blur with mirrored borders;
the high band is defined as the exact residual, so merging the two always
reconstructs the source. File I/O covers a raw little-endian float format
(magic ``FREA1``) and binary PGM (``P5``) with 8- or 16-bit samples.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .tensor_core import Tensor

RAW_MAGIC = b"FREA1"


@dataclass
class GaussianKernel:
    """Normalized isotropic Gaussian filter weights on an odd square grid."""

    sigma: float
    size: int
    weights: np.ndarray


@dataclass
class FrequencyPair:
    """(low, high) split of a single-channel image; low + high == source."""

    low: Tensor
    high: Tensor
    sigma: float


@dataclass
class ImageFile:
    """Single image with its maximal representable intensity Q."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray  # (H, W, C) float64
    Q: float

    @classmethod
    def from_gray(cls, arr, Q):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2D gray image, got shape {arr.shape}")
        return cls(arr.shape[0], arr.shape[1], 1, arr[:, :, None].copy(), float(Q))

    def gray(self):
        if self.channels != 1:
            raise ValueError(f"image has {self.channels} channels, expected 1")
        return self.pixels[:, :, 0]


def gaussian_kernel(sigma, size):
    """Build a normalized Gaussian kernel; w(dx,dy) ~ exp(-(dx²+dy²)/(2σ²))."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return GaussianKernel(float(sigma), size, w / w.sum())


def _as_gray_array(img):
    """Accept a Tensor or ndarray shaped (H, W) or (1, 1, H, W); return 2D."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if data.ndim == 4:
        if data.shape[0] != 1 or data.shape[1] != 1:
            raise ValueError(f"expected a single-channel image, got shape {data.shape}")
        return data[0, 0], True
    if data.ndim == 2:
        return data, False
    raise ValueError(f"expected (H, W) or (1, 1, H, W), got shape {data.shape}")


def _pack(arr2d, nchw):
    return Tensor(arr2d[None, None]) if nchw else Tensor(arr2d)


def _blur2d(arr, weights):
    k = weights.shape[0]
    pad = k // 2
    h, w = arr.shape
    if pad > h - 1 or pad > w - 1:
        raise ValueError(f"kernel size {k} too large for image {h}x{w}")
    xp = np.pad(arr, pad, mode="reflect") if pad else arr
    sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (h, w, k, k), (sh, sw, sh, sw), writeable=False)
    return np.tensordot(win, weights, axes=([2, 3], [0, 1]))


def gaussian_blur(img, kernel):
    """Correlate a single-channel image with a kernel, mirroring at borders.

    Borders reflect about the edge pixel without repeating it, so a constant
    image blurs to the same constant (the kernel is normalized).
    """
    arr, nchw = _as_gray_array(img)
    return _pack(_blur2d(arr, kernel.weights), nchw)


def freq_split(img, sigma=3.0, size=13):
    """Split an image into a Gaussian low band and the exact residual."""
    arr, _ = _as_gray_array(img)
    low = _blur2d(arr, gaussian_kernel(sigma, size).weights)
    return FrequencyPair(Tensor(low[None, None]), Tensor((arr - low)[None, None]),
                         float(sigma))


def freq_merge(pair):
    """Reconstruct the source image as low + high."""
    if pair.low.data.shape != pair.high.data.shape:
        raise ValueError(
            f"band shape mismatch: {pair.low.data.shape} vs {pair.high.data.shape}")
    return Tensor(pair.low.data + pair.high.data)


def normalize(img):
    """Map an ImageFile's [0, Q] intensities linearly onto [-1, 1]."""
    if img.Q <= 0:
        raise ValueError(f"Q must be positive, got {img.Q}")
    return Tensor((img.gray() * (2.0 / img.Q) - 1.0)[None, None])


def denormalize(t, Q):
    """Invert normalize(), clamping out-of-range predictions to [0, Q]."""
    Q = float(Q)
    if Q <= 0:
        raise ValueError(f"Q must be positive, got {Q}")
    arr, _ = _as_gray_array(t)
    return ImageFile.from_gray(np.clip((arr + 1.0) * (Q / 2.0), 0.0, Q), Q)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_image(path, img):
    """Write an ImageFile; `.pgm` paths get binary PGM, anything else raw."""
    if str(path).lower().endswith(".pgm"):
        _write_pgm(path, img)
    else:
        _write_raw(path, img)


def read_image(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"P5":
        return _read_pgm(path)
    return _read_raw(path)


def _write_raw(path, img):
    px = np.ascontiguousarray(img.pixels, dtype="<f4")
    if px.size != img.height * img.width * img.channels:
        raise ValueError("pixel count does not match header dims")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<IIIf", img.height, img.width, img.channels, img.Q))
        f.write(px.tobytes())


def _read_raw(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != RAW_MAGIC:
        raise ValueError(f"{path}: unsupported magic {blob[:5]!r}")
    if len(blob) < 5 + 16:
        raise ValueError(f"{path}: truncated header")
    h, w, c, q = struct.unpack_from("<IIIf", blob, 5)
    n = h * w * c
    payload = blob[21:]
    if len(payload) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} pixel bytes, got {len(payload)}")
    px = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)
    return ImageFile(h, w, c, px, float(q))


def _write_pgm(path, img):
    if img.channels != 1:
        raise ValueError("PGM supports single-channel images only")
    maxval = int(round(img.Q))
    if not 0 < maxval < 65536:
        raise ValueError(f"PGM maxval out of range: {maxval}")
    data = np.clip(np.rint(img.gray()), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii"))
        f.write(data.astype(dtype).tobytes())


def _pgm_tokens(blob, count):
    """Yield header tokens, skipping whitespace and # comments."""
    tokens, i = [], 0
    while len(tokens) < count:
        if i >= len(blob):
            raise ValueError("truncated PGM header")
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace() and blob[j:j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # header ends after exactly one whitespace byte


def _read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    tokens, offset = _pgm_tokens(blob, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: unsupported magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = h * w
    payload = blob[offset:]
    need = n * (2 if maxval > 255 else 1)
    if len(payload) < need:
        raise ValueError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    px = np.frombuffer(payload[:need], dtype=dtype).astype(np.float64).reshape(h, w)
    return ImageFile(h, w, 1, px[:, :, None].copy(), float(maxval))
