"""Paired-sample management: synthetic data, directory loading, frequency
targets, and subject-level k-fold assignment.

The synthetic generator is the default test substrate. Each subject gets a
procedural "MR" image (smoothed random ellipses plus fine texture) and a
paired "PET" produced by one fixed deterministic transform of the MR, so the
mapping the network has to learn is realizable and a perfect model scores an
MAE of zero.
"""

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image_ops import ImageFile, freq_split, gaussian_kernel, normalize, read_image, _blur2d
from .tensor_core import Tensor

SYNTH_Q = 255.0
_ORACLE_GAMMA = 0.7
_ORACLE_BLUR_SIGMA = 1.5
_ORACLE_BLUR_SIZE = 7
_ORACLE_BIAS_AMPLITUDE = 0.2


@dataclass
class SamplePair:
    """One coregistered (mr, pet) pair with precomputed frequency targets.

    ``mr`` and ``pet`` are normalized to [-1, 1]; ``pet_low``/``pet_high``
    are the bands of the normalized pet, each divided by its recorded scale
    so they also fit [-1, 1]. scale_low*pet_low + scale_high*pet_high
    reconstructs pet.
    """

    subject_id: str
    mr: Tensor
    pet: Tensor
    pet_low: Tensor
    pet_high: Tensor
    scale_low: float
    scale_high: float
    Q: float


class Dataset:
    """Immutable collection of SamplePairs, sorted by subject id."""

    def __init__(self, samples, size, sigma, kernel_size):
        self.samples = sorted(samples, key=lambda s: s.subject_id)
        self.size = size
        self.sigma = sigma
        self.kernel_size = kernel_size
        self._by_id = {s.subject_id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise ValueError("duplicate subject ids")

    def __len__(self):
        return len(self.samples)

    def subjects(self):
        return [s.subject_id for s in self.samples]

    def get(self, subject_id):
        return self._by_id[subject_id]


def prepare_sample(subject_id, mr_img, pet_img, sigma=3.0, kernel_size=13):
    """Normalize a pair and attach rescaled frequency targets."""
    if (mr_img.height, mr_img.width) != (pet_img.height, pet_img.width):
        raise ValueError(
            f"subject {subject_id!r}: mr is {mr_img.height}x{mr_img.width} but "
            f"pet is {pet_img.height}x{pet_img.width}")
    mr = normalize(mr_img)
    pet = normalize(pet_img)
    pair = freq_split(pet, sigma, kernel_size)
    scale_low = max(1.0, float(np.abs(pair.low.data).max()))
    scale_high = max(1.0, float(np.abs(pair.high.data).max()))
    return SamplePair(
        subject_id=subject_id, mr=mr, pet=pet,
        pet_low=Tensor(pair.low.data / scale_low),
        pet_high=Tensor(pair.high.data / scale_high),
        scale_low=scale_low, scale_high=scale_high, Q=pet_img.Q)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _synth_mr(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(5, 9))):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
        ay, ax = rng.uniform(0.06 * size, 0.30 * size, 2)
        theta = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.3, 1.0)
        ry = (yy - cy) * math.cos(theta) - (xx - cx) * math.sin(theta)
        rx = (yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta)
        img += amp * ((ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0)
    img = _blur2d(img, gaussian_kernel(2.0, 9).weights)
    img += _blur2d(rng.normal(0.0, 0.08, (size, size)),
                   gaussian_kernel(0.6, 3).weights)
    lo, hi = img.min(), img.max()
    return SYNTH_Q * (img - lo) / (hi - lo + 1e-12)


def oracle_transform(mr_raw, Q=SYNTH_Q):
    """The fixed MR -> PET mapping used by the synthetic generator.

    Monotone intensity remap, Gaussian blur, then a smooth multiplicative
    bias field; output stays in [0, Q] without clipping.
    """
    mr_raw = np.asarray(mr_raw, dtype=np.float64)
    size_y, size_x = mr_raw.shape
    remapped = (mr_raw / Q) ** _ORACLE_GAMMA
    blurred = _blur2d(remapped, gaussian_kernel(_ORACLE_BLUR_SIGMA,
                                                _ORACLE_BLUR_SIZE).weights)
    yy, xx = np.mgrid[0:size_y, 0:size_x].astype(np.float64)
    bias = 1.0 + _ORACLE_BIAS_AMPLITUDE * np.sin(2 * np.pi * xx / size_x) \
        * np.cos(2 * np.pi * yy / size_y)
    return Q * (bias * blurred) / (1.0 + _ORACLE_BIAS_AMPLITUDE)


class OraclePredictor:
    """Drop-in 'model' that applies the generating transform; the ceiling
    any trained network is compared against on synthetic data."""

    def __init__(self, Q=SYNTH_Q):
        self.Q = Q
        self.mode = "eval"

    def eval(self):
        return self

    def predict(self, mr):
        raw = (mr.data[0, 0] + 1.0) * (self.Q / 2.0)
        pet = oracle_transform(raw, self.Q)
        return (pet * (2.0 / self.Q) - 1.0)[None, None]


def synth_generate(n_subjects, size, seed, sigma=3.0, kernel_size=13):
    """Build a fully seed-deterministic synthetic paired dataset."""
    if n_subjects < 3:
        raise ValueError(f"need at least 3 subjects, got {n_subjects}")
    if size < 64 or size % 64:
        raise ValueError(f"size must be a multiple of 64, got {size}")
    samples = []
    for idx in range(n_subjects):
        rng = np.random.default_rng([int(seed), idx])
        mr_raw = _synth_mr(rng, size)
        pet_raw = oracle_transform(mr_raw)
        samples.append(prepare_sample(
            f"s{idx:03d}", ImageFile.from_gray(mr_raw, SYNTH_Q),
            ImageFile.from_gray(pet_raw, SYNTH_Q), sigma, kernel_size))
    return Dataset(samples, size, sigma, kernel_size)


def save_dataset(dataset, dir_path):
    """Write every pair as raw images (<subject>_mr.frea / <subject>_pet.frea)."""
    from .image_ops import denormalize, write_image

    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_image(out / f"{s.subject_id}_mr.frea", denormalize(s.mr, s.Q))
        write_image(out / f"{s.subject_id}_pet.frea", denormalize(s.pet, s.Q))


# ---------------------------------------------------------------------------
# directory loading
# ---------------------------------------------------------------------------

_PAIR_RE = re.compile(r"^(?P<stem>.+)_(?P<kind>mr|pet)\.(frea|pgm)$")


def _center_crop(img, size):
    if img.height < size or img.width < size:
        raise ValueError(f"image {img.height}x{img.width} smaller than crop {size}")
    oy = (img.height - size) // 2
    ox = (img.width - size) // 2
    return ImageFile(size, size, img.channels,
                     img.pixels[oy:oy + size, ox:ox + size].copy(), img.Q)


def load_dataset(dir_path, size, sigma=3.0, kernel_size=13):
    """Load `<subject>_mr.*` / `<subject>_pet.*` pairs, center-cropped."""
    root = Path(dir_path)
    if not root.is_dir():
        raise ValueError(f"not a directory: {root}")
    found = {}
    for p in sorted(root.iterdir()):
        m = _PAIR_RE.match(p.name)
        if m:
            found.setdefault(m.group("stem"), {})[m.group("kind")] = p
    if not found:
        raise ValueError(f"no image pairs found in {root}")
    samples = []
    for stem in sorted(found):
        pair = found[stem]
        if "mr" not in pair or "pet" not in pair:
            missing = "pet" if "pet" not in pair else "mr"
            raise ValueError(f"subject {stem!r}: missing {missing} file")
        mr = _center_crop(read_image(pair["mr"]), size)
        pet = _center_crop(read_image(pair["pet"]), size)
        samples.append(prepare_sample(stem, mr, pet, sigma, kernel_size))
    return Dataset(samples, size, sigma, kernel_size)


# ---------------------------------------------------------------------------
# folds and iteration
# ---------------------------------------------------------------------------

@dataclass
class FoldAssignment:
    """Subject-level fold indices; a pure function of (subjects, k, seed)."""

    k: int
    assignment: dict

    def fold_subjects(self, fold):
        return sorted(s for s, f in self.assignment.items() if f == fold)


def kfold_split(dataset, k, seed):
    """Shuffle subjects deterministically and deal them round-robin."""
    subjects = dataset.subjects()
    if k < 2 or k > len(subjects):
        raise ValueError(f"k={k} invalid for {len(subjects)} subjects")
    order = list(np.random.default_rng([int(seed)]).permutation(len(subjects)))
    return FoldAssignment(k, {subjects[j]: i % k for i, j in enumerate(order)})


def iterate(dataset, folds, round_idx, split, seed, epoch=0):
    """Ordered sample stream for one cross-validation round.

    Test streams are in sorted subject order; train streams are reshuffled
    each epoch with a seed derived from (seed, round, epoch). Batch size is
    fixed at 1: the stream yields individual SamplePairs.
    """
    if not 0 <= round_idx < folds.k:
        raise ValueError(f"round {round_idx} outside 0..{folds.k - 1}")
    if split == "test":
        ids = folds.fold_subjects(round_idx)
    elif split == "train":
        ids = sorted(s for s, f in folds.assignment.items() if f != round_idx)
        rng = np.random.default_rng([int(seed), int(round_idx), int(epoch)])
        ids = [ids[i] for i in rng.permutation(len(ids))]
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not ids:
        raise ValueError(f"empty {split} split for round {round_idx}")
    return [dataset.get(s) for s in ids]
