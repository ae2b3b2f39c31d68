"""Optimization tasks: rewards measured on the instrument, quality metrics
evaluated out of band, and the target images and digit data they use.

A task object is what the trainer sees besides the instrument handle. It
knows how many frames one policy sample costs (minibatch_size), how to turn a
batch of sampled phase patterns into rewards, and how to score a candidate
pattern on a noise-free copy of the bench. The trainer itself never looks at
images or regions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

from . import fileio, optics
from .errors import ConfigError
from .optics import BenchConfig, DetectorLayout, default_detector_layout

# ---------------------------------------------------------------------------
# scores

def energy_share(energies, index: int):
    """Fraction of the summed region energies that lands in one region.

    Batched over leading axes. A frame where every region reads zero scores
    0 (with a warning, since it usually means the beam missed the sensor).
    """
    e = np.asarray(energies, dtype=np.float64)
    tot = e.sum(axis=-1)
    share = np.zeros_like(tot)
    np.divide(e[..., index], tot, out=share, where=tot > 0)
    if np.any(tot <= 0):
        warnings.warn("detector regions read zero total energy; scoring 0",
                      RuntimeWarning, stacklevel=2)
    return share if share.ndim else float(share)


def fit_gain(measured, target):
    """Least-squares scale g minimising mean((g*measured - target)^2).

    Batched over leading axes of measured; zero-energy frames get g = 0.
    """
    m = np.asarray(measured, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    mm = (m * m).sum(axis=(-2, -1))
    mt = (m * t).sum(axis=(-2, -1))
    g = np.zeros_like(mm)
    np.divide(mt, mm, out=g, where=mm > 0)
    return g if g.ndim else float(g)


def gain_fitted_mse(measured, target):
    """MSE against target after the optimal scalar gain fit (batched)."""
    m = np.asarray(measured, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    g = np.asarray(fit_gain(m, t))
    resid = g[..., None, None] * m - t
    mse = (resid ** 2).mean(axis=(-2, -1))
    return mse if mse.ndim else float(mse)


PSNR_CAP_DB = 100.0


def psnr_from_mse(mse: float) -> float:
    """10*log10(1/MSE) for unit-range targets, capped at 100 dB."""
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def psnr(measured, target) -> float:
    """Gain-fitted PSNR of a single image against a [0, 1] target."""
    return psnr_from_mse(gain_fitted_mse(measured, target))


def michelson_contrast(profile) -> float:
    """(max - min) / (max + min); 0 when the profile is all zero."""
    p = np.asarray(profile, dtype=np.float64)
    hi, lo = float(p.max()), float(p.min())
    denom = hi + lo
    return (hi - lo) / denom if denom > 0 else 0.0


def grating_contrast(image, rows: int = 8) -> float:
    """Michelson contrast of the column profile averaged over the central
    rows, where a vertical grating shows its bars."""
    img = np.asarray(image, dtype=np.float64)
    h = img.shape[-2]
    profile = img[..., h // 2 - rows // 2: h // 2 + rows // 2, :].mean(axis=-2)
    return michelson_contrast(profile)


def class_scores(energies):
    """Softmax over region energies scaled to a fixed temperature.

    Energies are normalised to fractions first so the score is exposure
    independent; an all-zero frame scores uniform. Batched.
    """
    e = np.asarray(energies, dtype=np.float64)
    tot = e.sum(axis=-1, keepdims=True)
    frac = np.divide(e, tot, out=np.full_like(e, 1.0 / e.shape[-1]),
                     where=tot > 0)
    z = 10.0 * frac
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# digit data

@dataclass(frozen=True)
class DigitSet:
    """Grayscale digit images in [0, 1] with integer labels."""

    images: np.ndarray   # (N, h, w) float64
    labels: np.ndarray   # (N,) int64

    def __post_init__(self):
        if self.images.ndim != 3 or self.labels.ndim != 1:
            raise ValueError("images must be (N, h, w) and labels (N,)")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but "
                             f"{self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.images.shape[0]


def load_digit_set(images_path, labels_path) -> DigitSet:
    images = fileio.read_idx_images(images_path).astype(np.float64) / 255.0
    labels = fileio.read_idx_labels(labels_path).astype(np.int64)
    return DigitSet(images, labels)


def asset_path(name: str):
    """Path to a data file bundled with the package."""
    return resources.files("insitu") / "assets" / name


def load_bundled_digits(split: str) -> DigitSet:
    """The small bundled digit set; split is "train" or "test"."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    return load_digit_set(asset_path(f"digits-{split}-images.idx"),
                          asset_path(f"digits-{split}-labels.idx"))


def encode_digit(image, shape=(64, 64)) -> np.ndarray:
    """Turn a digit image into an input phase pattern.

    The image is bilinearly resized to half the grid, centred, and mapped to
    phase on [0, pi] (ink advances the wavefront, background leaves it flat).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"digit image must be 2-D, got shape {img.shape}")
    H, W = shape
    side = min(H, W) // 2
    zoomed = ndimage.zoom(img, (side / img.shape[0], side / img.shape[1]),
                          order=1, mode="grid-constant", grid_mode=True)
    zoomed = np.clip(zoomed, 0.0, 1.0)
    canvas = np.zeros(shape)
    r0, c0 = (H - side) // 2, (W - side) // 2
    canvas[r0:r0 + side, c0:c0 + side] = zoomed
    return np.pi * canvas


# ---------------------------------------------------------------------------
# target images

_LETTER_ROWS = (
    "01110",
    "10001",
    "10001",
    "11111",
    "10001",
    "10001",
    "10001",
)


def make_grating(shape=(64, 64), period: int = 8) -> np.ndarray:
    """Binary vertical grating: bright bars of width period/2."""
    if period < 2 or period % 2:
        raise ConfigError(f"grating period must be a positive even int, got {period}")
    cols = np.arange(shape[1])
    bars = ((cols // (period // 2)) % 2 == 0).astype(np.float64)
    return np.broadcast_to(bars, shape).copy()


def _make_letter(shape=(64, 64)) -> np.ndarray:
    bitmap = np.array([[int(c) for c in row] for row in _LETTER_ROWS],
                      dtype=np.float64)
    cell = min(shape[0] // (bitmap.shape[0] + 1), shape[1] // (bitmap.shape[1] + 1))
    block = np.kron(bitmap, np.ones((cell, cell)))
    canvas = np.zeros(shape)
    r0 = (shape[0] - block.shape[0]) // 2
    c0 = (shape[1] - block.shape[1]) // 2
    canvas[r0:r0 + block.shape[0], c0:c0 + block.shape[1]] = block
    return canvas


def _load_image_asset(name: str, shape) -> np.ndarray:
    values, lo, hi = fileio.read_pgm(asset_path(f"{name}.pgm"))
    if values.shape != tuple(shape):
        raise ConfigError(f"bundled target {name!r} is {values.shape}, "
                          f"bench grid is {tuple(shape)}")
    span = hi - lo
    return (values - lo) / span if span > 0 else np.zeros_like(values)


TARGET_NAMES = ("grating", "letter", "boat", "novel0", "novel1", "novel2", "novel3")


def make_target(name: str, shape=(64, 64)) -> np.ndarray:
    """Named [0, 1] target image on the bench grid."""
    if name == "grating":
        return make_grating(shape)
    if name == "letter":
        return _make_letter(shape)
    if name in TARGET_NAMES:
        return _load_image_asset(name, shape)
    raise ConfigError(f"unknown target {name!r}; choose from {', '.join(TARGET_NAMES)}")


def region_mask(shape, layout: DetectorLayout, index: int) -> np.ndarray:
    """Binary image marking one detector region."""
    mask = np.zeros(shape)
    r, c, h, w = layout.regions[index]
    mask[r:r + h, c:c + w] = 1.0
    return mask


# ---------------------------------------------------------------------------
# tasks

class FocusTask:
    """Steer the beam into one detector region.

    Reward and metric are both the energy share of the target region among
    all regions; the metric reruns the candidate pattern on a noise-free copy
    of the bench. Works unchanged when the bench hides a diffuser.
    """

    name = "focus"
    minibatch_size = 1

    def __init__(self, bench: BenchConfig, layout: DetectorLayout | None = None,
                 target_region: int = 2):
        self.bench = bench
        self.layout = layout if layout is not None else default_detector_layout(bench.shape)
        if not 0 <= target_region < len(self.layout):
            raise ConfigError(f"target_region {target_region} out of range "
                              f"for {len(self.layout)} regions")
        self.target_region = target_region
        self._eval_bench = bench.noise_free()

    def initial_mean(self, shape):
        return None

    def rewards(self, env, phases, rng):
        env.set_input(None)
        images = env.measure_batch(phases)
        energies = optics.detector_energies(images, self.layout)
        return energy_share(energies, self.target_region)

    def metric(self, phase) -> float:
        image = optics.run_bench(self._eval_bench, None, phase)
        energies = optics.detector_energies(image.values, self.layout)
        return float(energy_share(energies, self.target_region))

    def insilico_batch(self, rng):
        return None, region_mask(self.bench.shape, self.layout, self.target_region)


class HologramTask:
    """Shape the sensor intensity into a target image.

    Reward is the negative gain-fitted MSE of each measured frame against the
    target; the metric is gain-fitted PSNR on the noise-free bench.
    """

    minibatch_size = 1

    def __init__(self, bench: BenchConfig, target, name: str = "hologram"):
        self.bench = bench
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.shape != bench.shape:
            raise ConfigError(f"target shape {self.target.shape} != bench grid {bench.shape}")
        self.name = name
        self._eval_bench = bench.noise_free()

    def initial_mean(self, shape):
        return None

    def rewards(self, env, phases, rng):
        env.set_input(None)
        images = env.measure_batch(phases)
        return -gain_fitted_mse(images, self.target)

    def eval_image(self, phase) -> np.ndarray:
        return optics.run_bench(self._eval_bench, None, phase).values

    def metric(self, phase) -> float:
        return psnr(self.eval_image(phase), self.target)

    def contrast(self, phase) -> float:
        return grating_contrast(self.eval_image(phase))

    def insilico_batch(self, rng):
        return None, self.target


class AberrationTask(HologramTask):
    """Hologram task that starts from a known-good pattern.

    Meant for a bench with hidden aberrations: the initial pattern is a
    solution for the ideal bench, and training only has to claw back what the
    imperfections destroyed.
    """

    def __init__(self, bench: BenchConfig, target, initial_phase=None):
        super().__init__(bench, target, name="aberration")
        self.initial_phase = None if initial_phase is None else \
            np.asarray(initial_phase, dtype=np.float64)

    def initial_mean(self, shape):
        if self.initial_phase is not None and self.initial_phase.shape != tuple(shape):
            raise ConfigError(f"initial phase shape {self.initial_phase.shape} "
                              f"!= modulator grid {tuple(shape)}")
        return self.initial_phase


class ClassifyTask:
    """Classify digit phase objects by where they throw their light.

    Each round draws minibatch_size digits from the training set; every
    sampled pattern sees the same digits. The per-digit reward is the energy
    share of the label's detector region, averaged over the minibatch. The
    metric is plain argmax accuracy over the test set on the noise-free bench.
    """

    name = "classify"

    def __init__(self, bench: BenchConfig, train: DigitSet, test: DigitSet,
                 layout: DetectorLayout | None = None, minibatch_size: int = 8):
        self.bench = bench
        self.layout = layout if layout is not None else default_detector_layout(bench.shape)
        n_classes = int(max(train.labels.max(), test.labels.max())) + 1
        if len(self.layout) < n_classes:
            raise ConfigError(f"{len(self.layout)} detector regions cannot "
                              f"hold {n_classes} classes")
        if minibatch_size < 1 or minibatch_size > len(train):
            raise ConfigError(f"minibatch_size {minibatch_size} out of range "
                              f"for {len(train)} training digits")
        self.train = train
        self.test = test
        self.minibatch_size = minibatch_size
        self._eval_bench = bench.noise_free()
        self._train_enc = np.stack([encode_digit(im, bench.shape) for im in train.images])
        self._test_enc = np.stack([encode_digit(im, bench.shape) for im in test.images])

    def initial_mean(self, shape):
        return None

    def rewards(self, env, phases, rng):
        idx = rng.choice(len(self.train), size=self.minibatch_size, replace=False)
        total = np.zeros(np.asarray(phases).shape[0])
        for i in idx:
            env.set_input(self._train_enc[i])
            images = env.measure_batch(phases)
            energies = optics.detector_energies(images, self.layout)
            total += energy_share(energies, int(self.train.labels[i]))
        env.set_input(None)
        return total / self.minibatch_size

    def scores(self, phase, encoded_inputs) -> np.ndarray:
        """Class scores for a stack of encoded inputs, noise free."""
        images = optics.run_bench_batch(self._eval_bench, encoded_inputs, phase)
        return class_scores(optics.detector_energies(images, self.layout))

    def metric(self, phase) -> float:
        """Test-set accuracy of the pattern on the noise-free bench."""
        scores = self.scores(phase, self._test_enc)
        predicted = scores.argmax(axis=-1)
        return float((predicted == self.test.labels).mean())

    def insilico_batch(self, rng):
        idx = rng.choice(len(self.train), size=self.minibatch_size, replace=False)
        targets = np.stack([region_mask(self.bench.shape, self.layout,
                                        int(self.train.labels[i])) for i in idx])
        return self._train_enc[idx], targets
