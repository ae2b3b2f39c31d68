"""Scalar diffraction simulator for a phase-modulated bench.

Fields live on small power-of-two grids with physical pitch and wavelength in
micrometres; propagation is the angular-spectrum transfer function on the
periodic grid (evanescent components zeroed), optionally with zero-pad
embedding when aperture-style boundaries are wanted. The simulated bench
chains plane-wave illumination, the quantized modulator phase, hidden
imperfection screens, propagation, and a photon-budget sensor model.

All stochastic pieces take an explicit numpy Generator; identical seeds give
identical images, bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.fft as _fft
import scipy.ndimage as _ndi

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def wrap_phase(values):
    """Map phases onto the canonical interval [0, 2*pi)."""
    return np.mod(values, TWO_PI)


@dataclass(frozen=True)
class ComplexField:
    """Monochromatic scalar field sampled on a regular grid.

    data is (H, W) complex; pitch_um is the sample spacing and wavelength_um
    the vacuum wavelength, both in micrometres. Grid sides must be powers of
    two (the propagator works on the periodic grid).
    """

    data: np.ndarray
    pitch_um: float
    wavelength_um: float

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.complex128)
        if a.ndim != 2:
            raise ValueError(f"field must be 2-D, got shape {a.shape}")
        if not (_is_pow2(a.shape[0]) and _is_pow2(a.shape[1])):
            raise ValueError(f"grid sides must be powers of two, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("field contains non-finite samples")
        if not (self.pitch_um > 0 and self.wavelength_um > 0):
            raise ValueError(
                f"pitch and wavelength must be positive, got "
                f"{self.pitch_um}, {self.wavelength_um}")
        object.__setattr__(self, "data", a)

    @property
    def shape(self):
        return self.data.shape

    def energy(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))


@dataclass(frozen=True)
class PhaseMap:
    """Real-valued phase pattern in radians. Values may be unwrapped;
    canonical() folds them onto [0, 2*pi)."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"phase map must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("phase map contains non-finite values")
        object.__setattr__(self, "values", a)

    @property
    def shape(self):
        return self.values.shape

    def canonical(self) -> "PhaseMap":
        return PhaseMap(wrap_phase(self.values))


@dataclass(frozen=True)
class IntensityImage:
    """Non-negative sensor image in sensor units."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"intensity image must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("intensity image contains non-finite values")
        if a.min() < 0:
            raise ValueError(f"intensity image has negative values (min {a.min()})")
        object.__setattr__(self, "values", a)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class NoiseModel:
    """Sensor noise: Poisson shot noise with an expected total photon count
    over the frame, plus additive Gaussian read noise in sensor units."""

    photon_budget: float = 1e5
    read_sigma: float = 1e-3

    def __post_init__(self):
        if not self.photon_budget > 0:
            raise ConfigError(f"photon_budget must be positive, got {self.photon_budget}")
        if self.read_sigma < 0:
            raise ConfigError(f"read_sigma must be >= 0, got {self.read_sigma}")


@dataclass(frozen=True)
class DiffuserSpec:
    """Static random phase screen: iid uniform phases smoothed to the given
    correlation length (pixels), rescaled to span [0, 2*pi)."""

    seed: int = 7
    correlation_px: float = 4.0

    def __post_init__(self):
        if self.correlation_px < 0:
            raise ConfigError(f"correlation_px must be >= 0, got {self.correlation_px}")


@dataclass(frozen=True)
class AberrationSpec:
    """Hidden static aberration: low-order Zernike phase (RMS radians over
    the inscribed disk) applied at the modulator plane, plus an integer
    lateral shift (rows, cols) of the sensor image."""

    defocus_rms: float = 0.0
    astigmatism_rms: float = 0.0
    coma_rms: float = 0.0
    shift_px: tuple = (0, 0)

    def __post_init__(self):
        dy, dx = self.shift_px
        if int(dy) != dy or int(dx) != dx:
            raise ConfigError(f"shift_px must be integer pixels, got {self.shift_px}")
        object.__setattr__(self, "shift_px", (int(dy), int(dx)))


@dataclass(frozen=True)
class BenchConfig:
    """Full description of the simulated bench.

    The imperfection fields (diffuser, aberration, noise seeds) describe the
    physical instrument; optimizers never see this object, only measured
    images through the instrument interface.
    """

    shape: tuple = (64, 64)
    pitch_um: float = 8.0
    wavelength_um: float = 0.52
    distance_mm: float = 100.0
    slm_bits: int = 8
    noise: NoiseModel | None = field(default_factory=NoiseModel)
    diffuser: DiffuserSpec | None = None
    aberration: AberrationSpec | None = None
    seed: int = 0

    def __post_init__(self):
        h, w = self.shape
        if not (_is_pow2(h) and _is_pow2(w)):
            raise ConfigError(f"grid sides must be powers of two, got {self.shape}")
        object.__setattr__(self, "shape", (int(h), int(w)))
        if not (1 <= self.slm_bits <= 16):
            raise ConfigError(f"slm_bits must be in 1..16, got {self.slm_bits}")
        if self.distance_mm < 0:
            raise ConfigError(f"distance_mm must be >= 0, got {self.distance_mm}")
        if not (self.pitch_um > 0 and self.wavelength_um > 0):
            raise ConfigError("pitch_um and wavelength_um must be positive")

    def noise_free(self) -> "BenchConfig":
        """Same bench with the sensor noise turned off (imperfections kept)."""
        return replace(self, noise=None)

    def ideal(self) -> "BenchConfig":
        """The bench a modeller would assume: no noise, no hidden screens."""
        return replace(self, noise=None, diffuser=None, aberration=None)


@dataclass(frozen=True)
class DetectorLayout:
    """Rectangular, pairwise-disjoint readout regions: (row, col, h, w) each."""

    regions: tuple

    def __post_init__(self):
        regs = tuple(tuple(int(v) for v in r) for r in self.regions)
        for r in regs:
            if len(r) != 4 or r[2] <= 0 or r[3] <= 0 or r[0] < 0 or r[1] < 0:
                raise ValueError(f"bad region {r}, want (row, col, h, w) with h, w > 0")
        for i in range(len(regs)):
            for j in range(i + 1, len(regs)):
                a, b = regs[i], regs[j]
                if a[0] < b[0] + b[2] and b[0] < a[0] + a[2] \
                        and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]:
                    raise ValueError(f"regions {i} and {j} overlap: {a} vs {b}")
        object.__setattr__(self, "regions", regs)

    def __len__(self):
        return len(self.regions)


def default_detector_layout(shape=(64, 64), region=(6, 6), grid=(2, 5), spacing=8):
    """Centered grid of readout regions; defaults give ten 6x6 regions in two
    rows of five with 8-pixel gaps."""
    H, W = shape
    gr, gc = grid
    rh, rw = region
    block_h = gr * rh + (gr - 1) * spacing
    block_w = gc * rw + (gc - 1) * spacing
    if block_h > H or block_w > W:
        raise ConfigError(f"detector block {block_h}x{block_w} does not fit {H}x{W}")
    r0 = (H - block_h) // 2
    c0 = (W - block_w) // 2
    regions = [(r0 + i * (rh + spacing), c0 + j * (rw + spacing), rh, rw)
               for i in range(gr) for j in range(gc)]
    return DetectorLayout(tuple(regions))


# ---------------------------------------------------------------------------
# propagation

@lru_cache(maxsize=64)
def _transfer_function(h, w, pitch_um, wavelength_um, distance_um):
    fy = np.fft.fftfreq(h, d=pitch_um)
    fx = np.fft.fftfreq(w, d=pitch_um)
    fx2 = fx[np.newaxis, :] ** 2
    fy2 = fy[:, np.newaxis] ** 2
    arg = 1.0 / wavelength_um ** 2 - fx2 - fy2
    prop = arg > 0
    kz = np.sqrt(np.where(prop, arg, 0.0))
    tf = np.where(prop, np.exp(1j * TWO_PI * distance_um * kz), 0.0)
    tf.setflags(write=False)
    return tf


def propagate_array(u, pitch_um, wavelength_um, distance_mm, pad=1):
    """Angular-spectrum propagation of (..., H, W) complex arrays.

    pad=1 treats the grid as periodic (the operator is then exactly unitary
    on the propagating band and its adjoint is propagation by -d). pad>1
    embeds the field centered in a pad-times-larger zero grid, propagates,
    and crops, which approximates free-aperture boundaries.
    """
    u = np.asarray(u, dtype=np.complex128)
    if distance_mm == 0:
        return u.copy()
    h, w = u.shape[-2:]
    if pad > 1:
        ph, pw = h * pad, w * pad
        big = np.zeros(u.shape[:-2] + (ph, pw), dtype=np.complex128)
        r0, c0 = (ph - h) // 2, (pw - w) // 2
        big[..., r0:r0 + h, c0:c0 + w] = u
        out = propagate_array(big, pitch_um, wavelength_um, distance_mm, pad=1)
        return out[..., r0:r0 + h, c0:c0 + w]
    tf = _transfer_function(h, w, float(pitch_um), float(wavelength_um),
                            float(distance_mm) * 1000.0)
    spec = _fft.fft2(u, axes=(-2, -1))
    spec *= tf
    return _fft.ifft2(spec, axes=(-2, -1))


def propagate(field: ComplexField, distance_mm: float, pad: int = 1) -> ComplexField:
    """Propagate a field along the axis by distance_mm (negative reverses)."""
    if pad < 1 or int(pad) != pad:
        raise ValueError(f"pad factor must be a positive integer, got {pad}")
    out = propagate_array(field.data, field.pitch_um, field.wavelength_um,
                          distance_mm, pad=int(pad))
    return replace(field, data=out)


def apply_phase(field: ComplexField, phase) -> ComplexField:
    """Multiply the field by exp(i*phase)."""
    values = phase.values if isinstance(phase, PhaseMap) else np.asarray(phase, float)
    if values.shape != field.shape:
        raise ValueError(f"phase shape {values.shape} != field shape {field.shape}")
    return replace(field, data=field.data * np.exp(1j * values))


def quantize_phase(phase, bits: int):
    """Snap phases to the 2**bits levels an SLM can display.

    Wrap-aware: values are folded to [0, 2*pi) first and values within half a
    step below 2*pi snap to level 0. Returns an array (or PhaseMap in,
    PhaseMap out).
    """
    if not (1 <= int(bits) <= 16) or int(bits) != bits:
        raise ConfigError(f"bits must be an integer in 1..16, got {bits}")
    was_map = isinstance(phase, PhaseMap)
    values = phase.values if was_map else np.asarray(phase, dtype=np.float64)
    levels = 1 << int(bits)
    step = TWO_PI / levels
    idx = np.round(wrap_phase(values) / step).astype(np.int64) % levels
    out = idx * step
    return PhaseMap(out) if was_map else out


def zernike_phase(shape, defocus=0.0, astigmatism=0.0, coma=0.0):
    """Low-order Zernike phase over the inscribed disk, zero outside.

    Coefficients are RMS radians of the Noll-normalised modes: defocus
    sqrt(3)(2r^2-1), vertical-axis astigmatism sqrt(6) r^2 cos(2t), and
    horizontal coma sqrt(8)(3r^3-2r) cos(t). Center convention matches the
    FFT grid (pixel (H//2, W//2) sits at r = 0), so for even grids the disk
    touches the low edge one pixel before the high edge.
    """
    H, W = shape
    rad = min(H, W) / 2.0
    y = (np.arange(H) - H // 2) / rad
    x = (np.arange(W) - W // 2) / rad
    X, Y = np.meshgrid(x, y)
    rho = np.hypot(X, Y)
    theta = np.arctan2(Y, X)
    disk = rho <= 1.0
    z = np.zeros((H, W))
    if defocus:
        z += defocus * math.sqrt(3.0) * (2.0 * rho ** 2 - 1.0)
    if astigmatism:
        z += astigmatism * math.sqrt(6.0) * rho ** 2 * np.cos(2.0 * theta)
    if coma:
        z += coma * math.sqrt(8.0) * (3.0 * rho ** 3 - 2.0 * rho) * np.cos(theta)
    return np.where(disk, z, 0.0)


@lru_cache(maxsize=16)
def _diffuser_screen(shape, seed, correlation_px):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.0, TWO_PI, size=shape)
    if correlation_px == 0:
        raw.setflags(write=False)
        return raw
    smooth = _ndi.gaussian_filter(raw, sigma=correlation_px, mode="wrap")
    lo, hi = smooth.min(), smooth.max()
    top = np.nextafter(TWO_PI, 0.0)  # keep the span inside [0, 2*pi)
    out = (smooth - lo) / (hi - lo) * top
    out.setflags(write=False)
    return out


def make_diffuser(shape, correlation_px=4.0, seed=7):
    """Static diffuser phase screen in [0, 2*pi).

    correlation_px=0 gives raw iid uniform phases; otherwise the screen is
    Gaussian-smoothed at that length and rescaled to span [0, 2*pi).
    """
    if correlation_px < 0:
        raise ConfigError(f"correlation_px must be >= 0, got {correlation_px}")
    return np.array(_diffuser_screen(tuple(shape), int(seed), float(correlation_px)))


@lru_cache(maxsize=16)
def _aberration_screen(shape, defocus, astigmatism, coma):
    z = zernike_phase(shape, defocus, astigmatism, coma)
    z.setflags(write=False)
    return z


def _measure_array(intensity, noise, rng):
    """Sensor model on (..., H, W) noiseless intensities."""
    if noise is None:
        return intensity
    if rng is None:
        raise ValueError("a numpy Generator is required when noise is enabled")
    total = intensity.sum(axis=(-2, -1), keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    lam = noise.photon_budget * intensity / safe
    counts = rng.poisson(lam).astype(np.float64)
    out = counts * (safe / noise.photon_budget)
    out += rng.normal(0.0, noise.read_sigma, size=intensity.shape)
    return np.clip(out, 0.0, None)


def measure(field: ComplexField, noise: NoiseModel | None = None,
            rng: np.random.Generator | None = None) -> IntensityImage:
    """Read the field off a sensor: |u|^2, optionally with shot/read noise.

    With noise, each pixel draws Poisson(photon_budget * I / sum I) counts,
    rescaled back to input units so the expected image equals the noiseless
    one, plus Gaussian read noise, clamped at zero.
    """
    return IntensityImage(_measure_array(np.abs(field.data) ** 2, noise, rng))


def detector_energies(image, layout: DetectorLayout) -> np.ndarray:
    """Summed intensity in each layout region; works on (..., H, W) stacks."""
    values = image.values if isinstance(image, IntensityImage) else np.asarray(image)
    H, W = values.shape[-2:]
    for r, c, h, w in layout.regions:
        if r + h > H or c + w > W:
            raise ValueError(f"region {(r, c, h, w)} exceeds the {H}x{W} sensor")
    out = np.stack([values[..., r:r + h, c:c + w].sum(axis=(-2, -1))
                    for r, c, h, w in layout.regions], axis=-1)
    return out


def run_bench_batch(config: BenchConfig, input_phase, slm_phases,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Simulate the bench for a stack of modulator phases.

    slm_phases is (M, H, W) (or (H, W)); returns (M, H, W) float64 images.
    input_phase may be a single (H, W) scene or a stack broadcastable against
    the modulator stack. Pipeline: plane wave -> input phase plus quantized
    modulator phase -> hidden aberration -> propagate (split around the
    diffuser when one is configured) -> lateral sensor shift -> sensor model.
    """
    H, W = config.shape
    phases = np.asarray(slm_phases, dtype=np.float64)
    squeeze = phases.ndim == 2
    phases = phases.reshape((-1, H, W))
    total = quantize_phase(phases, config.slm_bits)
    if input_phase is not None:
        inp = input_phase.values if isinstance(input_phase, PhaseMap) else np.asarray(input_phase)
        if inp.shape[-2:] != (H, W):
            raise ValueError(f"input phase shape {inp.shape} != bench grid {(H, W)}")
        total = total + inp
        squeeze = squeeze and inp.ndim == 2
    ab = config.aberration
    if ab is not None:
        total = total + _aberration_screen(config.shape, ab.defocus_rms,
                                           ab.astigmatism_rms, ab.coma_rms)
    u = np.exp(1j * total)
    if config.diffuser is not None:
        half = config.distance_mm / 2.0
        u = propagate_array(u, config.pitch_um, config.wavelength_um, half)
        u = u * np.exp(1j * _diffuser_screen(config.shape, config.diffuser.seed,
                                             config.diffuser.correlation_px))
        u = propagate_array(u, config.pitch_um, config.wavelength_um, half)
    else:
        u = propagate_array(u, config.pitch_um, config.wavelength_um, config.distance_mm)
    intensity = np.abs(u) ** 2
    if ab is not None and ab.shift_px != (0, 0):
        intensity = np.roll(intensity, ab.shift_px, axis=(-2, -1))
    intensity = _measure_array(intensity, config.noise, rng)
    return intensity[0] if squeeze else intensity


def run_bench(config: BenchConfig, input_phase, slm_phase,
              rng: np.random.Generator | None = None) -> IntensityImage:
    """Single-shot bench run; see run_bench_batch for the pipeline."""
    values = slm_phase.values if isinstance(slm_phase, PhaseMap) else slm_phase
    return IntensityImage(run_bench_batch(config, input_phase, values, rng))
