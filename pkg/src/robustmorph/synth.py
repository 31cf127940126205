"""Synthetic galaxy rendering, survey emulation and preprocessing.

Images are channel-first ``(3, H, W)`` float arrays with bands ordered
(g, r, i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import gamma as gamma_fn

from .errors import ShapeError, ValidationError

BANDS = ("g", "r", "i")
FAMILIES = ("disk", "spheroid", "merger")
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
MAX_EXPECTED_COUNTS = 2.0 ** 52


@dataclass(frozen=True)
class Component:
    """One Sérsic light component."""

    n: float
    r_e: float
    flux: tuple[float, float, float]
    axis_ratio: float = 1.0
    position_angle: float = 0.0

    def validate(self, size: int) -> None:
        if not 0.5 <= self.n <= 6:
            raise ValidationError(f"Sersic index n={self.n} outside [0.5, 6]")
        if self.r_e <= 0:
            raise ValidationError(f"effective radius must be positive, got {self.r_e}")
        if self.r_e > size / 3:
            raise ValidationError(f"r_e={self.r_e} exceeds size/3 for a {size}px stamp")
        if not 0 < self.axis_ratio <= 1:
            raise ValidationError(f"axis ratio {self.axis_ratio} outside (0, 1]")
        if len(self.flux) != 3 or min(self.flux) <= 0:
            raise ValidationError(f"band fluxes must be 3 positive values, got {self.flux}")


@dataclass(frozen=True)
class GalaxyParams:
    family: str
    primary: Component
    secondary: Optional[Component] = None
    arm_amplitude: float = 0.0
    pitch: float = 0.35
    separation: float = 0.0
    separation_angle: float = 0.0
    offset: tuple[float, float] = (0.0, 0.0)

    def validate(self, size: int) -> None:
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown galaxy family {self.family!r}")
        self.primary.validate(size)
        if self.family == "merger":
            if self.secondary is None:
                raise ValidationError("merger family needs a secondary component")
            self.secondary.validate(size)
            if self.separation < 0:
                raise ValidationError("separation must be non-negative")
        if self.family == "disk":
            if not 0 <= self.arm_amplitude <= 1:
                raise ValidationError(f"arm amplitude {self.arm_amplitude} outside [0, 1]")
            if not 0 < self.pitch < math.pi / 2:
                raise ValidationError(f"pitch angle {self.pitch} outside (0, pi/2)")


def sersic_b(n: float) -> float:
    return 2.0 * n - 1.0 / 3.0


def sersic_total(n: float, r_e: float, axis_ratio: float) -> float:
    """Total flux of a unit-I_e elliptical Sérsic profile integrated to infinity."""
    b = sersic_b(n)
    return 2 * math.pi * axis_ratio * r_e ** 2 * n * math.exp(b) * b ** (-2 * n) * gamma_fn(2 * n)


def _grid(size: int, oversample: int) -> tuple[np.ndarray, np.ndarray]:
    # sub-pixel sample centres, pixel (0, 0) spans [0, 1)
    s = (np.arange(size * oversample) + 0.5) / oversample
    return np.meshgrid(s, s, indexing="ij")


def _component_image(comp: Component, cy: float, cx: float, size: int, oversample: int,
                     arm_amplitude: float = 0.0, pitch: float = 0.35) -> np.ndarray:
    yy, xx = _grid(size, oversample)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(comp.position_angle), math.sin(comp.position_angle)
    u = dx * c + dy * s
    v = (-dx * s + dy * c) / comp.axis_ratio
    r = np.hypot(u, v)
    b = sersic_b(comp.n)
    profile = np.exp(-b * ((r / comp.r_e) ** (1.0 / comp.n) - 1.0))
    if arm_amplitude:
        phi = np.arctan2(v, u)
        rr = np.maximum(r, 1e-3 * comp.r_e)
        profile = profile * (1.0 + arm_amplitude * np.cos(2.0 * (phi - np.log(rr / comp.r_e) / math.tan(pitch))))
    # average sub-pixels, scale unit-I_e profile to the requested total per band
    shape = profile.reshape(size, oversample, size, oversample).mean(axis=(1, 3))
    norm = 1.0 / sersic_total(comp.n, comp.r_e, comp.axis_ratio)
    return np.stack([shape * (f * norm) for f in comp.flux])


def render_galaxy(params: GalaxyParams, size: int = 64, oversample: int = 4) -> np.ndarray:
    """Noise-free image in flux per second, shape (3, size, size)."""
    if size < 16:
        raise ValidationError(f"stamp size must be >= 16, got {size}")
    params.validate(size)
    cy = size / 2 + params.offset[0]
    cx = size / 2 + params.offset[1]
    if params.family == "merger":
        dy = 0.5 * params.separation * math.sin(params.separation_angle)
        dx = 0.5 * params.separation * math.cos(params.separation_angle)
        img = _component_image(params.primary, cy - dy, cx - dx, size, oversample)
        img = img + _component_image(params.secondary, cy + dy, cx + dx, size, oversample)
    elif params.family == "disk":
        img = _component_image(params.primary, cy, cx, size, oversample, params.arm_amplitude, params.pitch)
    else:
        img = _component_image(params.primary, cy, cx, size, oversample)
    return np.maximum(img, 0.0)


@dataclass(frozen=True)
class SurveyConfig:
    years: float = 10
    exposure: tuple[float, float, float] = (240.0, 552.0, 552.0)  # seconds per year, (g, r, i)
    sky: tuple[float, float, float] = (100.0, 100.0, 100.0)  # counts / s / pixel
    psf_fwhm: float = 3.0  # pixels
    gain: float = 1.0  # counts per flux unit
    seed: int = 0

    def validate(self) -> None:
        if self.years <= 0 or min(self.exposure) <= 0 or self.gain <= 0:
            raise ValidationError("years, exposure times and gain must be positive")
        if min(self.sky) < 0 or self.psf_fwhm < 0:
            raise ValidationError("sky level and PSF FWHM must be non-negative")

    def exposure_time(self, band: int) -> float:
        return self.years * self.exposure[band]


Y10 = SurveyConfig(years=10)
Y1 = SurveyConfig(years=1)


def blur(raw: np.ndarray, fwhm: float) -> np.ndarray:
    if fwhm <= 0:
        return np.array(raw, dtype=np.float64)
    sigma = fwhm * FWHM_TO_SIGMA
    return np.stack([gaussian_filter(np.asarray(b, dtype=np.float64), sigma, mode="constant") for b in raw])


def emulate_survey(raw: np.ndarray, cfg: SurveyConfig, rng: Optional[np.random.Generator] = None,
                   subtract_sky: bool = True) -> np.ndarray:
    """Blur, expose, Poisson-sample and (by default) subtract the sky counts.

    Empty sky pixels end up zero-mean with variance equal to the sky counts.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {raw.shape}")
    if raw.min() < 0:
        raise ValidationError("raw flux image must be non-negative")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    blurred = blur(raw, cfg.psf_fwhm)
    out = np.empty_like(blurred)
    for b in range(3):
        t = cfg.exposure_time(b)
        expected = (blurred[b] * cfg.gain + cfg.sky[b]) * t
        if expected.max() > MAX_EXPECTED_COUNTS:
            raise ValidationError(f"expected counts overflow in band {BANDS[b]} ({expected.max():.3g} > 2^52)")
        counts = rng.poisson(expected).astype(np.float64)
        out[b] = counts - cfg.sky[b] * t if subtract_sky else counts
    return out


@dataclass(frozen=True)
class PreprocessConfig:
    low: float = 0.1
    high: float = 99.9
    c: float = 0.85

    def validate(self) -> None:
        if not 0 <= self.low < self.high <= 100:
            raise ValidationError(f"percentiles must satisfy 0 <= low < high <= 100, got {self.low}, {self.high}")
        if self.c <= 0:
            raise ValidationError("arcsinh constant must be positive")


def preprocess(obs: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Joint-band percentile clip, min-max to [0, 1], then arcsinh(c x) / arcsinh(c)."""
    cfg.validate()
    obs = np.asarray(obs, dtype=np.float64)
    if obs.size < 1000:
        raise ValidationError(f"preprocess needs >= 1000 pixels, got {obs.size}")
    lo, hi = np.percentile(obs, [cfg.low, cfg.high])
    if hi <= lo:
        return np.zeros_like(obs)
    x = (np.clip(obs, lo, hi) - lo) / (hi - lo)
    return np.arcsinh(cfg.c * x) / np.arcsinh(cfg.c)


def augment(img: np.ndarray) -> list[np.ndarray]:
    """[original, hflip, vflip, rot90, rot180] of a square channel-first image."""
    img = np.asarray(img)
    if img.shape[-1] != img.shape[-2]:
        raise ShapeError(f"augment needs a square image, got {img.shape[-2]}x{img.shape[-1]}")
    return [
        img.copy(),
        img[..., :, ::-1].copy(),
        img[..., ::-1, :].copy(),
        np.rot90(img, 1, axes=(-2, -1)).copy(),
        np.rot90(img, 2, axes=(-2, -1)).copy(),
    ]


AUGMENT_FACTOR = 5


# ---------------------------------------------------------------------------
# Parameter sampling per family

@dataclass(frozen=True)
class FamilyPriors:
    """Sampling ranges for each generator family (uniform unless noted).

    Lengths are in pixels for a 64-pixel stamp and fluxes are per 64x64
    stamp; :func:`sample_params` rescales both for other stamp sizes.
    """

    disk_n: tuple[float, float] = (0.5, 0.9)
    disk_re: tuple[float, float] = (7.0, 13.0)
    disk_q: tuple[float, float] = (0.5, 1.0)
    arm_amplitude: tuple[float, float] = (0.3, 0.7)
    pitch: tuple[float, float] = (0.25, 0.5)
    spheroid_n: tuple[float, float] = (3.0, 6.0)
    spheroid_re: tuple[float, float] = (9.0, 16.0)
    spheroid_q: tuple[float, float] = (0.6, 1.0)
    merger_n: tuple[float, float] = (1.0, 4.0)
    merger_re: tuple[float, float] = (2.0, 4.5)
    merger_flux_ratio: tuple[float, float] = (0.5, 1.0)
    merger_sep: tuple[float, float] = (8.0, 16.0)
    flux: tuple[float, float] = (120.0, 300.0)  # r-band flux / s, log-uniform
    offset: float = 1.5


def _u(rng: np.random.Generator, lohi) -> float:
    return float(rng.uniform(*lohi))


def _colors(rng, family: str, total: float) -> tuple[float, float, float]:
    # (g, r, i) relative to r; spheroids redder than disks
    if family == "spheroid":
        g, i = rng.uniform(0.45, 0.65), rng.uniform(1.15, 1.35)
    else:
        g, i = rng.uniform(0.7, 0.95), rng.uniform(1.0, 1.15)
    return (total * g, total, total * i)


def sample_params(family: str, rng: np.random.Generator, priors: FamilyPriors = FamilyPriors(),
                  size: int = 64) -> GalaxyParams:
    """Draw one source of the given family for a ``size`` x ``size`` stamp.

    Radii, separations and offsets scale with size / 64 and fluxes with its
    square, so surface brightness does not depend on the stamp size.
    """
    k = size / 64.0
    flux = float(np.exp(rng.uniform(*np.log(priors.flux)))) * k * k
    offset = tuple(float(v) * k for v in rng.uniform(-priors.offset, priors.offset, size=2))
    pa = float(rng.uniform(0, math.pi))
    if family == "disk":
        comp = Component(_u(rng, priors.disk_n), k * _u(rng, priors.disk_re), _colors(rng, family, flux),
                         _u(rng, priors.disk_q), pa)
        return GalaxyParams("disk", comp, arm_amplitude=_u(rng, priors.arm_amplitude),
                            pitch=_u(rng, priors.pitch), offset=offset)
    if family == "spheroid":
        comp = Component(_u(rng, priors.spheroid_n), k * _u(rng, priors.spheroid_re), _colors(rng, family, flux),
                         _u(rng, priors.spheroid_q), pa)
        return GalaxyParams("spheroid", comp, offset=offset)
    if family == "merger":
        ratio = _u(rng, priors.merger_flux_ratio)
        f1 = flux / (1 + ratio)
        a = Component(_u(rng, priors.merger_n), k * _u(rng, priors.merger_re), _colors(rng, "disk", f1),
                      _u(rng, priors.spheroid_q), pa)
        b = Component(_u(rng, priors.merger_n), k * _u(rng, priors.merger_re), _colors(rng, "spheroid", f1 * ratio),
                      _u(rng, priors.spheroid_q), float(rng.uniform(0, math.pi)))
        return GalaxyParams("merger", a, b, separation=k * _u(rng, priors.merger_sep),
                            separation_angle=float(rng.uniform(0, 2 * math.pi)), offset=offset)
    raise ValidationError(f"unknown galaxy family {family!r}")
