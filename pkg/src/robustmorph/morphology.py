"""Gini / M20 statistics and the G-M20 "bulge statistic" classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

LABELS = ("spiral", "elliptical", "merger")
SPIRAL, ELLIPTICAL, MERGER = range(3)
SEGMAP_THRESHOLD = 0.02


class DegenerateError(ValidationError):
    """Statistic undefined for this source (e.g. zero second moment)."""


@dataclass(frozen=True)
class BoundaryConstants:
    merger_slope: float = -0.14
    merger_intercept: float = 0.33
    es_a: float = 0.693
    es_b: float = 3.96
    es_c: float = 4.95
    g0: float = 0.565
    m20_0: float = -1.679

    def merger_line(self, m20: float) -> float:
        return self.merger_slope * m20 + self.merger_intercept

    def elliptical_spiral_line(self, m20: float) -> float:
        return (self.es_a * m20 + self.es_b) / self.es_c


BOUNDARIES = BoundaryConstants()


@dataclass(frozen=True)
class MorphologyMeasures:
    gini: float
    m20: float
    n_pixels: int

    @property
    def label(self) -> int:
        return classify_gm20(self.gini, self.m20)


def _flux_map(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.sum(axis=0)
    if image.ndim != 2:
        raise ValidationError(f"expected (C, H, W) or (H, W) image, got shape {image.shape}")
    return image


def make_segmap(image, threshold_fraction: float = SEGMAP_THRESHOLD) -> np.ndarray:
    """Pixels whose band-summed value exceeds ``threshold_fraction`` of the peak."""
    if not 0 <= threshold_fraction < 1:
        raise ValidationError(f"threshold_fraction must lie in [0, 1), got {threshold_fraction}")
    flux = _flux_map(image)
    peak = flux.max()
    if peak <= 0:
        raise ValidationError("no source: image has no positive pixels")
    mask = flux > threshold_fraction * peak
    if not mask.any():
        raise ValidationError("no source: segmentation map is empty")
    return mask


def gini(image, segmap) -> float:
    x = np.sort(np.abs(_flux_map(image)[np.asarray(segmap, dtype=bool)]))
    n = x.size
    if n < 2:
        raise ValidationError("Gini needs at least 2 segment pixels")
    mean = x.mean()
    if mean == 0:
        raise ValidationError("Gini undefined for an all-zero segment")
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * x) / (mean * n * (n - 1)))


def m20(image, segmap) -> float:
    """log10 of the brightest-20% second moment over the total second moment.

    The centre is the segment pixel that minimises the total second moment.
    Pixels are added in descending flux order until the cumulative flux first
    reaches 20% of the total; the crossing pixel counts in full.
    """
    flux = _flux_map(image)
    mask = np.asarray(segmap, dtype=bool)
    ys, xs = np.nonzero(mask)
    f = flux[ys, xs]
    if np.count_nonzero(f > 0) < 2:
        raise DegenerateError("M20 needs at least 2 pixels with positive flux")
    s0 = f.sum()
    s1x, s1y = (f * xs).sum(), (f * ys).sum()
    s2 = (f * (xs * xs + ys * ys)).sum()
    mtot_all = s2 - 2 * (xs * s1x + ys * s1y) + (xs * xs + ys * ys) * s0
    k = int(np.argmin(mtot_all))
    cx, cy = xs[k], ys[k]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    moments = f * d2
    mtot = moments.sum()
    if mtot <= 0:
        raise DegenerateError("total second moment is zero (single-point source)")
    order = np.argsort(-f, kind="stable")
    csum = np.cumsum(f[order])
    last = int(np.searchsorted(csum, 0.2 * s0, side="left"))
    m_bright = moments[order[: last + 1]].sum()
    if m_bright <= 0:
        raise DegenerateError("brightest 20% of the flux sits at the moment centre")
    return float(np.log10(m_bright / mtot))


def classify_gm20(g: float, m: float, bounds: BoundaryConstants = BOUNDARIES) -> int:
    """Label index: merger above the merger line, else elliptical above the E/S line, else spiral."""
    if g > bounds.merger_line(m):
        return MERGER
    if g > bounds.elliptical_spiral_line(m):
        return ELLIPTICAL
    return SPIRAL


def measure(image, threshold_fraction: float = SEGMAP_THRESHOLD) -> MorphologyMeasures:
    seg = make_segmap(image, threshold_fraction)
    return MorphologyMeasures(gini(image, seg), m20(image, seg), int(seg.sum()))
