"""Latent-space robustness measures: distances, JS distance, church windows, isomap."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components, csgraph_from_dense, shortest_path

from .errors import ConfigError, ShapeError, ValidationError

log = logging.getLogger(__name__)

DOMAIN_TAGS = ("Y10", "Y1", "1P")
CLASS_COLORS = ("#ff8c00", "#8a2be2", "#000080")  # spiral, elliptical, merger


class DegenerateDirectionError(ValidationError):
    """A church-window axis has zero length."""


class DisconnectedGraphError(ValidationError):
    """The neighbour graph has more than one connected component."""


@dataclass
class LatentRecord:
    example_id: int
    domain: str
    latent: np.ndarray
    logits: np.ndarray
    true_label: int

    def __post_init__(self):
        if self.domain not in DOMAIN_TAGS:
            raise ValidationError(f"domain must be one of {DOMAIN_TAGS}, got {self.domain!r}")

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits))


# ---------------------------------------------------------------------------
# distances

def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def distance_stats(values: Sequence[float]) -> dict:
    """Median, mean and standard error (n - 1 denominator) of a sample."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValidationError(f"distance_stats needs at least 2 values, got {v.size}")
    return {
        "n": int(v.size),
        "median": float(np.median(v)),
        "mean": float(v.mean()),
        "stderr": float(v.std(ddof=1) / np.sqrt(v.size)),
    }


@dataclass
class Histogram:
    edges: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def validate(self) -> None:
        if len(self.edges) != len(self.p) + 1 or self.p.shape != self.q.shape:
            raise ShapeError("histogram edges and masses disagree")
        if np.any(np.diff(self.edges) <= 0):
            raise ValidationError("bin edges must be strictly ascending")
        for name, m in (("P", self.p), ("Q", self.q)):
            if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
                raise ValidationError(f"{name} must be non-negative and sum to 1")


def histograms(a: Sequence[float], b: Sequence[float], bins: int = 20) -> Histogram:
    """Normalised histograms of two samples on shared equal-width bins over their joint range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("both samples must be non-empty")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0].astype(np.float64)
    q = np.histogram(b, edges)[0].astype(np.float64)
    return Histogram(edges, p / p.sum(), q / q.sum())


def _kl2(p: np.ndarray, r: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / r[nz])))


def js_distance(p, q=None) -> float:
    """Square root of the base-2 Jensen-Shannon divergence.

    Accepts either a :class:`Histogram` or two mass vectors.
    """
    if isinstance(p, Histogram):
        p.validate()
        p, q = p.p, p.q
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("P and Q must have the same number of bins")
    if np.any(p < 0) or np.any(q < 0) or abs(p.sum() - 1) > 1e-12 or abs(q.sum() - 1) > 1e-12:
        raise ValidationError("P and Q must be normalised mass vectors")
    r = 0.5 * (p + q)
    div = 0.5 * _kl2(p, r) + 0.5 * _kl2(q, r)
    return float(np.sqrt(min(max(div, 0.0), 1.0)))


# ---------------------------------------------------------------------------
# church window

@dataclass
class ChurchWindowGrid:
    baseline_id: int
    axis1: np.ndarray
    axis2: np.ndarray
    coords: np.ndarray  # the R grid values along each axis, from -1 to 1
    labels: np.ndarray  # (R, R); row index follows axis 2, column index axis 1
    markers: dict

    @property
    def resolution(self) -> int:
        return len(self.coords)

    def label_at(self, a: float, b: float) -> int:
        i = int(np.argmin(np.abs(self.coords - b)))
        j = int(np.argmin(np.abs(self.coords - a)))
        return int(self.labels[i, j])


def church_window(baseline: LatentRecord, onepixel: LatentRecord, noisy: LatentRecord,
                  head: Callable[[np.ndarray], np.ndarray], resolution: int = 101) -> ChurchWindowGrid:
    """Label the plane through the baseline latent spanned by the 1P and Y1 offsets.

    Cell (a, b) holds the argmax of ``head`` at base + a v1 + b v2, evaluated in
    the equivalent form (1 - a - b) base + a l1P + b lY1 so that the marker
    cells reproduce the three latents exactly.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigError(f"resolution must be odd and >= 3, got {resolution}")
    if not (baseline.example_id == onepixel.example_id == noisy.example_id):
        raise ValidationError("church window needs three records of the same example")
    base = np.asarray(baseline.latent, dtype=np.float64)
    l1p = np.asarray(onepixel.latent, dtype=np.float64)
    ly1 = np.asarray(noisy.latent, dtype=np.float64)
    v1, v2 = l1p - base, ly1 - base
    if not np.any(v1):
        raise DegenerateDirectionError("one-pixel direction is the zero vector")
    if not np.any(v2):
        raise DegenerateDirectionError("noise direction is the zero vector")
    coords = np.linspace(-1.0, 1.0, resolution)
    coords[resolution // 2] = 0.0
    bb, aa = np.meshgrid(coords, coords, indexing="ij")
    a, b = aa.reshape(-1, 1), bb.reshape(-1, 1)
    points = (1.0 - a - b) * base + a * l1p + b * ly1
    logits = np.asarray(head(points.astype(np.asarray(baseline.latent).dtype)))
    labels = logits.argmax(axis=1).reshape(resolution, resolution)
    markers = {"baseline": (0.0, 0.0), "1P": (1.0, 0.0), "Y1": (0.0, 1.0)}
    return ChurchWindowGrid(baseline.example_id, v1, v2, coords, labels, markers)


def window_to_csv(grid: ChurchWindowGrid, header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["b\\a"] + [repr(float(c)) for c in grid.coords])
    for i in range(grid.resolution - 1, -1, -1):
        writer.writerow([repr(float(grid.coords[i]))] + [int(v) for v in grid.labels[i]])
    return buf.getvalue()


def window_to_svg(grid: ChurchWindowGrid, cell: int = 4, header: str = "") -> str:
    """Coloured cell raster with markers: x baseline, star 1P, triangle Y1."""
    r = grid.resolution
    size = r * cell
    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" viewBox="0 0 %d %d">' % (size, size, size, size)]
    if header:
        out.append("<!-- %s -->" % header.lstrip("# "))
    for i in range(r):
        y = (r - 1 - i) * cell  # b grows upwards
        row = grid.labels[i]
        j = 0
        while j < r:
            k = j
            while k + 1 < r and row[k + 1] == row[j]:
                k += 1
            out.append('<rect x="%d" y="%d" width="%d" height="%d" fill="%s"/>'
                       % (j * cell, y, (k - j + 1) * cell, cell, CLASS_COLORS[int(row[j])]))
            j = k + 1

    def pos(a, b):
        return (a + 1) / 2 * (size - cell) + cell / 2, (1 - (b + 1) / 2) * (size - cell) + cell / 2

    s = 3 * cell
    x, y = pos(*grid.markers["baseline"])
    out.append('<path d="M%.1f %.1f L%.1f %.1f M%.1f %.1f L%.1f %.1f" stroke="white" stroke-width="2"/>'
               % (x - s, y - s, x + s, y + s, x - s, y + s, x + s, y - s))
    x, y = pos(*grid.markers["1P"])
    star = []
    for t in range(10):
        rad = s if t % 2 == 0 else s / 2.5
        ang = np.pi / 2 + t * np.pi / 5
        star.append("%.1f,%.1f" % (x + rad * np.cos(ang), y - rad * np.sin(ang)))
    out.append('<polygon points="%s" fill="white" stroke="black"/>' % " ".join(star))
    x, y = pos(*grid.markers["Y1"])
    out.append('<polygon points="%.1f,%.1f %.1f,%.1f %.1f,%.1f" fill="white" stroke="black"/>'
               % (x, y - s, x - s, y + s, x + s, y + s))
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# isomap

@dataclass
class NeighborGraph:
    """Dense symmetric weight matrix; ``inf`` marks a missing edge."""

    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.weights)

    def has_edge(self, i: int, j: int) -> bool:
        return bool(np.isfinite(self.weights[i, j])) and i != j


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ np.array(x.T, order="C")), 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def knn_graph(points, k: int) -> NeighborGraph:
    """Union-symmetrised k-nearest-neighbour graph with Euclidean edge weights."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k < 1 or k >= n:
        raise ConfigError(f"k must satisfy 1 <= k < n = {n}, got {k}")
    d = pairwise_distances(x)
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    nbrs = np.argsort(masked, axis=1, kind="stable")[:, :k]
    w = np.full((n, n), np.inf)
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.reshape(-1)
    w[rows, cols] = d[rows, cols]
    w[cols, rows] = d[rows, cols]
    np.fill_diagonal(w, 0.0)
    return NeighborGraph(w)


def geodesic_distances(graph: NeighborGraph, largest_component: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs shortest paths.  Returns (distance matrix, indices of the nodes kept).

    Zero-weight edges (duplicate points) count as edges.  A disconnected
    graph is an error unless ``largest_component`` is set.
    """
    sparse = csgraph_from_dense(graph.weights, null_value=np.inf)
    n_comp, comp = connected_components(sparse, directed=False)
    keep = np.arange(graph.n)
    if n_comp > 1:
        sizes = np.bincount(comp)
        if not largest_component:
            raise DisconnectedGraphError(f"graph has {n_comp} components of sizes {sorted(sizes.tolist(), reverse=True)}")
        keep = np.nonzero(comp == int(np.argmax(sizes)))[0]
        sparse = csgraph_from_dense(graph.weights[np.ix_(keep, keep)], null_value=np.inf)
    dist = shortest_path(sparse, method="D", directed=False)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist, keep


def double_center(distances: np.ndarray) -> np.ndarray:
    d2 = np.asarray(distances, dtype=np.float64) ** 2
    row = d2.mean(axis=1, keepdims=True)
    col = d2.mean(axis=0, keepdims=True)
    return -0.5 * (d2 - row - col + d2.mean())


def top_eigenpairs(b: np.ndarray, d: int, tol: float = 1e-10, max_iter: int = 10000,
                   oversample: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``d`` eigenpairs of a symmetric matrix by block power iteration.

    Each sweep multiplies a block of ``d + oversample`` vectors by ``b``,
    re-orthonormalises it (deflating the directions already found) and
    applies a Rayleigh-Ritz step.  Iteration stops once the residual of every
    wanted Ritz pair is below ``tol`` times the spectral scale.
    """
    n = len(b)
    m = min(n, d + oversample)
    v = np.linalg.qr(np.random.default_rng(0).standard_normal((n, m)))[0]
    scale = max(float(np.abs(b).sum(axis=1).max()), 1e-300)
    vals = np.zeros(m)
    for _ in range(max_iter):
        bv = b @ v
        small = v.T @ bv
        vals, rot = np.linalg.eigh(0.5 * (small + small.T))
        order = np.argsort(-vals)
        vals, rot = vals[order], rot[:, order]
        v, bv = v @ rot, bv @ rot
        resid = np.linalg.norm(bv[:, :d] - v[:, :d] * vals[:d], axis=0)
        if np.all(resid <= tol * scale):
            break
        v = np.linalg.qr(bv)[0]
    else:
        log.warning("eigen-solver hit max_iter=%d (residual %.3g)", max_iter, float(resid.max() / scale))
    return vals[:d], v[:, :d]


def classical_mds(distances, d: int = 2, tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    """Coordinates from a distance matrix via the double-centred Gram matrix."""
    dist = np.asarray(distances, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {dist.shape}")
    if not np.allclose(dist, dist.T, atol=1e-12) or np.any(np.diag(dist) != 0):
        raise ValidationError("distance matrix must be symmetric with zero diagonal")
    if d < 1:
        raise ConfigError("target dimension must be >= 1")
    n = len(dist)
    b = double_center(dist)
    if not np.any(b):
        return np.zeros((n, d))
    vals, vecs = top_eigenpairs(b, min(d, n), tol, max_iter)
    scale = np.abs(vals).max()
    vals = np.where(vals > tol * scale, vals, 0.0)
    coords = np.zeros((n, d))
    coords[:, :len(vals)] = vecs * np.sqrt(vals)
    rank = int(np.count_nonzero(vals))
    if rank < d:
        warnings.warn(f"requested {d} dimensions but the Gram matrix has rank {rank}; extra coordinates are zero",
                      RuntimeWarning, stacklevel=2)
    # fix each axis's sign so the output is deterministic
    for j in range(rank):
        col = coords[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0:
            coords[:, j] = -col
    return coords


@dataclass
class IsomapEmbedding:
    ids: np.ndarray
    k: int
    d: int
    coords: np.ndarray
    stress: float
    index: np.ndarray  # positions of the kept points in the input


def kruskal_stress(target: np.ndarray, coords: np.ndarray) -> float:
    emb = pairwise_distances(coords)
    den = float((target ** 2).sum())
    return float(np.sqrt(((target - emb) ** 2).sum() / den)) if den > 0 else 0.0


def isomap(points, k: int = 5, d: int = 2, ids: Optional[Sequence[int]] = None,
           largest_component: bool = False) -> IsomapEmbedding:
    if d not in (2, 3):
        raise ConfigError(f"isomap target dimension must be 2 or 3, got {d}")
    x = np.asarray(points, dtype=np.float64)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    geo, keep = geodesic_distances(knn_graph(x, k), largest_component)
    coords = classical_mds(geo, d)
    return IsomapEmbedding(ids[keep], k, d, coords, kruskal_stress(geo, coords), keep)


# ---------------------------------------------------------------------------
# file writers

def embeddings_to_csv(records: Sequence[LatentRecord], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    dim = len(records[0].latent) if records else 0
    writer.writerow(["id", "domain", "true", "predicted"] + [f"z{i}" for i in range(dim)] + ["l0", "l1", "l2"])
    for r in records:
        writer.writerow([r.example_id, r.domain, r.true_label, r.predicted]
                        + [repr(float(v)) for v in r.latent] + [repr(float(v)) for v in r.logits])
    return buf.getvalue()


def isomap_to_csv(emb: IsomapEmbedding, domains: Sequence[str], predicted: Sequence[int], header: str = "") -> str:
    """One row per embedded point; ``domains`` and ``predicted`` follow the rows of ``emb.coords``."""
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "domain", "predicted"] + [f"c{i}" for i in range(emb.d)])
    for i, row in enumerate(emb.coords):
        writer.writerow([int(emb.ids[i]), domains[i], int(predicted[i])] + [repr(float(v)) for v in row])
    return buf.getvalue()
