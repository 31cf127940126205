"""Targeted one-pixel attack driven by differential evolution.

The attack is black-box: it only calls a scorer mapping a batch of images to
class probabilities.  A candidate is ``(x, y, r, g, b)``; the three band
values of pixel ``(row y, column x)`` are replaced by ``(r, g, b)``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, PreconditionError, ValidationError

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PixelCandidate:
    x: int
    y: int
    values: tuple[float, float, float]

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ValidationError(f"pixel ({self.x}, {self.y}) outside a {height}x{width} image")
        if len(self.values) != 3 or min(self.values) < 0 or max(self.values) > 1:
            raise ValidationError(f"replacement values must be 3 floats in [0, 1], got {self.values}")

    @classmethod
    def from_genome(cls, z: np.ndarray) -> "PixelCandidate":
        # coordinates are rounded only here; the genome itself stays continuous
        return cls(int(np.rint(z[0])), int(np.rint(z[1])), tuple(float(v) for v in z[2:5]))


@dataclass
class AttackSpec:
    target: int
    population: int = 100
    max_iter: int = 80
    mutation: float = 0.5
    seed: int = 0
    stop_on_success: bool = True

    def validate(self) -> None:
        if self.population < 4:
            raise ConfigError(f"population must be >= 4 (mutation needs 3 distinct partners), got {self.population}")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        if not 0 < self.mutation <= 2:
            raise ConfigError(f"mutation factor must lie in (0, 2], got {self.mutation}")


@dataclass
class AttackResult:
    example_id: int
    true_label: int
    target: int
    success: bool
    best: PixelCandidate
    iterations: int
    baseline_scores: np.ndarray
    perturbed_scores: np.ndarray
    perturbed_image: Optional[np.ndarray] = field(default=None, repr=False)
    latent_before: Optional[np.ndarray] = field(default=None, repr=False)
    latent_after: Optional[np.ndarray] = field(default=None, repr=False)


def apply_pixel(image: np.ndarray, candidate: PixelCandidate) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValidationError(f"expected a (3, H, W) image, got {image.shape}")
    candidate.validate(image.shape[1], image.shape[2])
    out = image.copy()
    out[:, candidate.y, candidate.x] = candidate.values
    return out


def _apply_genomes(image: np.ndarray, genomes: np.ndarray) -> np.ndarray:
    """Batch of images, one per genome row."""
    xs = np.rint(genomes[:, 0]).astype(np.int64)
    ys = np.rint(genomes[:, 1]).astype(np.int64)
    out = np.repeat(image[None], len(genomes), axis=0)
    out[np.arange(len(genomes)), :, ys, xs] = genomes[:, 2:5].astype(image.dtype)
    return out


def fitness(scorer: Scorer, image: np.ndarray, candidate: PixelCandidate, target: int) -> float:
    """Target-class probability of the pixel-modified image."""
    return float(scorer(apply_pixel(image, candidate)[None])[0, target])


@dataclass
class DEHistory:
    best_fitness: list = field(default_factory=list)  # best-ever after each generation
    best_genomes: list = field(default_factory=list)


def differential_evolution(objective: Callable[[np.ndarray], np.ndarray], bounds: np.ndarray, population: int = 100,
                           max_iter: int = 80, mutation: float = 0.5, seed: int = 0,
                           stop: Optional[Callable[[np.ndarray, float], bool]] = None
                           ) -> tuple[np.ndarray, float, int, DEHistory]:
    """Maximise a batched objective over a box with DE/rand/1, no crossover.

    ``objective`` maps an (n, d) array of genomes to n fitness values.  Each
    parent i gets one child a + F (b - c) from three distinct members other
    than i; the child replaces the parent only if strictly fitter.  Returns
    (best genome, best fitness, generations run, history).
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or not np.all(np.isfinite(bounds)) or np.any(bounds[:, 1] < bounds[:, 0]):
        raise ConfigError("bounds must be a finite (d, 2) array of [low, high] rows")
    if population < 4:
        raise ConfigError(f"population must be >= 4, got {population}")
    rng = np.random.default_rng(seed)
    lo, hi = bounds[:, 0], bounds[:, 1]
    pop = lo + rng.random((population, len(bounds))) * (hi - lo)
    fit = np.asarray(objective(pop), dtype=np.float64)
    history = DEHistory()
    k = int(np.argmax(fit))
    best, best_fit = pop[k].copy(), float(fit[k])
    generations = 0
    for gen in range(max_iter):
        if stop is not None and stop(best, best_fit):
            break
        idx = np.empty((population, 3), dtype=np.int64)
        for i in range(population):
            others = np.delete(np.arange(population), i)
            idx[i] = rng.choice(others, size=3, replace=False)
        a, b, c = pop[idx[:, 0]], pop[idx[:, 1]], pop[idx[:, 2]]
        children = np.clip(a + mutation * (b - c), lo, hi)
        child_fit = np.asarray(objective(children), dtype=np.float64)
        better = child_fit > fit
        pop[better] = children[better]
        fit[better] = child_fit[better]
        k = int(np.argmax(fit))
        if fit[k] > best_fit:
            best, best_fit = pop[k].copy(), float(fit[k])
        generations = gen + 1
        history.best_fitness.append(best_fit)
        history.best_genomes.append(best.copy())
    return best, best_fit, generations, history


def pixel_bounds(height: int, width: int) -> np.ndarray:
    return np.array([[0, width - 1], [0, height - 1], [0, 1], [0, 1], [0, 1]], dtype=np.float64)


def one_pixel_attack(scorer: Scorer, image: np.ndarray, true_label: int, spec: AttackSpec,
                     example_id: int = 0) -> AttackResult:
    """Search for one pixel that makes ``scorer`` predict ``spec.target``.

    Success means the argmax of the perturbed scores equals the target.  The
    iteration count is the number of generations run.
    """
    spec.validate()
    image = np.asarray(image)
    if spec.target == true_label:
        raise ConfigError("target must differ from the true label")
    base_scores = np.asarray(scorer(image[None])[0], dtype=np.float64)
    if int(np.argmax(base_scores)) != true_label:
        raise PreconditionError(f"example {example_id}: baseline is misclassified, attack skipped")
    _, h, w = image.shape

    def objective(genomes):
        return np.asarray(scorer(_apply_genomes(image, genomes)), dtype=np.float64)[:, spec.target]

    def stop(best, best_fit):
        if not spec.stop_on_success:
            return False
        return int(np.argmax(scorer(_apply_genomes(image, best[None]))[0])) == spec.target

    best, _, iters, _ = differential_evolution(objective, pixel_bounds(h, w), spec.population, spec.max_iter,
                                               spec.mutation, spec.seed, stop)
    cand = PixelCandidate.from_genome(best)
    perturbed = apply_pixel(image, cand)
    scores = np.asarray(scorer(perturbed[None])[0], dtype=np.float64)
    success = int(np.argmax(scores)) == spec.target
    return AttackResult(example_id, true_label, spec.target, success, cand, iters, base_scores, scores, perturbed)


def attack_example(scorer: Scorer, image: np.ndarray, true_label: int, example_id: int, population: int = 100,
                   max_iter: int = 80, seed: int = 0, n_classes: int = 3) -> list[AttackResult]:
    """Attack both wrong labels in order and stop at the first success."""
    results = []
    for target in range(n_classes):
        if target == true_label:
            continue
        spec = AttackSpec(target, population, max_iter, seed=seed * 1009 + example_id * 7 + target)
        res = one_pixel_attack(scorer, image, true_label, spec, example_id)
        results.append(res)
        if res.success:
            break
    return results


ATTACK_FIELDS = ("id", "true", "target", "success", "x", "y", "r", "g", "b", "iterations",
                 "p0", "p1", "p2", "pp0", "pp1", "pp2")


def attacks_to_csv(results: list[AttackResult], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ATTACK_FIELDS)
    for r in results:
        c = r.best
        writer.writerow([r.example_id, r.true_label, r.target, int(r.success), c.x, c.y,
                         *[repr(float(v)) for v in c.values], r.iterations,
                         *[repr(float(v)) for v in r.baseline_scores],
                         *[repr(float(v)) for v in r.perturbed_scores]])
    return buf.getvalue()


def read_attacks_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        for k in ("id", "true", "target", "success", "x", "y", "iterations"):
            r[k] = int(r[k])
        for k in ("r", "g", "b", "p0", "p1", "p2", "pp0", "pp1", "pp2"):
            r[k] = float(r[k])
    return rows
