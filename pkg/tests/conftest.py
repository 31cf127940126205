"""Shared fixtures: seeded generators, a finite-difference checker and a tiny dataset."""

import numpy as np
import pytest

from robustmorph.dataset import SynthConfig, build_dataset
from robustmorph.engine import Graph, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function f over every entry of x (in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture
def gradcheck():
    """check(build, tensors) -> max relative error over all tensors.

    ``build`` maps the list of tensors to a scalar Tensor.  Every tensor is
    treated as a parameter so the engine returns its gradient.
    """

    def check(build, tensors, eps=1e-4):
        for i, t in enumerate(tensors):
            t.requires_grad = True
            t.name = t.name or f"t{i}"
        with Graph() as g:
            loss = build(tensors)
        grads = backward(g, loss)
        worst = 0.0
        for t in tensors:
            num = numeric_grad(lambda: build(tensors).item(), t.data, eps)
            worst = max(worst, rel_error(grads[t.name], num))
        return worst

    return check


@pytest.fixture
def weighted_sum(rng):
    """Project an output onto fixed random weights so every element matters."""

    def make(shape):
        w = rng.normal(size=shape)

        def proj(out: Tensor) -> Tensor:
            from robustmorph.engine import apply_op

            val = np.asarray((out.data * w).sum())
            return apply_op("proj", (out,), val, lambda g: (g * w,))

        return proj

    return make


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """90 sources (30 per class, no augmentation) at 32x32."""
    out = tmp_path_factory.mktemp("tiny_ds")
    cfg = SynthConfig(size=32, counts={"spiral": 30, "elliptical": 30, "merger": 30}, augment=[], seed=3)
    manifest = build_dataset(cfg, out)
    return out, manifest, cfg


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """record(n, ok, detail) stores one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
