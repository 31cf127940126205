"""Losses (weighted cross-entropy, multi-kernel MMD), the training loop and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .engine import AdamState, Graph, Tensor, adam_step, apply_op, backward, checkpoint, concat, split_rows
from .engine.ops import log_softmax_array, softmax_array
from .errors import ConfigError, NumericError, ShapeError, ValidationError
from .models import ModelState, embed, forward

log = logging.getLogger(__name__)

N_CLASSES = 3
DEFAULT_BANDWIDTHS = (0.25, 0.5, 1.0, 2.0, 4.0)
MODES = ("regular", "da")


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """w_m = N / (M * n_m)."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ConfigError(f"every class needs a positive count, got {counts.tolist()}")
    return counts.sum() / (len(counts) * counts)


@dataclass
class LossConfig:
    class_counts: tuple = (1, 1, 1)
    lam: float = 0.05
    bandwidths: tuple = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"MMD weight must be >= 0, got {self.lam}")
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ConfigError("bandwidth multipliers must be positive")

    @property
    def weights(self) -> np.ndarray:
        return class_weights(self.class_counts)


# ---------------------------------------------------------------------------
# losses

def weighted_ce(logits: Tensor, labels, cfg: LossConfig) -> Tensor:
    """Class-weighted cross-entropy normalised by the batch's summed weights."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {z.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValidationError("labels must lie in {0, 1, 2}")
    w = cfg.weights[labels]
    wsum = w.sum()
    logp = log_softmax_array(z)
    nll = -logp[np.arange(len(labels)), labels]
    loss = np.asarray((w * nll).sum() / wsum, dtype=z.dtype)

    def backward_fn(g):
        grad = softmax_array(z)
        grad[np.arange(len(labels)), labels] -= 1.0
        return ((g * w / wsum)[:, None] * grad).astype(z.dtype),

    return apply_op("weighted_ce", (logits,), loss, backward_fn)


def rbf_kernel(a, b, sigma: float) -> float:
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = (a * a).sum(axis=1)
    nb = (b * b).sum(axis=1)
    # the explicit copy keeps a @ a.T on the general BLAS path, so self and
    # cross blocks of identical inputs round identically
    return np.maximum(na[:, None] + nb[None, :] - 2.0 * (a @ np.array(b.T, order="C")), 0.0)


def _sqdist_grad(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # D_ij = |a_i - b_j|^2
    ga = 2.0 * (g.sum(axis=1)[:, None] * a - g @ b)
    gb = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
    return ga, gb


def median_bandwidth(z: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Median of pairwise squared distances (i < j) and the pair(s) defining it."""
    d = _sqdist(z, z)
    iu, ju = np.triu_indices(len(z), 1)
    vals = d[iu, ju]
    order = np.argsort(vals, kind="stable")
    m = len(vals)
    mids = [order[m // 2]] if m % 2 else [order[m // 2 - 1], order[m // 2]]
    return float(vals[mids].mean()), [(int(iu[k]), int(ju[k])) for k in mids]


def mmd_loss(theta10: Tensor, theta1: Tensor, bandwidths: Sequence[float] = DEFAULT_BANDWIDTHS) -> Tensor:
    """Unbiased multi-kernel MMD^2 between two equal-size batches of latents.

    The kernel is the mean of Gaussians with sigma^2 = base * multiplier,
    where ``base`` is the median pairwise squared distance of the joined
    batch.  Gradients include the dependence of ``base`` on the inputs.
    """
    x, y = theta10.data, theta1.data
    if x.shape != y.shape:
        raise ValidationError(f"MMD needs equal batch sizes, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValidationError("MMD needs at least 2 samples per batch")
    xd, yd = x.astype(np.float64), y.astype(np.float64)
    z = np.concatenate([xd, yd])
    base, mid_pairs = median_bandwidth(z)
    base_grad = True
    if base <= 0:
        base, base_grad = 1.0, False
    sig2 = base * np.asarray(bandwidths, dtype=np.float64)
    mask = 1.0 - np.eye(n)
    c = 1.0 / (n * (n - 1))

    blocks = {
        "xx": (xd, xd, 1.0),
        "yy": (yd, yd, 1.0),
        "xy": (xd, yd, -1.0),
        "yx": (yd, xd, -1.0),
    }
    dists = {k: _sqdist(a, b) for k, (a, b, _) in blocks.items()}
    exps = {k: np.exp(-d[..., None] / (2.0 * sig2)) for k, d in dists.items()}
    kern = {k: e.mean(axis=-1) for k, e in exps.items()}
    total = ((kern["xx"] - kern["xy"]) + (kern["yy"] - kern["yx"])) * mask
    loss = np.asarray(c * total.sum(), dtype=x.dtype)

    def backward_fn(g):
        gx = np.zeros_like(xd)
        gy = np.zeros_like(yd)
        dbase = 0.0
        for k, (a, b, sign) in blocks.items():
            e = exps[k]
            dk_dd = -(e / (2.0 * sig2)).mean(axis=-1)
            gd = (g * sign * c) * mask * dk_dd
            ga, gb = _sqdist_grad(gd, a, b)
            gx += ga if k[0] == "x" else 0
            gy += ga if k[0] == "y" else 0
            gx += gb if k[1] == "x" else 0
            gy += gb if k[1] == "y" else 0
            if base_grad:
                dk_dbase = (e * dists[k][..., None] / (2.0 * sig2 * base)).mean(axis=-1)
                dbase += float(np.sum((g * sign * c) * (mask * dk_dbase).sum()))
        if base_grad and dbase:
            gz = np.zeros_like(z)
            share = dbase / len(mid_pairs)
            for p, q in mid_pairs:
                diff = 2.0 * (z[p] - z[q]) * share
                gz[p] += diff
                gz[q] -= diff
            gx += gz[:n]
            gy += gz[n:]
        return gx.astype(x.dtype), gy.astype(y.dtype)

    return apply_op("mmd", (theta10, theta1), loss, backward_fn, bandwidths=tuple(bandwidths))


def total_loss(ce: Tensor, mmd: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    out = np.asarray(ce.data + lam * mmd.data, dtype=ce.data.dtype)
    return apply_op("total_loss", (ce, mmd), out, lambda g: (g, g * lam), lam=lam)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainingConfig:
    mode: str = "regular"
    epochs: int = 100
    batch_size: int = 128
    eval_batch_size: int = 64
    lr: float = 1e-5
    betas: tuple = (0.7, 0.8)
    weight_decay: Optional[float] = None  # None -> 0.001 regular, 0.0001 da
    patience: int = 10
    seed: int = 0
    lam: float = 0.05
    bandwidths: tuple = DEFAULT_BANDWIDTHS

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2 or self.eval_batch_size < 2:
            raise ConfigError("batch sizes must be >= 2")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")

    @property
    def decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.001 if self.mode == "regular" else 0.0001


@dataclass
class TrainingData:
    """Training inputs.  Y1 images travel without labels by construction."""

    x10_train: np.ndarray
    y_train: np.ndarray
    x10_val: np.ndarray
    y_val: np.ndarray
    x1_train: Optional[np.ndarray] = None
    x1_val: Optional[np.ndarray] = None


HISTORY_FIELDS = ("epoch", "ce", "mmd", "total", "train_acc_y10", "val_ce", "val_mmd", "val_total", "val_acc_y10")


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per optimizer step: (ce, mmd, total)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for r in self.records:
            writer.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()


def _batches(n: int, size: int, rng: np.random.Generator, drop_last: bool) -> list[np.ndarray]:
    order = rng.permutation(n)
    stop = n - n % size if drop_last else n
    return [order[i:i + size] for i in range(0, stop, size)]


def _evaluate_loss(model: ModelState, x10, y, x1, loss_cfg: LossConfig, mode: str, bs: int) -> tuple[float, float, float]:
    """(CE, MMD, accuracy) over a split in eval mode."""
    model.eval()
    lat10, logits = embed(model, x10, bs)
    w = loss_cfg.weights[y]
    logp = log_softmax_array(logits.astype(np.float64))
    ce = float((w * -logp[np.arange(len(y)), y]).sum() / w.sum())
    acc = float((logits.argmax(axis=1) == y).mean())
    mmd = 0.0
    if mode == "da":
        lat1, _ = embed(model, x1, bs)
        vals = [
            mmd_loss(Tensor(lat10[i:i + bs]), Tensor(lat1[i:i + bs]), loss_cfg.bandwidths).item()
            for i in range(0, len(lat10) - len(lat10) % bs, bs)
        ]
        if not vals and len(lat10) >= 2:
            vals = [mmd_loss(Tensor(lat10), Tensor(lat1), loss_cfg.bandwidths).item()]
        mmd = float(np.mean(vals)) if vals else 0.0
    return ce, mmd, acc


def train(model: ModelState, data: TrainingData, cfg: TrainingConfig,
          class_counts: Optional[Sequence[int]] = None) -> tuple[ModelState, TrainingHistory]:
    """Train in place and return (best-epoch model, history).

    Regular mode minimises weighted CE on Y10.  DA mode adds ``lam`` times the
    MMD between Y10 and Y1 latents of each paired batch; the two halves go
    through the network as one batch.
    """
    cfg.validate()
    da = cfg.mode == "da"
    if da and (data.x1_train is None or len(data.x1_train) != len(data.x10_train)):
        raise ValidationError("da mode needs a Y1 image for every Y10 training image")
    if class_counts is None:
        class_counts = np.bincount(data.y_train, minlength=N_CLASSES)
    loss_cfg = LossConfig(tuple(int(c) for c in class_counts), cfg.lam, tuple(cfg.bandwidths))
    params = model.parameters()
    opt = AdamState(lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1], weight_decay=cfg.decay)
    history = TrainingHistory()
    best_state = model.state_arrays()
    best_state = {k: v.copy() for k, v in best_state.items()}
    best_val = np.inf
    stale = 0
    n = len(data.x10_train)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 17]))
        sums = np.zeros(2)
        correct = 0
        seen = 0
        batches = _batches(n, cfg.batch_size, rng, drop_last=da)
        for idx in batches:
            model.train()
            xb = Tensor(np.asarray(data.x10_train[idx], dtype=model.dtype))
            yb = data.y_train[idx]
            with Graph() as g:
                if da:
                    x1b = Tensor(np.asarray(data.x1_train[idx], dtype=model.dtype))
                    lat, logits = forward(model, concat([xb, x1b]))
                    k = len(idx)
                    ce = weighted_ce(split_rows(logits, 0, k), yb, loss_cfg)
                    mmd = mmd_loss(split_rows(lat, 0, k), split_rows(lat, k, 2 * k), loss_cfg.bandwidths)
                    loss = total_loss(ce, mmd, cfg.lam)
                    pred = logits.data[:k].argmax(axis=1)
                else:
                    lat, logits = forward(model, xb)
                    ce = weighted_ce(logits, yb, loss_cfg)
                    mmd = None
                    loss = ce
                    pred = logits.data.argmax(axis=1)
            step_vals = (ce.item(), mmd.item() if mmd is not None else 0.0, loss.item())
            if not np.all(np.isfinite(step_vals)):
                model.load_arrays(best_state)
                raise NumericError(f"non-finite loss {step_vals} at epoch {epoch}; model reset to last good checkpoint")
            grads = backward(g, loss)
            try:
                adam_step(params, grads, opt)
            except NumericError as exc:
                model.load_arrays(best_state)
                raise NumericError(f"{exc} at epoch {epoch}; model reset to last good checkpoint") from exc
            history.steps.append(step_vals)
            sums += np.array(step_vals[:2]) * len(idx)
            correct += int((pred == yb).sum())
            seen += len(idx)
        ce_mean, mmd_mean = sums / max(seen, 1)
        val_ce, val_mmd, val_acc = _evaluate_loss(model, data.x10_val, data.y_val, data.x1_val, loss_cfg,
                                                  cfg.mode, cfg.eval_batch_size)
        record = {
            "epoch": epoch,
            "ce": ce_mean,
            "mmd": mmd_mean,
            "total": ce_mean + cfg.lam * mmd_mean if da else ce_mean,
            "train_acc_y10": correct / max(seen, 1),
            "val_ce": val_ce,
            "val_mmd": val_mmd,
            "val_total": val_ce + cfg.lam * val_mmd if da else val_ce,
            "val_acc_y10": val_acc,
        }
        history.records.append(record)
        log.info("epoch %d: ce %.4f mmd %.4f val_total %.4f val_acc %.3f", epoch, ce_mean, mmd_mean,
                 record["val_total"], val_acc)
        if not np.isfinite(record["val_total"]):
            model.load_arrays(best_state)
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if record["val_total"] < best_val:
            best_val = record["val_total"]
            history.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                history.stop_reason = "early_stopping"
                break
    else:
        history.stop_reason = "max_epochs"
    final = model.copy()
    model.load_arrays(best_state)
    model.eval()
    model.final_state = final  # kept for final.ckpt
    return model, history


# ---------------------------------------------------------------------------
# evaluation

def classification_metrics(y_true, y_pred, n_classes: int = N_CLASSES) -> dict:
    """Accuracy plus support-weighted precision, recall and F1."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValidationError("cannot evaluate an empty split")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    tp = np.diag(cm).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    weights = support / support.sum()
    return {
        "accuracy": float(tp.sum() / support.sum()),
        "precision": float((weights * precision).sum()),
        "recall": float((weights * recall).sum()),
        "f1": float((weights * f1).sum()),
        "confusion_matrix": cm.tolist(),
        "n": int(y_true.size),
    }


def evaluate(model: ModelState, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> dict:
    if len(images) == 0:
        raise ValidationError("cannot evaluate an empty split")
    model.eval()
    _, logits = embed(model, images, batch_size)
    return classification_metrics(labels, logits.argmax(axis=1))


# ---------------------------------------------------------------------------
# run directory

def provenance(digest: str) -> str:
    return f"# robustmorph {__version__} config={digest}"


def save_run(run_dir, model: ModelState, history: TrainingHistory, cfg: TrainingConfig, digest: str,
             extra_config: Optional[dict] = None) -> None:
    from .models import save_model

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    conf = {"provenance": {"tool_version": __version__, "config_digest": digest}, "training": asdict(cfg)}
    if extra_config:
        conf.update(extra_config)
    (run_dir / "config.json").write_text(json.dumps(conf, indent=2, sort_keys=True))
    (run_dir / "history.csv").write_text(history.to_csv(provenance(digest)))
    checkpoint.save(run_dir / "best.ckpt", model.state_arrays())
    final = getattr(model, "final_state", model)
    checkpoint.save(run_dir / "final.ckpt", final.state_arrays())
    save_model(model, run_dir, stem="best", mode=cfg.mode, epoch=history.best_epoch,
               stop_reason=history.stop_reason, config_digest=digest)
