"""Command-line entry point: one subcommand per pipeline stage.

Configuration comes from an optional JSON file (``--config``), then
``--key value`` overrides (dotted keys reach nested sections, e.g.
``--train.lr 1e-3``), then the ``ROBUSTMORPH_SEED`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (
    LatentRecord,
    church_window,
    distance_stats,
    embeddings_to_csv,
    euclidean_distance,
    histograms,
    isomap,
    isomap_to_csv,
    js_distance,
    window_to_csv,
    window_to_svg,
)
from .attack import PixelCandidate, apply_pixel, attack_example, attacks_to_csv, read_attacks_csv
from .dataset import DOMAINS, SPLITS, Dataset, SynthConfig, build_dataset, config_digest, write_container
from .errors import (
    ConfigError,
    NumericError,
    PreconditionError,
    RobustMorphError,
    StateError,
    ValidationError,
)
from .models import ModelSpec, build_model, embed, load_model, predict_proba, truncated_head
from .morphology import LABELS, SEGMAP_THRESHOLD, measure
from .synth import FamilyPriors, SurveyConfig
from .training import TrainingConfig, TrainingData, evaluate, provenance, save_run, train

log = logging.getLogger("robustmorph")

SEED_ENV = "ROBUSTMORPH_SEED"
LOCATION_KEYS = ("dataset", "out", "run", "runs")


@dataclass
class SynthSection:
    size: int = 64
    counts: dict = field(default_factory=lambda: {"spiral": 1000, "elliptical": 1000, "merger": 200})
    augment: list = field(default_factory=lambda: ["merger"])
    proportions: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    max_attempts: int = 40
    label_threshold: float = SEGMAP_THRESHOLD
    psf_fwhm: float = 3.0
    sky: list = field(default_factory=lambda: [100.0, 100.0, 100.0])
    flux: list = field(default_factory=lambda: list(FamilyPriors().flux))

    def to_synth_config(self, seed: int) -> SynthConfig:
        if len(self.sky) != 3 or len(self.flux) != 2:
            raise ConfigError("synth.sky needs 3 values and synth.flux 2 values")
        sky = tuple(float(s) for s in self.sky)
        return SynthConfig(
            size=self.size,
            counts=dict(self.counts),
            augment=list(self.augment),
            proportions=tuple(self.proportions),
            seed=seed,
            max_attempts=self.max_attempts,
            label_threshold=self.label_threshold,
            y10=SurveyConfig(years=10, sky=sky, psf_fwhm=self.psf_fwhm),
            y1=SurveyConfig(years=1, sky=sky, psf_fwhm=self.psf_fwhm),
            priors=dataclasses.replace(FamilyPriors(), flux=tuple(float(f) for f in self.flux)),
        )


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 128
    eval_batch_size: int = 64
    lr: float = 1e-5
    betas: list = field(default_factory=lambda: [0.7, 0.8])
    weight_decay: Optional[float] = None
    patience: int = 10
    lam: float = 0.05
    bandwidths: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])


@dataclass
class AttackSection:
    n: int = 150
    budget: int = 80
    population: int = 100
    select: str = "random"  # or "margin": lowest true-class probability first
    save_images: bool = False


@dataclass
class AnalysisSection:
    bins: int = 20
    resolution: int = 101
    isomap_n: int = 250
    k: int = 5
    d: int = 2
    largest_component: bool = False


@dataclass
class RunConfig:
    dataset: str = "data"
    out: str = "runs/run"
    run: Optional[str] = None
    runs: list = field(default_factory=list)
    arch: str = "convnet"
    mode: str = "regular"
    seed: int = 0
    domain: str = "Y10"
    split: str = "test"
    example_id: Optional[int] = None
    synth: SynthSection = field(default_factory=SynthSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @property
    def digest(self) -> str:
        """Digest of the experiment settings; file locations are left out so moved runs still match."""
        return config_digest({k: v for k, v in self.to_dict().items() if k not in LOCATION_KEYS})

    @property
    def run_dir(self) -> Path:
        return Path(self.run if self.run else self.out)


def _from_dict(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``--key value`` pairs (dotted keys for nested sections)."""
    data = cfg.to_dict()
    i = 0
    while i < len(pairs):
        key = pairs[i]
        if not key.startswith("--") or i + 1 >= len(pairs):
            raise ConfigError(f"expected '--key value' pairs, got {pairs[i:]}")
        path = key[2:].replace("-", "_").split(".")
        node = data
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key: {key[2:]}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"unknown config key: {key[2:]}")
        node[path[-1]] = _parse_value(pairs[i + 1])
        i += 2
    return RunConfig.from_dict(data)


def load_config(path: Optional[str], overrides: list[str], environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    if path:
        try:
            cfg = RunConfig.from_json(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = apply_overrides(cfg, overrides)
    if environ.get(SEED_ENV):
        try:
            cfg.seed = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def _header(cfg: RunConfig) -> str:
    return provenance(cfg.digest)


def _write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    payload = {"provenance": {"tool_version": __version__, "config_digest": cfg.digest}, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: RunConfig) -> dict:
    manifest = build_dataset(cfg.synth.to_synth_config(cfg.seed), cfg.dataset)
    log.info("dataset written to %s: %s", cfg.dataset, json.dumps(manifest["counts"]))
    return manifest


def _training_config(cfg: RunConfig) -> TrainingConfig:
    t = cfg.train
    return TrainingConfig(mode=cfg.mode, epochs=t.epochs, batch_size=t.batch_size, eval_batch_size=t.eval_batch_size,
                          lr=t.lr, betas=tuple(t.betas), weight_decay=t.weight_decay, patience=t.patience,
                          seed=cfg.seed, lam=t.lam, bandwidths=tuple(t.bandwidths))


def cmd_train(cfg: RunConfig) -> Path:
    tc = _training_config(cfg)
    tc.validate()
    ds = Dataset(cfg.dataset)
    tr, va = ds.ids("train"), ds.ids("val")
    if len(tr) == 0 or len(va) == 0:
        raise PreconditionError("dataset needs non-empty train and val splits")
    da = cfg.mode == "da"
    data = TrainingData(
        x10_train=ds.images(tr, "Y10"), y_train=ds.labels(tr),
        x10_val=ds.images(va, "Y10"), y_val=ds.labels(va),
        x1_train=ds.images(tr, "Y1") if da else None,
        x1_val=ds.images(va, "Y1") if da else None,
    )
    spec = ModelSpec(arch=cfg.arch, input_size=ds.image_dims)
    model = build_model(spec, seed=cfg.seed)
    model, history = train(model, data, tc)
    run_dir = Path(cfg.out)
    save_run(run_dir, model, history, tc, cfg.digest,
             extra_config={"run_config": cfg.to_dict(), "dataset_digest": ds.digest})
    log.info("run written to %s (best epoch %d, %s)", run_dir, history.best_epoch, history.stop_reason)
    return run_dir


def _load_run(cfg: RunConfig):
    run_dir = cfg.run_dir
    if not (run_dir / "best.ckpt").exists():
        raise PreconditionError(f"{run_dir} has no trained model (best.ckpt missing)")
    return run_dir, load_model(run_dir, "best")


def cmd_eval(cfg: RunConfig) -> dict:
    if cfg.domain not in DOMAINS or cfg.split not in SPLITS:
        raise ConfigError(f"domain must be in {DOMAINS} and split in {SPLITS}")
    run_dir, model = _load_run(cfg)
    ds = Dataset(cfg.dataset)
    ids = ds.ids(cfg.split)
    metrics = evaluate(model, ds.images(ids, cfg.domain), ds.labels(ids))
    _write_json(run_dir / f"metrics_{cfg.split}_{cfg.domain}.json",
                {"split": cfg.split, "domain": cfg.domain, "labels": list(LABELS), "metrics": metrics}, cfg)
    log.info("%s/%s accuracy %.4f", cfg.split, cfg.domain, metrics["accuracy"])
    return metrics


ATTACK_SELECTIONS = ("random", "margin")


def select_attack_ids(model, ds: Dataset, n: int, seed: int, select: str = "random") -> tuple[np.ndarray, np.ndarray]:
    """Sub-sample of correctly classified Y10 test images.

    ``select="random"`` draws a seeded uniform sample.  ``select="margin"``
    takes the ``n`` images with the lowest true-class probability (ties by
    id), which concentrates a small attack budget on flippable examples.
    """
    if select not in ATTACK_SELECTIONS:
        raise ConfigError(f"attack.select must be one of {ATTACK_SELECTIONS}, got {select!r}")
    ids = ds.ids("test")
    labels = ds.labels(ids)
    proba = predict_proba(model, ds.images(ids, "Y10"))
    ok = proba.argmax(axis=1) == labels
    correct = ids[ok]
    if n > len(correct):
        log.warning("requested %d attacks but only %d test images are correctly classified", n, len(correct))
        n = len(correct)
    if select == "margin":
        p_true = proba[np.arange(len(ids)), labels][ok]
        chosen = np.sort(correct[np.lexsort((correct, p_true))[:n]])
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
        chosen = np.sort(rng.choice(correct, size=n, replace=False)) if n else correct[:0]
    return chosen, ds.labels(chosen)


def cmd_attack(cfg: RunConfig) -> list:
    run_dir, model = _load_run(cfg)
    ds = Dataset(cfg.dataset)
    ids, labels = select_attack_ids(model, ds, cfg.attack.n, cfg.seed, cfg.attack.select)
    images = ds.images(ids, "Y10")

    def scorer(batch):
        return predict_proba(model, batch, batch_size=128)

    results = []
    for ex_id, img, lab in zip(ids, images, labels):
        res = attack_example(scorer, img, int(lab), int(ex_id), cfg.attack.population, cfg.attack.budget, cfg.seed)
        results.extend(res)
        log.info("example %d: %s", ex_id, "flipped" if res[-1].success else "not flipped")
    (run_dir / "attacks.csv").write_text(attacks_to_csv(results, _header(cfg)), encoding="utf-8")
    if cfg.attack.save_images:
        ok = [r for r in results if r.success]
        write_container(run_dir / "perturbed.bin", [r.example_id for r in ok], [r.perturbed_image for r in ok])
    return results


def _successful_attacks(run_dir: Path) -> dict:
    path = run_dir / "attacks.csv"
    if not path.exists():
        raise PreconditionError(f"{run_dir} has no attacks.csv; run the attack stage first")
    return {r["id"]: r for r in read_attacks_csv(path) if r["success"]}


def _perturbed(image: np.ndarray, row: dict) -> np.ndarray:
    return apply_pixel(image, PixelCandidate(row["x"], row["y"], (row["r"], row["g"], row["b"])))


def _triplet_records(model, ds: Dataset, ids, rows: dict) -> dict[str, list[LatentRecord]]:
    """Y10, Y1 and 1P latent records for the given example ids."""
    labels = ds.labels(ids)
    base = ds.images(ids, "Y10")
    batches = {
        "Y10": base,
        "Y1": ds.images(ids, "Y1"),
        "1P": np.stack([_perturbed(img, rows[int(i)]) for img, i in zip(base, ids)]) if len(ids) else base,
    }
    out = {}
    for dom, imgs in batches.items():
        lat, logits = embed(model, imgs)
        out[dom] = [LatentRecord(int(i), dom, lat[k], logits[k], int(labels[k])) for k, i in enumerate(ids)]
    return out


def _run_name(run_dir: Path) -> str:
    conf = run_dir / "config.json"
    if conf.exists():
        mode = json.loads(conf.read_text(encoding="utf-8")).get("training", {}).get("mode")
        if mode:
            return mode
    return run_dir.name


def cmd_analyze(cfg: RunConfig) -> dict:
    """Latent distance statistics and JS distances over one or more runs."""
    run_dirs = [Path(r) for r in cfg.runs] or [cfg.run_dir]
    names = [_run_name(r) for r in run_dirs]
    if len(set(names)) != len(names):
        names = [r.name for r in run_dirs]
    flips = [_successful_attacks(r) for r in run_dirs]
    common = sorted(set.intersection(*[set(f) for f in flips]))
    if len(common) < 2:
        raise PreconditionError(f"need at least 2 examples flipped in every run, found {len(common)}")
    ds = Dataset(cfg.dataset)
    ids = np.array(common, dtype=np.int64)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    distances: dict[str, dict[str, list[float]]] = {}
    stats: dict = {"ids": common, "runs": {}}
    for name, run_dir, rows in zip(names, run_dirs, flips):
        model = load_model(run_dir, "best")
        recs = _triplet_records(model, ds, ids, rows)
        d_y1 = [euclidean_distance(a.latent, b.latent) for a, b in zip(recs["Y10"], recs["Y1"])]
        d_1p = [euclidean_distance(a.latent, b.latent) for a, b in zip(recs["Y10"], recs["1P"])]
        distances[name] = {"Y10-Y1": d_y1, "Y10-1P": d_1p}
        stats["runs"][name] = {"Y10-Y1": distance_stats(d_y1), "Y10-1P": distance_stats(d_1p)}
        all_recs = recs["Y10"] + recs["Y1"] + recs["1P"]
        (out_dir / f"embeddings_{name}.csv").write_text(embeddings_to_csv(all_recs, _header(cfg)), encoding="utf-8")
    js = {}
    pairs = [((n, "Y10-Y1"), (n, "Y10-1P")) for n in names]
    if len(names) == 2:
        pairs += [((names[0], p), (names[1], p)) for p in ("Y10-Y1", "Y10-1P")]
    for (na, pa), (nb, pb) in pairs:
        key = f"{na}:{pa}|{nb}:{pb}"
        h = histograms(distances[na][pa], distances[nb][pb], cfg.analysis.bins)
        js[key] = js_distance(h)
        fname = f"hist_{na}_{pa}__{nb}_{pb}.csv".replace("-", "")
        lines = [_header(cfg), "lo,hi,p,q"] + [
            f"{h.edges[i]!r},{h.edges[i + 1]!r},{h.p[i]!r},{h.q[i]!r}" for i in range(len(h.p))
        ]
        (out_dir / fname).write_text("\n".join(lines) + "\n", encoding="utf-8")
    stats["js_distance"] = js
    _write_json(out_dir / "stats.json", stats, cfg)
    return stats


def cmd_window(cfg: RunConfig):
    if cfg.example_id is None:
        raise ConfigError("window needs --example_id")
    run_dir, model = _load_run(cfg)
    rows = _successful_attacks(run_dir)
    if cfg.example_id not in rows:
        raise PreconditionError(f"example {cfg.example_id}: no successful attack")
    ds = Dataset(cfg.dataset)
    recs = _triplet_records(model, ds, np.array([cfg.example_id]), rows)
    grid = church_window(recs["Y10"][0], recs["1P"][0], recs["Y1"][0],
                         lambda z: truncated_head(model, z).data, cfg.analysis.resolution)
    (run_dir / f"window_{cfg.example_id}.csv").write_text(window_to_csv(grid, _header(cfg)), encoding="utf-8")
    (run_dir / f"window_{cfg.example_id}.svg").write_text(window_to_svg(grid, header=_header(cfg)), encoding="utf-8")
    return grid, recs


def cmd_isomap(cfg: RunConfig):
    run_dir, model = _load_run(cfg)
    ds = Dataset(cfg.dataset)
    test = ds.ids("test")
    n = min(cfg.analysis.isomap_n, len(test))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2500]))
    ids = np.sort(rng.choice(test, size=n, replace=False))
    lat, dom, pred, pid = [], [], [], []
    for d in ("Y10", "Y1"):
        z, logits = embed(model, ds.images(ids, d))
        lat.append(z)
        dom += [d] * n
        pred += logits.argmax(axis=1).tolist()
        pid += ids.tolist()
    if cfg.example_id is not None:
        rows = _successful_attacks(run_dir)
        if cfg.example_id in rows:
            recs = _triplet_records(model, ds, np.array([cfg.example_id]), rows)
            for d in ("Y10", "Y1", "1P"):
                lat.append(recs[d][0].latent[None])
                dom.append(d)
                pred.append(recs[d][0].predicted)
                pid.append(cfg.example_id)
    points = np.concatenate(lat)
    emb = isomap(points, cfg.analysis.k, cfg.analysis.d, np.array(pid), cfg.analysis.largest_component)
    keep = emb.index.tolist()
    text = isomap_to_csv(emb, [dom[i] for i in keep], [pred[i] for i in keep], _header(cfg))
    (run_dir / f"isomap_{cfg.analysis.d}d.csv").write_text(text, encoding="utf-8")
    return emb


def cmd_measure(cfg: RunConfig) -> str:
    """Gini, M20 and G-M20 label of every image in one split/domain of a dataset."""
    if cfg.domain not in DOMAINS or cfg.split not in SPLITS:
        raise ConfigError(f"domain must be in {DOMAINS} and split in {SPLITS}")
    ds = Dataset(cfg.dataset)
    ids = ds.ids(cfg.split)
    lines = [_header(cfg), "id,G,M20,label"]
    for ex_id, img in zip(ids, ds.images(ids, cfg.domain)):
        try:
            mm = measure(img, cfg.synth.label_threshold)
        except ValidationError as exc:
            log.warning("example %d: %s", ex_id, exc)
            lines.append(f"{ex_id},nan,nan,")
            continue
        lines.append(f"{ex_id},{mm.gini!r},{mm.m20!r},{LABELS[mm.label]}")
    text = "\n".join(lines) + "\n"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"measure_{cfg.split}_{cfg.domain}.csv").write_text(text, encoding="utf-8")
    return text


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "analyze": cmd_analyze,
    "window": cmd_window,
    "isomap": cmd_isomap,
    "measure": cmd_measure,
}

EXIT_CODES = (
    (NumericError, 4),
    (PreconditionError, 3),
    (StateError, 3),
    (ConfigError, 2),
    (ValidationError, 2),
    (RobustMorphError, 1),
)


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustmorph", description="Galaxy-morphology robustness pipeline.")
    parser.add_argument("--version", action="version", version=f"robustmorph {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--log-level", default="INFO")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, rest)
        COMMANDS[args.command](cfg)
    except RobustMorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
