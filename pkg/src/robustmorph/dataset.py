"""Paired Y10/Y1 dataset generation and the on-disk container.

A dataset directory holds ``manifest.json`` and ``images.bin``.  The binary
file is ``b"GXDS"``, a u32 version, then per image a u64 id followed by a
little-endian float32 ``3 x H x W`` block.  Y10 and Y1 renderings of the
same source share an id and differ only in their domain tag.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, GenerationError, ValidationError
from .morphology import LABELS, SEGMAP_THRESHOLD, DegenerateError, measure
from .synth import (
    AUGMENT_FACTOR,
    FamilyPriors,
    PreprocessConfig,
    SurveyConfig,
    augment,
    blur,
    emulate_survey,
    preprocess,
    render_galaxy,
    sample_params,
)

log = logging.getLogger(__name__)

MAGIC = b"GXDS"
VERSION = 1
DOMAINS = ("Y10", "Y1")
SPLITS = ("train", "val", "test")
PROPOSAL_FAMILY = {"spiral": "disk", "elliptical": "spheroid", "merger": "merger"}


@dataclass
class SynthConfig:
    size: int = 64
    counts: dict = field(default_factory=lambda: {"spiral": 1000, "elliptical": 1000, "merger": 200})
    augment: list = field(default_factory=lambda: ["merger"])
    proportions: tuple = (0.7, 0.1, 0.2)
    seed: int = 0
    max_attempts: int = 40  # rejection-sampling proposals per requested example
    label_threshold: float = SEGMAP_THRESHOLD
    y10: SurveyConfig = field(default_factory=lambda: SurveyConfig(years=10))
    y1: SurveyConfig = field(default_factory=lambda: SurveyConfig(years=1))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    priors: FamilyPriors = field(default_factory=FamilyPriors)

    def validate(self) -> None:
        if set(self.counts) != set(LABELS):
            raise ConfigError(f"counts must name exactly {LABELS}, got {sorted(self.counts)}")
        for label, n in self.counts.items():
            if not isinstance(n, int) or n < 30:
                raise ConfigError(f"counts.{label}: need an integer >= 30, got {n!r}")
        for label in self.augment:
            if label not in LABELS:
                raise ConfigError(f"augment: unknown label {label!r}")
        p = self.proportions
        if len(p) != 3 or min(p) < 0 or abs(sum(p) - 1) > 1e-9:
            raise ConfigError(f"proportions must be three non-negative fractions summing to 1, got {p}")
        if self.size < 16:
            raise ConfigError(f"size must be >= 16, got {self.size}")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serialisable: {type(o)}")


def example_rng(seed: int, example_id: int, stream: int = 0) -> np.random.Generator:
    """Per-example generator derived from (global seed, example id)."""
    return np.random.default_rng(np.random.SeedSequence([seed, example_id, stream]))


def split_assignment(n: int, proportions, seed: int) -> np.ndarray:
    """Random 70:10:20-style split; returns an array of split indices."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 7919])).permutation(n)
    n_train = int(round(proportions[0] * n))
    n_val = int(round(proportions[1] * n))
    out = np.empty(n, dtype=np.int8)
    out[order[:n_train]] = 0
    out[order[n_train:n_train + n_val]] = 1
    out[order[n_train + n_val:]] = 2
    return out


def _sample_class(label: str, count: int, cfg: SynthConfig) -> list[tuple[np.ndarray, dict]]:
    """Rejection-sample ``count`` raw images whose G-M20 label equals ``label``."""
    family = PROPOSAL_FAMILY[label]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, LABELS.index(label), 101]))
    accepted = []
    budget = cfg.max_attempts * count
    attempts = 0
    while len(accepted) < count:
        if attempts >= budget:
            raise GenerationError(
                f"could not reach class {label!r}: {len(accepted)}/{count} accepted after {attempts} proposals"
            )
        attempts += 1
        params = sample_params(family, rng, cfg.priors, cfg.size)
        raw = render_galaxy(params, cfg.size)
        clean = preprocess(blur(raw, cfg.y10.psf_fwhm), cfg.preprocess)
        try:
            mm = measure(clean, cfg.label_threshold)
        except (DegenerateError, ValidationError):
            continue
        if LABELS[mm.label] != label:
            continue
        meta = {
            "family": family,
            "gini": round(mm.gini, 6),
            "m20": round(mm.m20, 6),
            "params_digest": config_digest(params),
        }
        accepted.append((raw, meta))
    log.info("class %s: accepted %d of %d proposals", label, count, attempts)
    return accepted


def build_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Generate, label, balance, emulate and split; write the container to ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = w = cfg.size

    sources: list[tuple[np.ndarray, int, dict]] = []
    for label in LABELS:
        for raw, meta in _sample_class(label, cfg.counts[label], cfg):
            if label in cfg.augment:
                for k, img in enumerate(augment(raw)):
                    sources.append((img, LABELS.index(label), {**meta, "augment": k}))
            else:
                sources.append((raw, LABELS.index(label), {**meta, "augment": 0}))

    splits = split_assignment(len(sources), cfg.proportions, cfg.seed)
    surveys = {"Y10": cfg.y10, "Y1": cfg.y1}
    records = []
    with open(out_dir / "images.bin", "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        offset = 8
        for ex_id, (raw, label, meta) in enumerate(sources):
            for domain in DOMAINS:
                # both domains draw from the same per-example noise stream
                obs = emulate_survey(raw, surveys[domain], rng=example_rng(cfg.seed, ex_id, 1))
                img = preprocess(obs, cfg.preprocess).astype("<f4")
                fh.write(struct.pack("<Q", ex_id))
                fh.write(img.tobytes())
                records.append({
                    "id": ex_id,
                    "offset": offset,
                    "label": LABELS[label],
                    "domain": domain,
                    "split": SPLITS[splits[ex_id]],
                    **meta,
                })
                offset += 8 + 4 * 3 * h * w

    counts = {s: {l: 0 for l in LABELS} for s in SPLITS}
    for r in records:
        if r["domain"] == "Y10":
            counts[r["split"]][r["label"]] += 1
    manifest = {
        "format": "GXDS",
        "version": VERSION,
        "tool_version": __version__,
        "config": json.loads(json.dumps(cfg, default=_jsonable)),
        "config_digest": config_digest(cfg),
        "image_dims": [3, h, w],
        "counts": counts,
        "records": records,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, path):
        self.path = Path(path)
        self.manifest = json.loads((self.path / "manifest.json").read_text(encoding="utf-8"))
        if self.manifest.get("format") != "GXDS":
            raise ValidationError(f"{self.path} is not a GXDS dataset")
        c, h, w = self.manifest["image_dims"]
        self.image_dims = (c, h, w)
        with open(self.path / "images.bin", "rb") as fh:
            head = fh.read(8)
        if head[:4] != MAGIC:
            raise ValidationError("images.bin: bad magic")
        dtype = np.dtype([("id", "<u8"), ("img", "<f4", (c, h, w))])
        self._raw = np.memmap(self.path / "images.bin", dtype=dtype, mode="r", offset=8)
        self.records = self.manifest["records"]
        self._index = {(r["id"], r["domain"]): (r["offset"] - 8) // dtype.itemsize for r in self.records}

    @property
    def digest(self) -> str:
        return self.manifest["config_digest"]

    def ids(self, split: Optional[str] = None) -> np.ndarray:
        return np.array(sorted({r["id"] for r in self.records if split is None or r["split"] == split}), dtype=np.int64)

    def labels(self, ids) -> np.ndarray:
        lab = {r["id"]: LABELS.index(r["label"]) for r in self.records if r["domain"] == "Y10"}
        return np.array([lab[int(i)] for i in ids], dtype=np.int64)

    def images(self, ids, domain: str) -> np.ndarray:
        if domain not in DOMAINS:
            raise ValidationError(f"unknown domain {domain!r}")
        rows = [self._index[(int(i), domain)] for i in ids]
        block = self._raw[rows]
        if np.any(block["id"] != np.asarray(ids, dtype=np.uint64)):
            raise ValidationError("images.bin ids disagree with manifest")
        return np.array(block["img"])


def write_container(path, ids, images) -> None:
    """Append-free writer for ad-hoc image stacks (e.g. perturbed images)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for i, img in zip(ids, images):
            fh.write(struct.pack("<Q", int(i)))
            fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_container(path, image_dims) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValidationError(f"{path}: bad magic")
    dtype = np.dtype([("id", "<u8"), ("img", "<f4", tuple(image_dims))])
    arr = np.frombuffer(blob, dtype=dtype, offset=8)
    return arr["id"].astype(np.int64), np.array(arr["img"])
