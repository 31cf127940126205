"""Configuration handling, exit codes and a tiny end-to-end pipeline through the CLI."""

import csv
import json

import numpy as np
import pytest

from robustmorph import __version__
from robustmorph.cli import (
    RunConfig,
    apply_overrides,
    exit_code_for,
    load_config,
    main,
    select_attack_ids,
)
from robustmorph.dataset import Dataset
from robustmorph.errors import ConfigError, NumericError, PreconditionError, ValidationError
from robustmorph.models import load_model, predict_proba


def _csv_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# robustmorph")
    return list(csv.DictReader(lines[1:]))


TINY = {
    "synth": {"size": 32, "counts": {"spiral": 30, "elliptical": 30, "merger": 30}, "augment": []},
    "train": {"epochs": 8, "batch_size": 16, "lr": 1e-3, "patience": 8},
    "attack": {"n": 20, "budget": 20, "population": 30},
    "analysis": {"resolution": 5, "isomap_n": 12, "k": 5},
    "seed": 3,
}


class TestConfig:
    def test_round_trip(self):
        cfg = apply_overrides(RunConfig(), ["--train.lr", "0.001", "--mode", "da", "--synth.augment", "[]"])
        back = RunConfig.from_json(cfg.to_json())
        assert back == cfg and back.digest == cfg.digest

    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.attack.n, cfg.attack.budget, cfg.analysis.isomap_n) == (150, 80, 250)
        assert cfg.synth.proportions == [0.7, 0.1, 0.2]

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            RunConfig.from_dict({"train": {"learning_rate": 1.0}})
        with pytest.raises(ConfigError, match="bogus"):
            apply_overrides(RunConfig(), ["--bogus", "1"])
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), ["--seed"])

    def test_digest_ignores_locations(self):
        a = apply_overrides(RunConfig(), ["--out", "a", "--dataset", "x"])
        b = apply_overrides(RunConfig(), ["--out", "b", "--dataset", "y", "--run", "z"])
        assert a.digest == b.digest
        assert apply_overrides(RunConfig(), ["--seed", "1"]).digest != a.digest

    def test_dotted_override_types(self):
        cfg = apply_overrides(RunConfig(), ["--train.epochs", "7", "--out", "somewhere", "--example-id", "4"])
        assert cfg.train.epochs == 7 and cfg.out == "somewhere" and cfg.example_id == 4

    def test_seed_environment_wins(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 1}))
        assert load_config(str(path), ["--seed", "2"], environ={"ROBUSTMORPH_SEED": "9"}).seed == 9
        assert load_config(str(path), ["--seed", "2"], environ={}).seed == 2
        with pytest.raises(ConfigError):
            load_config(None, [], environ={"ROBUSTMORPH_SEED": "x"})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            load_config(str(path), [], environ={})


class TestExitCodes:
    @pytest.mark.parametrize("exc,code", [(ConfigError("x"), 2), (ValidationError("x"), 2),
                                          (PreconditionError("x"), 3), (NumericError("x"), 4)])
    def test_mapping(self, exc, code):
        assert exit_code_for(exc) == code

    def test_zero_class_count_exits_2_naming_field(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("ROBUSTMORPH_SEED", raising=False)
        code = main(["synth", "--dataset", str(tmp_path / "d"),
                     "--synth.counts", '{"spiral": 0, "elliptical": 30, "merger": 30}'])
        assert code == 2
        assert "spiral" in capsys.readouterr().err

    def test_unknown_override_exits_2(self, tmp_path):
        assert main(["synth", "--no_such_key", "1"]) == 2

    def test_missing_run_exits_3(self, tmp_path):
        assert main(["eval", "--run", str(tmp_path / "nothing")]) == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth, regular and da training, eval, attack on a 90-source 32x32 dataset."""
    root = tmp_path_factory.mktemp("cli")
    conf = root / "config.json"
    conf.write_text(json.dumps({**TINY, "dataset": str(root / "data")}))
    base = ["--config", str(conf)]
    codes = {"synth": main(["synth", *base])}
    for mode in ("regular", "da"):
        run = ["--run", str(root / mode), "--out", str(root / mode), "--mode", mode]
        codes[f"train_{mode}"] = main(["train", *base, *run])
        for dom in ("Y10", "Y1"):
            codes[f"eval_{mode}_{dom}"] = main(["eval", *base, *run, "--domain", dom])
        codes[f"attack_{mode}"] = main(["attack", *base, *run])
    return root, base, codes


class TestPipeline:
    def test_all_stages_succeed(self, pipeline):
        _, _, codes = pipeline
        assert all(c == 0 for c in codes.values()), codes

    def test_synth_split_and_reproducible(self, pipeline, tmp_path):
        root, base, _ = pipeline
        ds = Dataset(root / "data")
        assert [len(ds.ids(s)) for s in ("train", "val", "test")] == [63, 9, 18]
        assert main(["synth", *base, "--dataset", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "images.bin").read_bytes() == (root / "data" / "images.bin").read_bytes()

    def test_history_columns(self, pipeline):
        root, _, _ = pipeline
        reg = _csv_rows(root / "regular" / "history.csv")
        da = _csv_rows(root / "da" / "history.csv")
        assert len(reg) == len(da) == 8
        assert all(float(r["mmd"]) == 0.0 for r in reg)
        assert any(float(r["mmd"]) != 0.0 for r in da)

    def test_training_deterministic(self, pipeline, tmp_path):
        root, base, _ = pipeline
        assert main(["train", *base, "--out", str(tmp_path / "r"), "--mode", "regular"]) == 0
        assert (tmp_path / "r" / "history.csv").read_bytes() == (root / "regular" / "history.csv").read_bytes()

    def test_metrics_files(self, pipeline):
        root, _, _ = pipeline
        for dom in ("Y10", "Y1"):
            m = json.loads((root / "regular" / f"metrics_test_{dom}.json").read_text())
            assert m["provenance"]["tool_version"] == __version__
            assert set(m["metrics"]) >= {"accuracy", "precision", "recall", "f1"}
            assert 0 <= m["metrics"]["accuracy"] <= 1

    def test_attack_csv(self, pipeline):
        root, _, _ = pipeline
        rows = _csv_rows(root / "regular" / "attacks.csv")
        assert rows and len({r["id"] for r in rows}) <= 18
        for r in rows:
            assert r["target"] != r["true"]
            assert 0 <= int(r["x"]) < 32 and 0 <= int(r["y"]) < 32

    def test_attack_selection_reproducible(self, pipeline, tmp_path):
        root, base, _ = pipeline
        run = root / "regular"
        before = (run / "attacks.csv").read_bytes()
        assert main(["attack", *base, "--run", str(run)]) == 0
        assert (run / "attacks.csv").read_bytes() == before

    def test_margin_selection(self, pipeline):
        root, _, _ = pipeline
        model = load_model(root / "regular", "best")
        ds = Dataset(root / "data")
        ids = ds.ids("test")
        labels = ds.labels(ids)
        proba = predict_proba(model, ds.images(ids, "Y10"))
        ok = proba.argmax(axis=1) == labels
        p_true = proba[np.arange(len(ids)), labels]
        chosen, chosen_labels = select_attack_ids(model, ds, 3, 0, "margin")
        assert len(chosen) == min(3, ok.sum())
        assert np.array_equal(chosen_labels, ds.labels(chosen))
        worst_kept = max(p_true[ids == c][0] for c in chosen)
        skipped = [p for i, p, good in zip(ids, p_true, ok) if good and i not in chosen]
        assert all(worst_kept <= p for p in skipped)
        assert np.array_equal(chosen, select_attack_ids(model, ds, 3, 99, "margin")[0])
        with pytest.raises(ConfigError):
            select_attack_ids(model, ds, 3, 0, "best")

    def test_attack_n_capped(self, pipeline, caplog):
        root, base, _ = pipeline
        run = root / "da"
        before = (run / "attacks.csv").read_bytes()
        try:
            assert main(["attack", *base, "--run", str(run), "--attack.n", "1000", "--attack.budget", "1",
                         "--attack.population", "4"]) == 0
            assert "only" in caplog.text
        finally:
            (run / "attacks.csv").write_bytes(before)

    def test_window_without_success_exits_3(self, pipeline, capsys):
        root, base, _ = pipeline
        run = root / "regular"
        flipped = {r["id"] for r in _csv_rows(run / "attacks.csv") if r["success"] == "1"}
        candidate = next(i for i in range(90) if str(i) not in flipped)
        assert main(["window", *base, "--run", str(run), "--example_id", str(candidate)]) == 3
        assert "no successful attack" in capsys.readouterr().err

    def test_measure(self, pipeline):
        root, base, _ = pipeline
        assert main(["measure", *base, "--out", str(root / "m"), "--domain", "Y10"]) == 0
        rows = _csv_rows(root / "m" / "measure_test_Y10.csv")
        assert len(rows) == 18

    def test_isomap(self, pipeline):
        root, base, _ = pipeline
        assert main(["isomap", *base, "--run", str(root / "regular"), "--analysis.largest_component", "true"]) == 0
        rows = _csv_rows(root / "regular" / "isomap_2d.csv")
        assert 0 < len(rows) <= 24
        assert {r["domain"] for r in rows} <= {"Y10", "Y1"}

    def test_window_on_flipped(self, pipeline):
        root, base, _ = pipeline
        run = root / "regular"
        flipped = sorted({r["id"] for r in _csv_rows(run / "attacks.csv") if r["success"] == "1"}, key=int)
        assert flipped, "seeded tiny run is expected to flip at least one example"
        ex = flipped[0]
        assert main(["window", *base, "--run", str(run), "--example_id", ex, "--analysis.resolution", "11"]) == 0
        cells = _csv_rows(run / f"window_{ex}.csv")
        assert len(cells) == 11 and all(len(row) == 12 for row in cells)
        assert {v for row in cells for k, v in row.items() if k != "b\\a"} <= {"0", "1", "2"}
        svg = (run / f"window_{ex}.svg").read_text()
        assert "<svg" in svg and svg.rstrip().endswith("</svg>")

    def test_analyze_single_run(self, pipeline):
        root, base, _ = pipeline
        assert main(["analyze", *base, "--run", str(root / "regular"), "--out", str(root / "an1")]) == 0
        stats = json.loads((root / "an1" / "stats.json").read_text())
        assert set(stats["runs"]) == {"regular"}
        assert set(stats["runs"]["regular"]) == {"Y10-Y1", "Y10-1P"}
        assert list(stats["js_distance"]) == ["regular:Y10-Y1|regular:Y10-1P"]
        assert 0 <= stats["js_distance"]["regular:Y10-Y1|regular:Y10-1P"] <= 1
        assert (root / "an1" / "embeddings_regular.csv").exists()

    def test_analyze_two_runs(self, pipeline):
        root, base, _ = pipeline
        flips = [{r["id"] for r in _csv_rows(root / m / "attacks.csv") if r["success"] == "1"} for m in ("regular", "da")]
        code = main(["analyze", *base, "--runs", json.dumps([str(root / "regular"), str(root / "da")]),
                     "--out", str(root / "an2")])
        if len(flips[0] & flips[1]) < 2:
            assert code == 3
            return
        assert code == 0
        stats = json.loads((root / "an2" / "stats.json").read_text())
        assert set(stats["runs"]) == {"regular", "da"} and len(stats["js_distance"]) == 4
