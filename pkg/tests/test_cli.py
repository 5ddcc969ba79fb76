import csv
import json
from pathlib import Path

import numpy as np
import pytest

from tmfusion.cli import main
from tmfusion.data import AFEW_CLASS_COUNTS, load_manifest
from tmfusion.errors import ConfigError, ContractError, DimensionError
from tmfusion.layers import load_checkpoint
from tmfusion.metrics import (
    MetricsReport,
    confusion_matrix,
    read_confusion_csv,
    read_predictions_csv,
    write_predictions_csv,
)
from tmfusion.pipeline import (
    GridSearchSpec,
    _modality_rng,
    apply_overrides,
    evaluate_run,
    load_config,
    set_path,
)
from tmfusion.temporal import HeadConfig, ModalityHead

SPEC = {
    "noise": 1.0,
    "seed": 3,
    "counts": {"train": 42, "val": 21, "test": 21},
    "modalities": [
        {"name": "a", "dim": 6, "informative": [0, 1, 2, 3], "kind": "vector"},
        {"name": "b", "dim": 5, "informative": [3, 4, 5, 6], "kind": "sequence", "min_length": 4, "max_length": 9},
    ],
}


def _config(data_dir: Path, out: Path, method="moddrop", head_epochs=8, fusion_epochs=8):
    return {
        "version": 1,
        "train_manifest": str(data_dir / "train.jsonl"),
        "val_manifest": str(data_dir / "val.jsonl"),
        "test_manifest": str(data_dir / "test.jsonl"),
        "seed": 0,
        "out": str(out),
        "modalities": [
            {"name": "a", "head": {"kind": "audio-mlp", "descriptor_dim": 8},
             "train": {"epochs": head_epochs, "batch_size": 8, "lr": 0.05}},
            {"name": "b", "head": {"kind": "lstm-head", "descriptor_dim": 8, "hidden_dim": 6, "max_length": 16},
             "train": {"epochs": head_epochs, "batch_size": 8, "lr": 0.05}},
        ],
        "fusion": {"method": method, "hidden": 16, "train": {"epochs": fusion_epochs, "batch_size": 8}},
    }


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = _write_json(root / "spec.json", SPEC)
    assert main(["synth", "--config", str(spec), "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write_json(root / "cfg.json", _config(data_dir, root / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    return root / "run"


class TestSynth:
    def test_writes_three_manifests(self, data_dir):
        for split, n in (("train", 42), ("val", 21), ("test", 21)):
            m = load_manifest(data_dir / f"{split}.jsonl")
            assert len(m) == n and m.modalities == {"a": 6, "b": 5}
        assert (data_dir / "oracle.json").exists()

    def test_rerun_is_byte_identical(self, data_dir, tmp_path):
        spec = _write_json(tmp_path / "spec.json", SPEC)
        assert main(["synth", "--config", str(spec), "--out", str(tmp_path / "again")]) == 0
        for p in sorted(data_dir.rglob("*")):
            if p.is_file():
                assert (tmp_path / "again" / p.relative_to(data_dir)).read_bytes() == p.read_bytes()

    def test_seed_flag_changes_data(self, data_dir, tmp_path):
        spec = _write_json(tmp_path / "spec.json", SPEC)
        assert main(["synth", "--config", str(spec), "--seed", "4", "--out", str(tmp_path / "s4")]) == 0
        feats = sorted((tmp_path / "s4").rglob("*.tmff"))
        assert feats and feats[0].read_bytes() != (data_dir / feats[0].relative_to(tmp_path / "s4")).read_bytes()

    def test_afew_counts(self, tmp_path, capsys):
        spec = dict(SPEC, counts={"train": "afew:train", "val": "afew:val", "test": "afew:test"},
                    modalities=[{"name": "a", "dim": 2, "informative": list(range(7))},
                                {"name": "c", "dim": 2, "informative": [0]}])
        assert main(["synth", "--config", str(_write_json(tmp_path / "s.json", spec)),
                     "--out", str(tmp_path / "afew")]) == 0
        for split, total in (("train", 773), ("val", 383), ("test", 653)):
            m = load_manifest(tmp_path / "afew" / f"{split}.jsonl")
            assert len(m) == total and tuple(m.histogram()) == AFEW_CLASS_COUNTS[split]
        assert "133 (17.2 %)" in capsys.readouterr().out

    def test_default_spec(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d")]) == 0
        assert load_manifest(tmp_path / "d" / "train.jsonl").modalities == {"audio": 32, "frames": 16, "clips": 16}


class TestTrainEval:
    def test_run_layout(self, trained):
        for rel in ("run.json", "heads/a.tmf", "heads/b.tmf", "fusion.tmf", "logs/a_head.csv", "logs/fusion.csv"):
            assert (trained / rel).exists(), rel
        record = json.loads((trained / "run.json").read_text())
        assert record["version"] == 1
        assert set(record["metrics"]["modalities"]) == {"a", "b"}
        with open(trained / "logs" / "fusion.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8 and "offdiagonal_mass" in rows[0]

    def test_zero_epochs_keeps_initialisation(self, data_dir, tmp_path):
        cfg = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "run", head_epochs=0))
        assert main(["train", "--config", str(cfg)]) == 0
        for k, (name, hc) in enumerate((("a", {"kind": "audio-mlp", "descriptor_dim": 8, "input_dim": 6}),
                                       ("b", {"kind": "lstm-head", "descriptor_dim": 8, "hidden_dim": 6,
                                              "max_length": 16, "input_dim": 5}))):
            fresh = ModalityHead(HeadConfig.from_dict(hc), _modality_rng(0, k)).state_dict()
            _, saved = load_checkpoint(tmp_path / "run" / "heads" / f"{name}.tmf")
            assert set(saved) == set(fresh)
            for key in fresh:
                assert saved[key].tobytes() == fresh[key].tobytes(), key

    def test_training_is_deterministic(self, data_dir, trained, tmp_path):
        cfg = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "again"))
        assert main(["train", "--config", str(cfg)]) == 0
        for rel in ("heads/a.tmf", "heads/b.tmf", "fusion.tmf", "logs/fusion.csv", "logs/b_head.csv"):
            assert (tmp_path / "again" / rel).read_bytes() == (trained / rel).read_bytes(), rel
        a = json.loads((trained / "run.json").read_text())["metrics"]
        b = json.loads((tmp_path / "again" / "run.json").read_text())["metrics"]
        assert a == b

    def test_flags_override_config(self, data_dir, tmp_path):
        path = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "x"))
        cfg = apply_overrides(load_config(path), seed=9, out=str(tmp_path / "y"), workers=3, fusion="mean")
        assert (cfg.seed, cfg.out, cfg.workers, cfg.fusion.method) == (9, str(tmp_path / "y"), 3, "mean")
        assert main(["train", "--config", str(path), "--fusion", "mean", "--out", str(tmp_path / "z")]) == 0
        assert json.loads((tmp_path / "z" / "run.json").read_text())["config"]["fusion"]["method"] == "mean"
        assert not (tmp_path / "z" / "fusion.tmf").exists()

    def test_eval_reports_agree(self, data_dir, trained, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(trained), "--manifest", str(data_dir / "test.jsonl"),
                     "--out", str(out)]) == 0
        ids, preds, scores, labels = read_predictions_csv(out / "predictions.csv")
        cm = read_confusion_csv(out / "confusion.csv")
        assert len(ids) == 21 and cm.sum() == 21
        assert np.trace(cm) == int(np.sum(preds == labels))
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-5)
        accuracy = float(np.mean(preds == labels))
        assert f"accuracy {accuracy:.4f}" in (out / "metrics.txt").read_text().lower().replace(":", "")
        direct = evaluate_run(trained, data_dir / "test.jsonl")
        assert direct.report.accuracy == accuracy
        assert "accuracy" in capsys.readouterr().out.lower()

    def test_eval_is_deterministic(self, data_dir, trained, tmp_path):
        for name in ("e1", "e2"):
            assert main(["eval", "--checkpoint", str(trained), "--manifest", str(data_dir / "val.jsonl"),
                         "--out", str(tmp_path / name)]) == 0
        for f in ("predictions.csv", "confusion.csv", "metrics.txt"):
            assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()

    def test_val_accuracy_matches_run_record(self, data_dir, trained):
        record = json.loads((trained / "run.json").read_text())
        assert evaluate_run(trained, data_dir / "val.jsonl").report.accuracy == record["metrics"]["val_accuracy"]

    def test_baseline_swap_and_mismatch(self, data_dir, trained, tmp_path):
        for method in ("majority", "mean", "max"):
            res = evaluate_run(trained, data_dir / "val.jsonl", method)
            assert res.report.total == 21
        with pytest.raises(ConfigError):
            evaluate_run(trained, data_dir / "val.jsonl", "score-tree")
        assert main(["eval", "--checkpoint", str(trained), "--manifest", str(data_dir / "val.jsonl"),
                     "--fusion", "weighted-mean", "--out", str(tmp_path / "e")]) == 1

    def test_eval_dimension_mismatch(self, trained, tmp_path):
        spec = dict(SPEC, modalities=[dict(SPEC["modalities"][0], dim=7), SPEC["modalities"][1]])
        assert main(["synth", "--config", str(_write_json(tmp_path / "s.json", spec)),
                     "--out", str(tmp_path / "d")]) == 0
        with pytest.raises(DimensionError, match="'a'"):
            evaluate_run(trained, tmp_path / "d" / "test.jsonl")
        assert main(["eval", "--checkpoint", str(trained), "--manifest", str(tmp_path / "d" / "test.jsonl")]) == 1

    @pytest.mark.parametrize("method", ["weighted-mean", "score-tree"])
    def test_other_fusion_methods(self, data_dir, tmp_path, method):
        cfg = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "run", method=method))
        assert main(["train", "--config", str(cfg)]) == 0
        record = json.loads((tmp_path / "run" / "run.json").read_text())
        res = evaluate_run(tmp_path / "run", data_dir / "val.jsonl")
        assert res.report.accuracy == record["metrics"]["val_accuracy"]
        if method == "weighted-mean":
            assert sum(record["metrics"]["fusion_weights"]) == pytest.approx(1.0)


class TestMetrics:
    def test_perfect_and_constant_predictors(self):
        y = np.array([0, 1, 2, 3, 4, 5, 6, 6])
        perfect = MetricsReport.from_predictions(y, y)
        assert perfect.accuracy == 1.0 and np.all(perfect.recall == 1.0)
        assert np.array_equal(perfect.confusion, np.diag(np.bincount(y, minlength=7)))
        const = MetricsReport.from_predictions(y, np.full(8, 6))
        assert const.accuracy == 2 / 8
        assert const.confusion[:, 6].sum() == 8 and const.recall[6] == 1.0 and const.recall[0] == 0.0

    def test_normalised_rows(self):
        rep = MetricsReport.from_predictions([0, 0, 1], [0, 1, 1])
        n = rep.normalized()
        np.testing.assert_allclose(n[0, :2], [0.5, 0.5])
        assert n[2].sum() == 0.0

    def test_errors(self):
        with pytest.raises(DimensionError):
            confusion_matrix([0, 1], [0])
        with pytest.raises(ContractError):
            confusion_matrix([0], [7])

    def test_csv_round_trips(self, tmp_path):
        rng = np.random.default_rng(0)
        scores = rng.dirichlet(np.ones(7), size=5)
        preds, labels = scores.argmax(1), rng.integers(0, 7, 5)
        write_predictions_csv(tmp_path / "p.csv", [f"v{i}" for i in range(5)], scores, preds, labels)
        ids, p2, s2, l2 = read_predictions_csv(tmp_path / "p.csv")
        assert ids == [f"v{i}" for i in range(5)]
        assert p2.tolist() == preds.tolist() and l2.tolist() == labels.tolist()
        np.testing.assert_allclose(s2, scores, atol=1e-6)
        rep = MetricsReport.from_predictions(labels, preds)
        rep.write_confusion_csv(tmp_path / "c.csv")
        assert np.array_equal(read_confusion_csv(tmp_path / "c.csv"), rep.confusion)


GRID = {"trials": 3, "seed": 5, "metric": "val_accuracy",
        "parameters": {"fusion.train.lr": {"log_uniform": [0.01, 0.1]},
                       "fusion.drop_probability": {"choices": [0.0, 0.2]}}}


class TestGridSearch:
    def test_draws_are_seeded(self):
        a = GridSearchSpec.from_dict(GRID).sample_trials()
        b = GridSearchSpec.from_dict(GRID).sample_trials()
        assert a == b and len(a) == 3
        assert all(0.01 <= t["fusion.train.lr"] <= 0.1 for t in a)
        assert GridSearchSpec.from_dict(dict(GRID, seed=6)).sample_trials() != a

    def test_set_path(self):
        obj = {"modalities": [{"name": "a", "head": {}}], "fusion": {"train": {}}}
        set_path(obj, "modalities.a.head.hidden_dim", 4)
        set_path(obj, "modalities.0.train", {"epochs": 1})
        set_path(obj, "fusion.train.lr", 0.5)
        assert obj["modalities"][0] == {"name": "a", "head": {"hidden_dim": 4}, "train": {"epochs": 1}}
        with pytest.raises(ConfigError):
            set_path(obj, "modalities.zz.head", 1)

    def test_workers_do_not_change_results(self, data_dir, tmp_path):
        cfg = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "g", head_epochs=2, fusion_epochs=2))
        grid = _write_json(tmp_path / "grid.json", GRID)
        results = []
        for workers in (1, 2):
            out = tmp_path / f"g{workers}"
            assert main(["grid-search", "--config", str(cfg), "--grid", str(grid), "--out", str(out),
                         "--workers", str(workers)]) == 0
            with open(out / "trials.csv") as fh:
                results.append(list(csv.reader(fh)))
            assert (out / "best_config.json").exists()
        assert results[0] == results[1]
        assert results[0][0][:4] == ["rank", "trial", "status", "val_accuracy"] and len(results[0]) == 4

    def test_failed_trial_is_recorded(self, data_dir, tmp_path):
        cfg = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "g", head_epochs=1, fusion_epochs=1))
        grid = _write_json(tmp_path / "grid.json", {
            "trials": 2, "seed": 0,
            "parameters": {"fusion.drop_probability": {"choices": [0.1, 1.5]}}})
        main(["grid-search", "--config", str(cfg), "--grid", str(grid), "--out", str(tmp_path / "g")])
        with open(tmp_path / "g" / "trials.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        for r in rows:
            bad = json.loads(r["fusion.drop_probability"]) == 1.5
            assert (r["status"] == "failed") == bad
            assert ("ConfigError" in r["error"]) == bad
        assert [r["status"] for r in rows] == sorted((r["status"] for r in rows), key=lambda s: s != "ok")


class TestSelect:
    def test_select_through_cli(self, data_dir, trained, tmp_path, capsys):
        cfg = _write_json(tmp_path / "cfg.json", _config(data_dir, tmp_path / "mean", method="mean"))
        assert main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "sel"
        assert main(["select", "--models", str(trained), str(tmp_path / "mean"), "--manifest",
                     str(data_dir / "val.jsonl"), "-k", "2", "--out", str(out)]) == 0
        with open(out / "selection.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["rank"]) for r in rows] == [1, 2]
        assert {r["model"] for r in rows} == {str(trained), str(tmp_path / "mean")}
        assert float(rows[0]["accuracy"]) >= float(rows[1]["accuracy"])
        assert "rank" in (out / "selection.txt").read_text()
        assert main(["select", "--models", str(trained), "--manifest", str(data_dir / "val.jsonl"),
                     "-k", "2", "--out", str(out)]) == 2


class TestExitCodes:
    def test_usage_errors(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["train", "--fusion", "median"])
        assert exc.value.code == 1
        assert main(["train"]) == 1

    def test_config_errors(self, data_dir, tmp_path):
        assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
        bad = _config(data_dir, tmp_path / "r")
        bad["fusion"]["colour"] = "blue"
        assert main(["train", "--config", str(_write_json(tmp_path / "bad.json", bad))]) == 1
        (tmp_path / "broken.json").write_text("{not json")
        assert main(["train", "--config", str(tmp_path / "broken.json")]) == 1
        assert main(["eval", "--checkpoint", str(tmp_path)]) == 1
        assert main(["eval", "--checkpoint", str(tmp_path), "--manifest", str(data_dir / "val.jsonl")]) == 1

    def test_runtime_error(self, data_dir, trained, tmp_path):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(trained, broken)
        (broken / "fusion.tmf").write_bytes(b"TMF1 garbage")
        assert main(["eval", "--checkpoint", str(broken), "--manifest", str(data_dir / "val.jsonl")]) == 2
