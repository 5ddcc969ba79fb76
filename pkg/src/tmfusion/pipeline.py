"""Experiment plumbing: configs, end-to-end training and evaluation, random search, model selection.

A run directory holds everything needed to evaluate a trained experiment::

    run.json              resolved config and summary metrics
    heads/<modality>.tmf  modality heads
    windows/<modality>.tmf  window classifiers (only for windowed modalities)
    fusion.tmf            fusion parameters (weighted-mean, moddrop, score-tree)
    logs/*.csv            per-epoch training logs
"""

from __future__ import annotations

import copy
import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import fusion as fu
from .data import NUM_CLASSES, VideoSample, load_manifest, load_samples
from .errors import ConfigError, ContractError, DimensionError, LoadError, TmfError
from .layers import load_checkpoint, save_checkpoint
from .metrics import MetricsReport, write_predictions_csv
from .temporal import (
    HeadConfig,
    ModalityHead,
    TrainConfig,
    WindowClassifier,
    WindowStageConfig,
    head_outputs,
    train_head,
    train_weighted_windows,
    window_descriptors,
    write_training_log,
)

CONFIG_VERSION = 1
FUSION_METHODS = ("majority", "mean", "max", "weighted-mean", "moddrop", "score-tree")
BASELINES = ("majority", "mean", "max")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModalityConfig:
    """One modality: its head, optional window stage and optimiser settings.

    ``head["input_dim"]`` may be omitted; it is then taken from the manifest
    (or from the window classifier's hidden size when windows are used).
    """

    name: str
    head: dict = field(default_factory=dict)
    windows: WindowStageConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModalityConfig":
        obj = dict(obj)
        if "name" not in obj:
            raise ConfigError("every modality needs a name")
        win = obj.pop("windows", None)
        train = TrainConfig(**obj.pop("train", {}))
        cfg = cls(windows=None if win is None else WindowStageConfig.from_dict(win), train=train, **obj)
        probe = dict(cfg.head)
        probe.setdefault("input_dim", 1)
        HeadConfig.from_dict(probe)
        return cfg

    def head_config(self, input_dim: int) -> HeadConfig:
        obj = dict(self.head)
        if self.windows is not None:
            obj["input_dim"] = self.windows.hidden_dim
        obj.setdefault("input_dim", input_dim)
        return HeadConfig.from_dict(obj)

    def to_dict(self) -> dict:
        return {"name": self.name, "head": dict(self.head),
                "windows": None if self.windows is None else self.windows.to_dict(),
                "train": asdict(self.train)}


@dataclass
class FusionConfig:
    method: str = "mean"
    hidden: int = 256
    drop_probability: float = 0.2
    feature_hidden: int = 0
    grid_step: float = 0.05
    train: fu.FusionTrainConfig = field(default_factory=fu.FusionTrainConfig)

    def __post_init__(self):
        if self.method not in FUSION_METHODS + ("none",):
            raise ConfigError(f"unknown fusion method {self.method!r}; choose from {', '.join(FUSION_METHODS)}")

    @classmethod
    def from_dict(cls, obj: dict) -> "FusionConfig":
        obj = dict(obj)
        train = dict(obj.pop("train", {}))
        gamma = fu.GammaSchedule(**train.pop("gamma", {}))
        return cls(train=fu.FusionTrainConfig(gamma=gamma, **train), **obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    """Everything a run needs. Paths are relative to ``base_dir`` (the config file's folder)."""

    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    modalities: list[ModalityConfig] = field(default_factory=list)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0
    out: str = "run"
    workers: int = 1
    version: int = CONFIG_VERSION
    base_dir: str = "."

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if not self.modalities:
            raise ConfigError("config lists no modalities")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError("modality names must be unique")
        if self.fusion.method == "none" and len(names) != 1:
            raise ConfigError("fusion method 'none' needs exactly one modality")
        if self.fusion.method != "none" and len(names) < 2:
            raise ConfigError("fusion needs at least two modalities; use method 'none' for one")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict, base_dir=".") -> "ExperimentConfig":
        obj = dict(obj)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        try:
            mods = [ModalityConfig.from_dict(m) for m in obj.pop("modalities", [])]
            fusion = FusionConfig.from_dict(obj.pop("fusion", {}))
            obj.setdefault("base_dir", str(base_dir))
            cfg = cls(modalities=mods, fusion=fusion, **obj)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("version", "train_manifest", "val_manifest", "test_manifest",
                                             "seed", "out", "workers", "base_dir")}
        out["modalities"] = [m.to_dict() for m in self.modalities]
        out["fusion"] = self.fusion.to_dict()
        return out

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(obj, base_dir=path.parent.resolve())


def apply_overrides(config: ExperimentConfig, seed: int | None = None, out: str | None = None,
                    workers: int | None = None, fusion: str | None = None) -> ExperimentConfig:
    """Command-line flags win over config-file values, which win over defaults."""
    cfg = copy.deepcopy(config)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    if workers is not None:
        cfg.workers = workers
    if fusion is not None:
        cfg.fusion = FusionConfig.from_dict({**cfg.fusion.to_dict(), "method": fusion})
    cfg.validate()
    return cfg


def set_path(obj: Any, dotted: str, value: Any) -> None:
    """Set ``a.b.0.c`` inside nested dicts/lists; list items may also be addressed by their ``name``."""
    keys = dotted.split(".")
    for key in keys[:-1]:
        obj = _child(obj, key, dotted)
    last = keys[-1]
    if isinstance(obj, list):
        obj[_list_index(obj, last, dotted)] = value
    elif isinstance(obj, dict):
        obj[last] = value
    else:
        raise ConfigError(f"cannot set {dotted!r}: {last!r} is not inside a mapping")


def _child(obj, key: str, dotted: str):
    if isinstance(obj, list):
        return obj[_list_index(obj, key, dotted)]
    if isinstance(obj, dict):
        if obj.get(key) is None:
            obj[key] = {}
        return obj[key]
    raise ConfigError(f"cannot descend into {key!r} of {dotted!r}")


def _list_index(items: list, key: str, dotted: str) -> int:
    if key.isdigit() and int(key) < len(items):
        return int(key)
    for i, item in enumerate(items):
        if isinstance(item, dict) and item.get("name") == key:
            return i
    raise ConfigError(f"{dotted!r}: no list item {key!r}")


# ---------------------------------------------------------------------------
# per-modality processing


def _modality_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 11, index]))


def _windows_for(samples: Sequence[VideoSample], name: str, stage: WindowStageConfig) -> list[np.ndarray]:
    return [window_descriptors(s.sequences[name], stage.windowing) for s in samples]


def _head_inputs(samples, name: str, stage: WindowStageConfig | None, classifier: WindowClassifier | None):
    if stage is None:
        return [s.sequences[name] for s in samples]
    return [classifier.describe(w) for w in _windows_for(samples, name, stage)]


@dataclass
class TrainedModality:
    config: ModalityConfig
    head: ModalityHead
    classifier: WindowClassifier | None = None

    def inputs(self, samples) -> list[np.ndarray]:
        return _head_inputs(samples, self.config.name, self.config.windows, self.classifier)

    def outputs(self, samples) -> tuple[np.ndarray, np.ndarray]:
        return head_outputs(self.head, self.inputs(samples))


def train_modality(mc: ModalityConfig, samples, labels, input_dim: int, rng: np.random.Generator
                   ) -> tuple[TrainedModality, dict[str, list[dict]]]:
    logs = {}
    classifier = None
    if mc.windows is not None:
        st = mc.windows
        windows = _windows_for(samples, mc.name, st)
        classifier = WindowClassifier(input_dim, st.hidden_dim, NUM_CLASSES, st.keep_probability, rng)
        logs["windows"] = train_weighted_windows(classifier, windows, labels, st.schedule, st.phase1_epochs,
                                                 st.phase2_epochs, st.train, rng)
    head = ModalityHead(mc.head_config(input_dim), rng)
    trained = TrainedModality(mc, head, classifier)
    logs["head"] = train_head(head, trained.inputs(samples), labels, mc.train, rng)
    return trained, logs


def _check_dims(manifest_dims: dict[str, int], modalities: Sequence[ModalityConfig], source: str) -> None:
    for mc in modalities:
        if mc.name not in manifest_dims:
            raise DimensionError(f"modality {mc.name!r} is missing from {source}")


# ---------------------------------------------------------------------------
# fusion


def build_fusion(cfg: FusionConfig, dims: Sequence[int], rng: np.random.Generator):
    if cfg.method == "moddrop":
        return fu.ModDropFusion(dims, cfg.hidden, cfg.drop_probability, NUM_CLASSES, rng)
    if cfg.method == "score-tree":
        return fu.ScoreTreeFusion(dims, NUM_CLASSES, cfg.feature_hidden, rng)
    return None


def fuse(method: str, outputs: fu.ModalitySet, model=None, weights=None) -> np.ndarray:
    """Fused class scores ``(videos, classes)``; row arg-max is the prediction (baselines excepted)."""
    if method == "none":
        return outputs.scores[0]
    if method in BASELINES:
        return fu.baseline_scores(outputs.score_tensor(), method)
    if method == "weighted-mean":
        return np.tensordot(np.asarray(weights), outputs.score_tensor(), axes=1)
    return fu.fusion_predict(model, outputs)


def fused_predictions(method: str, outputs: fu.ModalitySet, scores: np.ndarray) -> np.ndarray:
    if method in BASELINES:
        return np.asarray(fu.fuse_baseline(outputs.score_tensor(), method)).reshape(-1)
    return scores.argmax(axis=1)


# ---------------------------------------------------------------------------
# train / eval


@dataclass
class RunResult:
    out_dir: Path
    metrics: dict


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def run_training(config: ExperimentConfig) -> RunResult:
    """Train every modality head, then the fusion stage; write checkpoints, logs and ``run.json``."""
    config.validate()
    out = Path(config.out)
    for sub in ("heads", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    train_m = load_manifest(config.resolve(config.train_manifest))
    _check_dims(train_m.modalities, config.modalities, "the training manifest")
    names = [m.name for m in config.modalities]
    train_s = load_samples(train_m, names)
    y_train = train_m.labels
    val_s, y_val = None, None
    if config.val_manifest:
        val_m = load_manifest(config.resolve(config.val_manifest))
        _check_dims(val_m.modalities, config.modalities, "the validation manifest")
        val_s, y_val = load_samples(val_m, names), val_m.labels

    trained = []
    metrics: dict = {"modalities": {}}
    for k, mc in enumerate(config.modalities):
        tm, logs = train_modality(mc, train_s, y_train, train_m.modalities[mc.name], _modality_rng(config.seed, k))
        trained.append(tm)
        save_checkpoint(out / "heads" / f"{mc.name}.tmf", tm.head, {"config": json.dumps(tm.head.config.to_dict())})
        if tm.classifier is not None:
            (out / "windows").mkdir(exist_ok=True)
            save_checkpoint(out / "windows" / f"{mc.name}.tmf", tm.classifier,
                            {"config": json.dumps(tm.classifier.hyperparameters())})
        for stage, log in logs.items():
            write_training_log(out / "logs" / f"{mc.name}_{stage}.csv", log)

    def modality_set(samples, ids):
        d, s = zip(*(tm.outputs(samples) for tm in trained))
        return fu.ModalitySet(names, list(d), list(s), ids)

    train_out = modality_set(train_s, train_m.video_ids)
    val_out = modality_set(val_s, [s.video_id for s in val_s]) if val_s is not None else None
    for k, name in enumerate(names):
        entry = {"train_accuracy": float(np.mean(train_out.scores[k].argmax(1) == y_train))}
        if val_out is not None:
            entry["val_accuracy"] = float(np.mean(val_out.scores[k].argmax(1) == y_val))
        metrics["modalities"][name] = entry

    fcfg = config.fusion
    model, weights = None, None
    if fcfg.method == "weighted-mean":
        if val_out is None:
            raise ConfigError("weighted-mean fusion searches its weights on a validation manifest")
        weights, _ = fu.search_weighted_mean(val_out, y_val, fcfg.grid_step)
        save_checkpoint(out / "fusion.tmf", None, {"kind": "weighted-mean", "modalities": names},
                        {"weights": weights})
        metrics["fusion_weights"] = [float(w) for w in weights]
    elif fcfg.method in ("moddrop", "score-tree"):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))
        model = build_fusion(fcfg, train_out.dims, rng)
        log = fu.train_fusion(model, train_out, y_train, fcfg.train, rng)
        write_training_log(out / "logs" / "fusion.csv", log)
        save_checkpoint(out / "fusion.tmf", model, {"config": json.dumps(model.hyperparameters())})

    metrics["train_accuracy"] = _accuracy(fcfg.method, train_out, y_train, model, weights)
    if val_out is not None:
        metrics["val_accuracy"] = _accuracy(fcfg.method, val_out, y_val, model, weights)
    _json_dump(out / "run.json", {"version": CONFIG_VERSION, "config": config.to_dict(), "metrics": metrics})
    return RunResult(out, metrics)


def _accuracy(method, outputs, labels, model, weights) -> float:
    scores = fuse(method, outputs, model, weights)
    return float(np.mean(fused_predictions(method, outputs, scores) == labels))


@dataclass
class LoadedRun:
    config: ExperimentConfig
    modalities: list[TrainedModality]
    fusion_model: Any = None
    weights: np.ndarray | None = None


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    try:
        record = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"{run_dir} is not a run directory (no run.json)") from None
    cfg = ExperimentConfig.from_dict(record["config"])
    mods = []
    for mc in cfg.modalities:
        hyper, params = load_checkpoint(run_dir / "heads" / f"{mc.name}.tmf")
        head = ModalityHead(HeadConfig.from_dict(json.loads(hyper["config"])))
        head.load_state_dict(params)
        classifier = None
        if mc.windows is not None:
            hyper, params = load_checkpoint(run_dir / "windows" / f"{mc.name}.tmf")
            h = json.loads(hyper["config"])
            classifier = WindowClassifier(h["input_dim"], h["hidden_dim"], h["num_classes"], h["keep_probability"])
            classifier.load_state_dict(params)
        mods.append(TrainedModality(mc, head, classifier))
    loaded = LoadedRun(cfg, mods)
    method = cfg.fusion.method
    if method == "weighted-mean":
        _, params = load_checkpoint(run_dir / "fusion.tmf")
        loaded.weights = params["weights"]
    elif method in ("moddrop", "score-tree"):
        hyper, params = load_checkpoint(run_dir / "fusion.tmf")
        h = json.loads(hyper["config"])
        if h["kind"] == "moddrop":
            model = fu.ModDropFusion(h["dims"], h["hidden"], h["drop_probability"], h["num_classes"])
        else:
            model = fu.ScoreTreeFusion(h["dims"], h["num_classes"], h["feature_hidden"])
        model.load_state_dict(params)
        loaded.fusion_model = model
    return loaded


@dataclass
class EvalResult:
    report: MetricsReport
    video_ids: list[str]
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray


def evaluate_run(run_dir, manifest_path, method: str | None = None) -> EvalResult:
    """Score a manifest with a trained run; ``method`` may swap in a score-level baseline."""
    loaded = load_run(run_dir)
    trained_method = loaded.config.fusion.method
    method = method or trained_method
    if method not in BASELINES and method != trained_method:
        raise ConfigError(f"run was trained with {trained_method!r} fusion; cannot evaluate it as {method!r}")
    if method in BASELINES and len(loaded.modalities) < 2:
        raise ConfigError("score-level fusion needs at least two modalities")
    manifest = load_manifest(manifest_path)
    for tm in loaded.modalities:
        name = tm.config.name
        if name not in manifest.modalities:
            raise DimensionError(f"modality {name!r} is missing from {manifest_path}")
        expected = tm.classifier.input_dim if tm.classifier is not None else tm.head.config.input_dim
        if manifest.modalities[name] != expected:
            raise DimensionError(f"modality {name!r}: manifest declares {manifest.modalities[name]}-d features, "
                                 f"model expects {expected}-d")
    names = [tm.config.name for tm in loaded.modalities]
    samples = load_samples(manifest, names)
    d, s = zip(*(tm.outputs(samples) for tm in loaded.modalities)) if samples else ([], [])
    outputs = fu.ModalitySet(names, list(d), list(s), manifest.video_ids)
    labels = manifest.labels
    if not samples:
        scores = np.zeros((0, NUM_CLASSES))
        preds = np.zeros(0, dtype=int)
    else:
        scores = fuse(method, outputs, loaded.fusion_model, loaded.weights)
        preds = fused_predictions(method, outputs, scores)
    return EvalResult(MetricsReport.from_predictions(labels, preds), manifest.video_ids, scores, preds, labels)


def write_eval_outputs(result: EvalResult, out_dir, title: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out / "predictions.csv", result.video_ids, result.scores, result.predictions,
                          result.labels)
    result.report.write_confusion_csv(out / "confusion.csv")
    result.report.write_text(out / "metrics.txt", title)


# ---------------------------------------------------------------------------
# random search


@dataclass
class ParameterRange:
    kind: str  # "log_uniform", "uniform", "int_uniform" or "choices"
    values: list

    @classmethod
    def from_dict(cls, obj: dict) -> "ParameterRange":
        if len(obj) != 1:
            raise ConfigError(f"parameter range needs exactly one kind, got {sorted(obj)}")
        (kind, values), = obj.items()
        rng = cls(kind, list(values))
        rng.validate()
        return rng

    def validate(self) -> None:
        if self.kind == "choices":
            if not self.values:
                raise ConfigError("choices list is empty")
            return
        if self.kind not in ("log_uniform", "uniform", "int_uniform"):
            raise ConfigError(f"unknown range kind {self.kind!r}")
        if len(self.values) != 2 or not self.values[0] <= self.values[1]:
            raise ConfigError(f"{self.kind} bounds must be an ordered pair, got {self.values}")
        if self.kind == "log_uniform" and self.values[0] <= 0:
            raise ConfigError("log_uniform bounds must be positive")

    def sample(self, rng: np.random.Generator):
        lo_hi = self.values
        if self.kind == "choices":
            return copy.deepcopy(self.values[int(rng.integers(len(self.values)))])
        if self.kind == "log_uniform":
            return float(math.exp(rng.uniform(math.log(lo_hi[0]), math.log(lo_hi[1]))))
        if self.kind == "int_uniform":
            return int(rng.integers(int(lo_hi[0]), int(lo_hi[1]) + 1))
        return float(rng.uniform(lo_hi[0], lo_hi[1]))


@dataclass
class GridSearchSpec:
    parameters: dict[str, ParameterRange]
    trials: int = 10
    seed: int = 0
    metric: str = "val_accuracy"

    @classmethod
    def from_dict(cls, obj: dict) -> "GridSearchSpec":
        obj = dict(obj)
        if obj.pop("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError("unsupported grid-search spec version")
        params = {k: ParameterRange.from_dict(v) for k, v in obj.pop("parameters", {}).items()}
        try:
            spec = cls(params, **obj)
        except TypeError as exc:
            raise ConfigError(f"invalid grid-search spec: {exc}") from None
        if spec.trials < 1:
            raise ConfigError("trial count must be >= 1")
        if spec.metric not in ("val_accuracy", "train_accuracy"):
            raise ConfigError(f"unknown selection metric {spec.metric!r}")
        return spec

    def sample_trials(self) -> list[dict]:
        """Parameter draws for every trial; depends only on the search seed."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 17]))
        return [{name: r.sample(rng) for name, r in sorted(self.parameters.items())} for _ in range(self.trials)]


def load_grid_spec(path) -> GridSearchSpec:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"grid-search spec {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return GridSearchSpec.from_dict(obj)


def trial_config(base: ExperimentConfig, params: dict, out_dir) -> ExperimentConfig:
    obj = base.to_dict()
    for name, value in params.items():
        set_path(obj, name, value)
    obj["out"] = str(out_dir)
    return ExperimentConfig.from_dict(obj)


def _run_trial(args) -> dict:
    index, base_dict, params, out_dir, metric = args
    row = {"trial": index, "status": "ok", "metric": math.nan, "error": "", "params": params}
    try:
        cfg = trial_config(ExperimentConfig.from_dict(base_dict), params, out_dir)
        row["metric"] = run_training(cfg).metrics[metric]
    except (TmfError, ValueError, KeyError, TypeError, OSError) as exc:
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_grid_search(spec: GridSearchSpec, base: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Train one run per sampled configuration; rows ranked by the metric, failures last."""
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    draws = spec.sample_trials()
    jobs = [(i, base.to_dict(), p, str(out / "trials" / f"trial_{i:03d}"), spec.metric) for i, p in enumerate(draws)]
    workers = workers or base.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_trial, jobs))
    else:
        rows = [_run_trial(j) for j in jobs]
    ranked = sorted(rows, key=lambda r: (r["status"] != "ok", -r["metric"] if r["status"] == "ok" else 0,
                                         r["trial"]))
    for rank, row in enumerate(ranked, start=1):
        row["rank"] = rank
    _write_trials_csv(out / "trials.csv", ranked, sorted(spec.parameters), spec.metric)
    best = next((r for r in ranked if r["status"] == "ok"), None)
    if best is not None:
        cfg = trial_config(base, best["params"], out / "trials" / f"trial_{best['trial']:03d}")
        _json_dump(out / "best_config.json", cfg.to_dict())
    return ranked


def _write_trials_csv(path: Path, rows: list[dict], names: list[str], metric: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "trial", "status", metric, *names, "error"])
        for r in rows:
            value = "" if r["status"] != "ok" else repr(float(r["metric"]))
            w.writerow([r["rank"], r["trial"], r["status"], value,
                        *(json.dumps(r["params"][n]) for n in names), r["error"]])


# ---------------------------------------------------------------------------
# complementary model selection


def select_models(run_dirs: Sequence, manifest_path, k: int, accuracy_weight: float = 1.0,
                  dissimilarity_weight: float = 1.0) -> list[dict]:
    """Evaluate every run on ``manifest_path`` and greedily pick ``k`` complementary ones."""
    if k > len(run_dirs):
        raise ContractError(f"cannot select {k} of {len(run_dirs)} models")
    candidates = []
    for rd in run_dirs:
        res = evaluate_run(rd, manifest_path)
        candidates.append(fu.CandidateModel(str(rd), res.report.accuracy, res.report.normalized()))
    return fu.select_complementary(candidates, k, accuracy_weight, dissimilarity_weight)


def write_selection(rows: list[dict], out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "selection.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["rank", "model", "accuracy", "mean_dissimilarity", "utility"])
        w.writeheader()
        w.writerows(rows)
    lines = ["rank  accuracy  dissimilarity  utility  model"]
    lines += [f"{r['rank']:>4}  {r['accuracy']:.4f}    {r['mean_dissimilarity']:.4f}         "
              f"{r['utility']:.4f}   {r['model']}" for r in rows]
    text = "\n".join(lines) + "\n"
    (out / "selection.txt").write_text(text, encoding="utf-8")
    return text


__all__ = [
    "ExperimentConfig", "ModalityConfig", "FusionConfig", "GridSearchSpec", "ParameterRange",
    "load_config", "apply_overrides", "run_training", "evaluate_run", "load_run", "write_eval_outputs",
    "run_grid_search", "select_models", "write_selection",
]
