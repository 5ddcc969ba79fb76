"""Per-modality temporal fusion: windows, score pooling, heads, weighted-window training."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import NUM_CLASSES
from .errors import ConfigError, ContractError, DimensionError
from .layers import SGD, BatchNorm, Dense, Lstm, Module, batchnorm_forward, dropout_mask
from .numerics import Tensor


@dataclass
class WindowingSpec:
    window_length: int = 16
    stride: int = 16
    pad_short: bool = True

    def __post_init__(self):
        if self.window_length < 1 or not 1 <= self.stride <= self.window_length:
            raise ConfigError(f"need 1 <= stride <= window_length, got {self.stride} / {self.window_length}")


def segment_windows(length: int, spec: WindowingSpec) -> list[np.ndarray]:
    """Frame indices of each window; indices past the end wrap to the start.

    There are ``ceil(length / stride)`` windows starting at ``0, stride, ...``.
    With ``pad_short=False`` windows are clipped at the sequence end instead.
    """
    if length < 1:
        raise ContractError("cannot window an empty sequence")
    starts = np.arange(0, length, spec.stride)
    idx = starts[:, None] + np.arange(spec.window_length)[None, :]
    if spec.pad_short:
        return list(idx % length)
    return [row[row < length] for row in idx]


def window_descriptors(sequence: np.ndarray, spec: WindowingSpec) -> np.ndarray:
    """Mean frame descriptor of every window, shape ``(n_windows, d)``."""
    seq = np.asarray(sequence, dtype=np.float64)
    return np.stack([seq[w].mean(axis=0) for w in segment_windows(seq.shape[0], spec)])


def pool_scores(step_scores, mode: str = "max") -> tuple[int, np.ndarray]:
    """Collapse per-step score vectors into one prediction.

    ``max`` takes the class of the single largest score over all steps;
    ``mean`` averages over steps first. Ties go to the lowest class index.
    """
    s = np.asarray(step_scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    if s.shape[0] == 0:
        raise ContractError("pool_scores needs at least one step")
    if mode == "max":
        pooled = s.max(axis=0)
    elif mode == "mean":
        pooled = s.mean(axis=0)
    else:
        raise ConfigError(f"unknown pooling mode {mode!r}")
    return int(np.argmax(pooled)), pooled


# ---------------------------------------------------------------------------
# temperature-weighted windows


@dataclass
class TemperatureSchedule:
    initial: float = 1.0
    decay: float = 0.85
    floor: float = 0.05

    def __post_init__(self):
        if not self.initial > 0:
            raise ConfigError("initial temperature must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("temperature decay must lie in (0, 1]")
        if not self.floor > 0:
            raise ConfigError("temperature floor must be positive")

    def __call__(self, epoch: int) -> float:
        return max(self.initial * self.decay**epoch, self.floor)


def window_weights(losses, temperature: float) -> np.ndarray:
    """Normalised ``exp(-loss / T)`` over the windows of one video."""
    s = np.asarray(losses, dtype=np.float64)
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if s.size == 0 or not np.all(np.isfinite(s)):
        raise ContractError("window losses must be finite and non-empty")
    z = -s / temperature
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def weight_entropy(weights: np.ndarray) -> float:
    w = weights[weights > 0]
    return float(-(w * np.log(w)).sum())


class WindowClassifier(Module):
    """Dense stand-in for the clip backbone: window descriptor -> hidden (relu) -> classes."""

    def __init__(self, input_dim: int, hidden_dim: int = 64, num_classes: int = NUM_CLASSES,
                 keep_probability: float = 1.0, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.keep_probability = keep_probability
        self.hidden = self.add_module("hidden", Dense(input_dim, hidden_dim, "relu", rng))
        self.out = self.add_module("out", Dense(hidden_dim, num_classes, "none", rng))

    def hyperparameters(self) -> dict:
        return {"kind": "window-classifier", "input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "num_classes": self.num_classes, "keep_probability": self.keep_probability}

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        h = self.hidden(x)
        z = h
        if train and self.keep_probability < 1.0:
            z = h * dropout_mask(self.keep_probability, h.shape, rng)
        return h, self.out(z)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x))[1].data

    def describe(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x))[0].data


def _weights_for_epoch(losses: list[np.ndarray], temperature: float | None) -> list[np.ndarray]:
    if temperature is None:
        return [np.full(len(s), 1.0 / len(s)) for s in losses]
    return [window_weights(s, temperature) for s in losses]


def _split_losses(classifier: WindowClassifier, stacked: np.ndarray, offsets: np.ndarray,
                  labels_per_window: np.ndarray) -> list[np.ndarray]:
    losses = nx.per_sample_cross_entropy(classifier.logits(stacked), labels_per_window)
    return np.split(losses, offsets[1:-1])


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1) -> list[np.ndarray]:
    order = rng.permutation(n)
    parts = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(parts) > 1 and len(parts[-1]) < min_size:
        parts[-2] = np.concatenate([parts[-2], parts.pop()])
    return parts


def train_weighted_windows(
    classifier: WindowClassifier,
    windows: Sequence[np.ndarray],
    labels,
    schedule: TemperatureSchedule | None,
    phase1_epochs: int = 5,
    phase2_epochs: int = 20,
    train: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> list[dict]:
    """Train a window classifier on videos given as bags of windows.

    Phase 1 weights every window of a video equally. Each Phase-2 epoch first
    scores all windows with the current model, turns the per-window losses into
    softmin weights at temperature ``schedule(t)``, then minimises the weighted
    loss with those weights held constant. ``schedule=None`` keeps uniform
    weights throughout.
    """
    if len(windows) == 0:
        raise ContractError("cannot train on an empty dataset")
    labels = np.asarray(labels, dtype=int)
    if any(len(w) < 1 for w in windows):
        raise ContractError("every video needs at least one window")
    train = train or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = SGD(classifier, train.lr, train.momentum, train.weight_decay)
    sizes = np.array([len(w) for w in windows])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    stacked = np.concatenate(windows)
    window_labels = np.repeat(labels, sizes)
    log = []
    for epoch in range(phase1_epochs + phase2_epochs):
        phase = 1 if epoch < phase1_epochs else 2
        temperature = schedule(epoch - phase1_epochs) if (phase == 2 and schedule is not None) else None
        losses = _split_losses(classifier, stacked, offsets, window_labels)
        weights = _weights_for_epoch(losses, temperature)
        for idx in _batches(len(windows), train.batch_size, rng):
            x = np.concatenate([windows[i] for i in idx])
            y = np.concatenate([np.full(sizes[i], labels[i]) for i in idx])
            w = np.concatenate([weights[i] for i in idx]) / len(idx)
            _, logits = classifier.forward(Tensor(x), train=True, rng=rng)
            loss = nx.softmax_cross_entropy(logits, y, w)
            nx.backward(loss, classifier.parameters())
            opt.step()
        preds = predict_windowed(classifier, windows)
        log.append({
            "epoch": epoch,
            "phase": phase,
            "temperature": math.inf if temperature is None else temperature,
            "weighted_loss": float(np.mean([np.dot(w, s) for w, s in zip(weights, losses)])),
            "weight_entropy": float(np.mean([weight_entropy(w) for w in weights])),
            "train_accuracy": float(np.mean(preds == labels)),
        })
    return log


def evaluate_windowed(classifier: WindowClassifier, windows: np.ndarray) -> int:
    """Class of the window whose top softmax score is largest (ties: first window, lowest class)."""
    if len(windows) < 1:
        raise ContractError("video has no windows")
    probs = nx._stable_softmax(classifier.logits(np.asarray(windows)), axis=1)
    return select_max_window(probs)


def select_max_window(probs: np.ndarray) -> int:
    j = int(np.argmax(probs.max(axis=1)))
    return int(np.argmax(probs[j]))


def predict_windowed(classifier: WindowClassifier, windows: Sequence[np.ndarray]) -> np.ndarray:
    sizes = [len(w) for w in windows]
    probs = nx._stable_softmax(classifier.logits(np.concatenate(windows)), axis=1)
    parts = np.split(probs, np.cumsum(sizes)[:-1])
    return np.array([select_max_window(p) for p in parts])


def write_training_log(path, log: list[dict]) -> None:
    """CSV with one row per epoch; columns follow the first record's keys."""
    if not log:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(log[0]))
        writer.writeheader()
        for row in log:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# modality heads


@dataclass
class HeadConfig:
    kind: str = "audio-mlp"
    input_dim: int = 1582
    descriptor_dim: int = 279
    hidden_dim: int = 0  # LSTM hidden units; unused by the audio head
    num_classes: int = NUM_CLASSES
    keep_probability: float = 1.0
    batchnorm: bool = True
    bidirectional: bool = False
    num_layers: int = 1
    max_length: int = 272

    def __post_init__(self):
        if self.kind not in ("audio-mlp", "lstm-head"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "lstm-head" and self.hidden_dim < 1:
            raise ConfigError("lstm-head needs hidden_dim >= 1")
        if self.input_dim < 1 or self.descriptor_dim < 1:
            raise ConfigError("head dimensions must be positive")
        if not 0.0 < self.keep_probability <= 1.0:
            raise ConfigError("keep_probability must lie in (0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "HeadConfig":
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


AUDIO_HEAD = HeadConfig("audio-mlp", input_dim=1582, descriptor_dim=279)
VGG_LSTM_HEAD = HeadConfig("lstm-head", input_dim=4096, descriptor_dim=297, hidden_dim=2230, max_length=272)
C3D_LSTM_HEAD = HeadConfig("lstm-head", input_dim=4096, descriptor_dim=304, hidden_dim=1324, max_length=34)


@dataclass
class ModalityOutput:
    descriptor: np.ndarray
    scores: np.ndarray


class ModalityHead(Module):
    """Turns one modality's input into a compact descriptor and class scores.

    ``audio-mlp``: dense -> batch norm -> relu (descriptor) -> dropout -> dense.
    ``lstm-head``: LSTM final state -> dropout -> dense relu (descriptor) -> dense.
    Weight decay is flagged on the dense layers after the LSTM.
    """

    def __init__(self, config: HeadConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        c = config
        if c.kind == "audio-mlp":
            self.hidden = self.add_module("hidden", Dense(c.input_dim, c.descriptor_dim, "none", rng))
            self.bn = self.add_module("bn", BatchNorm(c.descriptor_dim)) if c.batchnorm else None
        else:
            self.lstm = self.add_module("lstm", Lstm(c.input_dim, c.hidden_dim, c.num_layers, c.bidirectional,
                                                     rng, c.max_length))
            self.hidden = self.add_module("hidden", Dense(self.lstm.output_size, c.descriptor_dim, "relu", rng,
                                                          decay=True))
        self.out = self.add_module("out", Dense(c.descriptor_dim, c.num_classes, "none", rng,
                                                decay=c.kind == "lstm-head"))

    def _check(self, sequences: Sequence[np.ndarray]) -> list[np.ndarray]:
        c = self.config
        seqs = []
        for s in sequences:
            s = np.asarray(s, dtype=np.float64)
            if s.ndim == 1:
                s = s[None, :]
            if s.ndim != 2 or s.shape[1] != c.input_dim:
                raise DimensionError(f"{c.kind} head expects {c.input_dim}-d descriptors, got shape {s.shape}")
            if c.kind == "audio-mlp" and s.shape[0] != 1:
                raise DimensionError(f"audio-mlp head expects a single vector per video, got {s.shape[0]} rows")
            seqs.append(s)
        return seqs

    def forward(self, sequences: Sequence[np.ndarray], train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Descriptors ``(batch, descriptor_dim)`` and logits ``(batch, classes)``."""
        c = self.config
        seqs = self._check(sequences)
        keep = c.keep_probability if train else 1.0
        if c.kind == "audio-mlp":
            x = Tensor(np.concatenate(seqs, axis=0))
            h = self.hidden(x)
            if self.bn is not None:
                h = batchnorm_forward(self.bn, h, "train" if train else "inference")
            desc = nx.relu(h)
            z = desc * dropout_mask(keep, desc.shape, rng) if keep < 1.0 else desc
        else:
            final = self.lstm.forward(seqs, keep, rng)
            desc = self.hidden(final)
            z = desc
        return desc, self.out(z)

    def hyperparameters(self) -> dict:
        return {"kind": "modality-head", **self.config.to_dict()}


def modality_head_forward(head: ModalityHead, inputs) -> ModalityOutput:
    """Inference-mode descriptor and scores for one video."""
    desc, logits = head.forward([inputs])
    return ModalityOutput(desc.data[0].copy(), nx._stable_softmax(logits.data[0]))


def head_outputs(head: ModalityHead, sequences: Sequence[np.ndarray], batch_size: int = 128
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Inference descriptors and scores for many videos."""
    descs, scores = [], []
    for i in range(0, len(sequences), batch_size):
        d, z = head.forward(sequences[i:i + batch_size])
        descs.append(d.data)
        scores.append(nx._stable_softmax(z.data, axis=1))
    return np.concatenate(descs), np.concatenate(scores)


def train_head(head: ModalityHead, sequences: Sequence[np.ndarray], labels, train: TrainConfig,
               rng: np.random.Generator) -> list[dict]:
    """Mini-batch cross-entropy training of a modality head; one log record per epoch."""
    labels = np.asarray(labels, dtype=int)
    if len(sequences) == 0:
        raise ContractError("cannot train on an empty dataset")
    opt = SGD(head, train.lr, train.momentum, train.weight_decay)
    min_batch = 2 if head.config.kind == "audio-mlp" and head.config.batchnorm else 1
    log = []
    for epoch in range(train.epochs):
        total = 0.0
        for idx in _batches(len(sequences), train.batch_size, rng, min_batch):
            _, logits = head.forward([sequences[i] for i in idx], train=True, rng=rng)
            loss = nx.softmax_cross_entropy(logits, labels[idx])
            nx.backward(loss, head.parameters())
            opt.step()
            total += loss.item() * len(idx)
        _, scores = head_outputs(head, sequences)
        log.append({"epoch": epoch, "loss": total / len(sequences),
                    "train_accuracy": float(np.mean(scores.argmax(axis=1) == labels))})
    return log


@dataclass
class WindowStageConfig:
    """Settings for turning frame sequences into weighted-window descriptors."""

    windowing: WindowingSpec = field(default_factory=WindowingSpec)
    hidden_dim: int = 64
    keep_probability: float = 1.0
    schedule: TemperatureSchedule | None = field(default_factory=TemperatureSchedule)
    phase1_epochs: int = 5
    phase2_epochs: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, obj: dict) -> "WindowStageConfig":
        obj = dict(obj)
        win = WindowingSpec(**obj.pop("windowing", {}))
        sched = obj.pop("schedule", {})
        schedule = None if sched is None else TemperatureSchedule(**sched)
        train = TrainConfig(**obj.pop("train", {}))
        return cls(windowing=win, schedule=schedule, train=train, **obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.schedule is None:
            out["schedule"] = None
        return out
