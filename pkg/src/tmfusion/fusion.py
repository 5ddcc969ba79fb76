"""Multimodal fusion of per-modality descriptors and scores.

Score-level baselines (majority, mean, max), a simplex-searched weighted
mean, a block-structured fully connected layer trained with modality dropout
(ModDrop), and Score Trees, which mix each modality's feature-based
prediction with the other modalities' scores before a final classifier.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import NUM_CLASSES
from .errors import ConfigError, ContractError, DimensionError
from .layers import SGD, Dense, Module
from .numerics import Tensor


@dataclass
class ModalitySet:
    """Frozen per-video outputs of ``n`` modality heads."""

    names: list[str]
    descriptors: list[np.ndarray]  # each (videos, dim_k)
    scores: list[np.ndarray]  # each (videos, classes)
    video_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.names) == len(self.descriptors) == len(self.scores)):
            raise DimensionError("names, descriptors and scores must list the same modalities")
        counts = {len(d) for d in self.descriptors} | {len(s) for s in self.scores}
        if len(counts) > 1:
            raise DimensionError(f"modalities disagree on the number of videos: {sorted(counts)}")

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def dims(self) -> list[int]:
        return [d.shape[1] for d in self.descriptors]

    def __len__(self) -> int:
        return len(self.scores[0]) if self.scores else 0

    def subset(self, idx) -> "ModalitySet":
        ids = [self.video_ids[i] for i in idx] if self.video_ids else []
        return ModalitySet(self.names, [d[idx] for d in self.descriptors], [s[idx] for s in self.scores], ids)

    def score_tensor(self) -> np.ndarray:
        """Scores stacked as ``(modalities, videos, classes)``."""
        return np.stack(self.scores)


# ---------------------------------------------------------------------------
# score-level fusion


def _as_score_stack(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64) if not isinstance(scores, list) else None
    if s is None:
        shapes = {np.shape(x) for x in scores}
        if len(shapes) > 1:
            raise DimensionError(f"modalities disagree on score shapes: {sorted(shapes)}")
        s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, None, :]
    if s.ndim != 3:
        raise DimensionError(f"expected (modalities, [videos,] classes) scores, got shape {s.shape}")
    if s.shape[0] < 2:
        raise ContractError("fusion needs at least two modalities")
    return s


def fuse_baseline(scores, mode: str = "mean") -> np.ndarray:
    """Predicted classes from per-modality score vectors.

    ``scores`` is ``(modalities, classes)`` for one video or
    ``(modalities, videos, classes)``. Majority ties go to the tied class with
    the highest mean score, then to the lowest index.
    """
    s = _as_score_stack(scores)
    single = np.ndim(scores) == 2 if not isinstance(scores, list) else np.ndim(scores[0]) == 1
    n_mod, n_vid, n_cls = s.shape
    if mode == "mean":
        pred = s.mean(axis=0).argmax(axis=1)
    elif mode == "max":
        pred = s.max(axis=0).argmax(axis=1)
    elif mode == "majority":
        votes = np.zeros((n_vid, n_cls))
        for k in range(n_mod):
            votes[np.arange(n_vid), s[k].argmax(axis=1)] += 1
        mean = s.mean(axis=0)
        pred = np.empty(n_vid, dtype=int)
        for i in range(n_vid):
            tied = np.flatnonzero(votes[i] == votes[i].max())
            pred[i] = tied[np.argmax(mean[i, tied])]
    else:
        raise ConfigError(f"unknown baseline fusion mode {mode!r}")
    return int(pred[0]) if single else pred


def baseline_scores(scores, mode: str) -> np.ndarray:
    """Score vector reported alongside a baseline prediction (mean, or per-class max)."""
    s = _as_score_stack(scores)
    return s.max(axis=0) if mode == "max" else s.mean(axis=0)


def _check_simplex(weights) -> np.ndarray:
    lam = np.asarray(weights, dtype=np.float64)
    if np.any(lam < -1e-9) or abs(lam.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fusion weights must lie on the simplex, got {lam}")
    return lam


def fuse_weighted_mean(scores, weights) -> tuple[np.ndarray, np.ndarray]:
    """``sum_k weights[k] * scores[k]`` and its arg-max."""
    s = _as_score_stack(scores)
    lam = _check_simplex(weights)
    if lam.shape != (s.shape[0],):
        raise DimensionError(f"{s.shape[0]} modalities but {lam.size} weights")
    fused = np.tensordot(lam, s, axes=1)
    single = not isinstance(scores, list) and np.ndim(scores) == 2 or isinstance(scores, list) and np.ndim(scores[0]) == 1
    pred = fused.argmax(axis=1)
    return (fused[0], int(pred[0])) if single else (fused, pred)


def simplex_grid(n: int, step: float) -> np.ndarray:
    """All weight vectors on the simplex whose entries are multiples of ``step``."""
    parts = 1.0 / step
    k = int(round(parts))
    if step <= 0 or abs(parts - k) > 1e-9:
        raise ConfigError(f"grid step {step} does not divide 1")
    rows = [c for c in itertools.product(range(k + 1), repeat=n - 1) if sum(c) <= k]
    return np.array([list(c) + [k - sum(c)] for c in rows], dtype=np.float64) / k


def search_weighted_mean(outputs: ModalitySet | np.ndarray, labels, step: float = 0.05
                         ) -> tuple[np.ndarray, float]:
    """Grid weights maximising accuracy; ties prefer weights nearest uniform, then the smallest tuple."""
    s = outputs.score_tensor() if isinstance(outputs, ModalitySet) else _as_score_stack(outputs)
    labels = np.asarray(labels, dtype=int)
    if s.shape[1] == 0:
        raise ContractError("weighted-mean search needs a non-empty validation set")
    grid = simplex_grid(s.shape[0], step)
    fused = np.einsum("gk,kvc->gvc", grid, s)
    acc = (fused.argmax(axis=2) == labels[None, :]).mean(axis=1)
    uniform = np.full(s.shape[0], 1.0 / s.shape[0])
    dist = np.linalg.norm(grid - uniform, axis=1)
    best = max(range(len(grid)), key=lambda g: (acc[g], -round(dist[g], 12), tuple(-grid[g])))
    return grid[best], float(acc[best])


# ---------------------------------------------------------------------------
# ModDrop


def split_hidden(total: int, dims: Sequence[int]) -> list[int]:
    """Hidden units per modality, proportional to descriptor size (largest remainders)."""
    dims = np.asarray(dims, dtype=np.float64)
    if total < len(dims):
        raise ConfigError("need at least one hidden unit per modality")
    raw = total * dims / dims.sum()
    sizes = np.maximum(np.floor(raw).astype(int), 1)
    while sizes.sum() < total:
        sizes[np.argmax(raw - sizes)] += 1
    while sizes.sum() > total:
        sizes[np.argmax(sizes - raw)] -= 1
    return [int(x) for x in sizes]


class ModDropFusion(Module):
    """Block-partitioned first layer over concatenated descriptors, then a dense score layer.

    Row block ``k`` of the first weight matrix produces the hidden units of
    modality ``k``; column block ``l`` reads modality ``l``. Off-diagonal
    blocks carry the cross-modal terms.
    """

    def __init__(self, dims: Sequence[int], hidden: int = 256, drop_probability: float | Sequence[float] = 0.2,
                 num_classes: int = NUM_CLASSES, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dims = [int(d) for d in dims]
        if len(self.dims) < 2:
            raise ContractError("fusion needs at least two modalities")
        self.hidden_sizes = split_hidden(hidden, self.dims)
        p = np.broadcast_to(np.asarray(drop_probability, dtype=np.float64), (len(self.dims),)).copy()
        if np.any(p < 0) or np.any(p >= 1):
            raise ConfigError("modality drop probabilities must lie in [0, 1)")
        self.drop_probability = p
        self.num_classes = num_classes
        self.first = self.add_module("first", Dense(sum(self.dims), hidden, "relu", rng))
        self.second = self.add_module("second", Dense(hidden, num_classes, "none", rng))
        self.row_bounds = np.concatenate([[0], np.cumsum(self.hidden_sizes)])
        self.col_bounds = np.concatenate([[0], np.cumsum(self.dims)])

    @property
    def n(self) -> int:
        return len(self.dims)

    def block_slices(self, k: int, l: int) -> tuple[slice, slice]:
        return (slice(self.row_bounds[k], self.row_bounds[k + 1]), slice(self.col_bounds[l], self.col_bounds[l + 1]))

    def block(self, k: int, l: int) -> np.ndarray:
        return self.first.weight.data[self.block_slices(k, l)]

    def block_masses(self) -> tuple[float, float]:
        """Summed Frobenius norms of the (diagonal, off-diagonal) blocks."""
        diag = off = 0.0
        for k in range(self.n):
            for l in range(self.n):
                nrm = float(np.linalg.norm(self.block(k, l)))
                if k == l:
                    diag += nrm
                else:
                    off += nrm
        return diag, off

    def hyperparameters(self) -> dict:
        return {"kind": "moddrop", "dims": self.dims, "hidden": int(sum(self.hidden_sizes)),
                "drop_probability": [float(x) for x in self.drop_probability], "num_classes": self.num_classes}

    def draw_modality_mask(self, batch: int, rng: np.random.Generator, max_redraws: int = 1000) -> np.ndarray:
        """Per-video keep mask over modalities; all-dropped rows are redrawn."""
        keep = rng.random((batch, self.n)) >= self.drop_probability
        for _ in range(max_redraws):
            empty = ~keep.any(axis=1)
            if not empty.any():
                return keep
            keep[empty] = rng.random((int(empty.sum()), self.n)) >= self.drop_probability
        raise ContractError("could not draw a modality mask keeping at least one modality")

    def hidden_units(self, descriptors: Sequence[np.ndarray], keep: np.ndarray | None = None) -> Tensor:
        ds = [np.atleast_2d(np.asarray(d, dtype=np.float64)) for d in descriptors]
        if [d.shape[1] for d in ds] != self.dims:
            raise DimensionError(f"descriptor dims {[d.shape[1] for d in ds]} do not match blocks {self.dims}")
        if keep is not None:
            ds = [d * keep[:, k:k + 1] for k, d in enumerate(ds)]
        return self.first(Tensor(np.concatenate(ds, axis=1)))

    def logits(self, descriptors: Sequence[np.ndarray], train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        keep = None
        if train and np.any(self.drop_probability > 0):
            batch = np.atleast_2d(descriptors[0]).shape[0]
            keep = self.draw_modality_mask(batch, rng)
        return self.second(self.hidden_units(descriptors, keep))


def moddrop_forward(model: ModDropFusion, descriptors: Sequence[np.ndarray], mode: str = "inference",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Fused class probabilities; ``train`` mode applies modality dropout."""
    if mode not in ("train", "inference"):
        raise ConfigError(f"unknown mode {mode!r}")
    z = model.logits(descriptors, train=mode == "train", rng=rng)
    return nx._stable_softmax(z.data, axis=-1)


def moddrop_penalty(model: ModDropFusion, gamma: float) -> Tensor:
    """``gamma`` times the summed Frobenius norms of the off-diagonal weight blocks."""
    if gamma < 0:
        raise ConfigError("penalty coefficient must be non-negative")
    terms = [nx.frobenius_norm(model.first.weight[model.block_slices(k, l)])
             for k in range(model.n) for l in range(model.n) if k != l]
    return nx.scale(nx.tsum(nx.stack(terms)), gamma)


def prox_offdiagonal(model: ModDropFusion, threshold: float) -> None:
    """Block soft-thresholding: the proximal map of ``threshold * sum ||W_kl||_F`` (k != l)."""
    w = model.first.weight.data
    for k in range(model.n):
        for l in range(model.n):
            if k == l:
                continue
            sl = model.block_slices(k, l)
            nrm = np.linalg.norm(w[sl])
            w[sl] *= 0.0 if nrm <= threshold else 1.0 - threshold / nrm


@dataclass
class GammaSchedule:
    high: float = 10.0
    phase_epochs: int = 10
    decay: float = 0.5
    low: float = 1e-4

    def __post_init__(self):
        if self.high < 0 or self.low < 0 or not 0 < self.decay <= 1 or self.phase_epochs < 0:
            raise ConfigError("invalid off-diagonal penalty schedule")

    def __call__(self, epoch: int) -> float:
        return gamma_schedule(epoch, self)


def gamma_schedule(t: int, schedule: GammaSchedule | None = None) -> float:
    """Constant ``high`` for ``t < phase_epochs``, then geometric decay floored at ``low``."""
    s = schedule or GammaSchedule()
    if t < 0:
        raise ContractError("epoch must be non-negative")
    if t < s.phase_epochs:
        return s.high
    return max(s.high * s.decay ** (t - s.phase_epochs), s.low)


# ---------------------------------------------------------------------------
# Score Trees


class ScoreTreeFusion(Module):
    """Per-modality feature classifier, per-modality mixer with the others' scores, final classifier.

    Every stage ends in a softmax; for ``n`` modalities each mixer reads
    ``classes * n`` values and the final classifier reads ``classes * n``.
    """

    def __init__(self, dims: Sequence[int], num_classes: int = NUM_CLASSES, feature_hidden: int = 0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dims = [int(d) for d in dims]
        if len(self.dims) < 2:
            raise ContractError("fusion needs at least two modalities")
        self.num_classes = num_classes
        self.feature_hidden = feature_hidden
        c, n = num_classes, len(self.dims)
        self.feature: list[list[Dense]] = []
        self.mixers: list[Dense] = []
        for k, d in enumerate(self.dims):
            if feature_hidden:
                stack = [Dense(d, feature_hidden, "relu", rng), Dense(feature_hidden, c, "none", rng)]
            else:
                stack = [Dense(d, c, "none", rng)]
            for j, layer in enumerate(stack):
                self.add_module(f"feature{k}_{j}", layer)
            self.feature.append(stack)
        for k in range(n):
            self.mixers.append(self.add_module(f"mixer{k}", Dense(c * n, c, "none", rng)))
        self.final = self.add_module("final", Dense(c * n, c, "none", rng))
        self.last_shapes: dict[str, list[int]] = {}

    @property
    def n(self) -> int:
        return len(self.dims)

    def hyperparameters(self) -> dict:
        return {"kind": "score-tree", "dims": self.dims, "num_classes": self.num_classes,
                "feature_hidden": self.feature_hidden}

    def logits(self, descriptors: Sequence[np.ndarray], scores: Sequence[np.ndarray]) -> Tensor:
        if len(descriptors) != self.n or len(scores) != self.n:
            raise DimensionError(f"model built for {self.n} modalities, got {len(descriptors)} / {len(scores)}")
        ds = [np.atleast_2d(np.asarray(d, dtype=np.float64)) for d in descriptors]
        ss = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in scores]
        for k, (d, s) in enumerate(zip(ds, ss)):
            if d.shape[1] != self.dims[k]:
                raise DimensionError(f"feature stage, modality {k}: expected {self.dims[k]}-d, got {d.shape[1]}")
            if s.shape[1] != self.num_classes:
                raise DimensionError(f"mixer stage, modality {k}: expected {self.num_classes} scores, got {s.shape[1]}")
        branch = []
        mixer_dims = []
        for k in range(self.n):
            h = Tensor(ds[k])
            for layer in self.feature[k]:
                h = layer(h)
            f = nx.softmax(h, axis=-1)
            mixed = nx.concat([f] + [Tensor(ss[l]) for l in range(self.n) if l != k], axis=1)
            mixer_dims.append(mixed.shape[1])
            branch.append(nx.softmax(self.mixers[k](mixed), axis=-1))
        joined = nx.concat(branch, axis=1)
        self.last_shapes = {"mixer_inputs": mixer_dims, "final_input": [joined.shape[1]]}
        return self.final(joined)


def score_tree_forward(model: ScoreTreeFusion, descriptors: Sequence[np.ndarray],
                       scores: Sequence[np.ndarray]) -> np.ndarray:
    return nx._stable_softmax(model.logits(descriptors, scores).data, axis=-1)


# ---------------------------------------------------------------------------
# training


@dataclass
class FusionTrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    gamma: GammaSchedule = field(default_factory=GammaSchedule)
    penalty_update: str = "proximal"  # or "gradient"

    def __post_init__(self):
        if self.penalty_update not in ("proximal", "gradient"):
            raise ConfigError("penalty_update must be 'proximal' or 'gradient'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def fusion_logits(model, outputs: ModalitySet, idx=None, train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    sel = (lambda a: a) if idx is None else (lambda a: a[idx])
    ds = [sel(d) for d in outputs.descriptors]
    if isinstance(model, ModDropFusion):
        return model.logits(ds, train=train, rng=rng)
    if isinstance(model, ScoreTreeFusion):
        return model.logits(ds, [sel(s) for s in outputs.scores])
    raise ConfigError(f"unsupported fusion model {type(model).__name__}")


def fusion_predict(model, outputs: ModalitySet) -> np.ndarray:
    """Inference-mode fused class probabilities."""
    return nx._stable_softmax(fusion_logits(model, outputs).data, axis=-1)


def train_fusion(model, outputs: ModalitySet, labels, config: FusionTrainConfig | None = None,
                 rng: np.random.Generator | None = None, use_penalty: bool = True) -> list[dict]:
    """Cross-entropy training on frozen modality outputs.

    For ModDrop the off-diagonal penalty weight follows ``config.gamma``. With
    ``penalty_update="proximal"`` the penalty is applied after each optimizer
    step as block soft-thresholding; with ``"gradient"`` its subgradient is
    added to the loss.
    """
    config = config or FusionTrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.asarray(labels, dtype=int)
    if len(outputs) == 0:
        raise ContractError("cannot train fusion on an empty set")
    is_moddrop = isinstance(model, ModDropFusion)
    opt = SGD(model, config.lr, config.momentum, config.weight_decay)
    log = []
    n = len(outputs)
    for epoch in range(config.epochs):
        gamma = config.gamma(epoch) if (is_moddrop and use_penalty) else 0.0
        total = 0.0
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            z = fusion_logits(model, outputs, idx, train=True, rng=rng)
            loss = nx.softmax_cross_entropy(z, labels[idx])
            if gamma and config.penalty_update == "gradient":
                loss = loss + moddrop_penalty(model, gamma)
            nx.backward(loss, model.parameters())
            opt.step()
            if gamma and config.penalty_update == "proximal":
                prox_offdiagonal(model, config.lr * gamma)
            total += loss.item() * len(idx)
        probs = fusion_predict(model, outputs)
        row = {"epoch": epoch, "loss": total / n, "train_accuracy": float(np.mean(probs.argmax(1) == labels))}
        if is_moddrop:
            diag, off = model.block_masses()
            row.update({"gamma": gamma, "penalty": float(moddrop_penalty(model, gamma).item()),
                        "diagonal_mass": diag, "offdiagonal_mass": off})
        log.append(row)
    return log


# ---------------------------------------------------------------------------
# complementarity


def row_normalize(confusion) -> np.ndarray:
    c = np.asarray(confusion, dtype=np.float64)
    sums = c.sum(axis=1, keepdims=True)
    return np.divide(c, sums, out=np.zeros_like(c), where=sums > 0)


def confusion_dissimilarity(a, b) -> float:
    """Cosine dissimilarity ``1 - <A,B>_F / (|A|_F |B|_F)`` of two row-normalised confusions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"confusion matrices must be square and equal-shaped, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("confusion dissimilarity of a zero matrix")
    value = 1.0 - float(np.sum(a * b)) / (na * nb)
    return min(max(value, 0.0), 1.0)


@dataclass
class CandidateModel:
    name: str
    accuracy: float
    confusion: np.ndarray  # row-normalised


def select_complementary(models: Sequence[CandidateModel], k: int, accuracy_weight: float = 1.0,
                         dissimilarity_weight: float = 1.0) -> list[dict]:
    """Greedy pick: best accuracy first, then best ``acc + mean dissimilarity to the chosen``.

    Returns one rationale record per chosen model, in selection order.
    Remaining ties are broken by name so the result does not depend on input order.
    """
    if k < 1 or k > len(models):
        raise ContractError(f"cannot select {k} of {len(models)} models")
    chosen: list[CandidateModel] = []
    rationale = []
    pool = list(models)
    while len(chosen) < k:
        def utility(m: CandidateModel) -> tuple[float, float]:
            dis = np.mean([confusion_dissimilarity(m.confusion, c.confusion) for c in chosen]) if chosen else 0.0
            return accuracy_weight * m.accuracy + dissimilarity_weight * dis, dis

        scored = [(utility(m), m) for m in pool]
        (best_u, best_d), best = max(scored, key=lambda t: (t[0][0], _neg_name(t[1].name)))
        chosen.append(best)
        pool.remove(best)
        rationale.append({"rank": len(chosen), "model": best.name, "accuracy": best.accuracy,
                          "mean_dissimilarity": float(best_d), "utility": float(best_u)})
    return rationale


def _neg_name(name: str) -> tuple:
    # smaller names win ties under max()
    return tuple(-ord(ch) for ch in name) + (0,)
