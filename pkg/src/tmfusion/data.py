"""Labels, feature files, manifests, class statistics and the synthetic generator."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError, LoadError

EMOTIONS = ("Angry", "Disgust", "Fear", "Happy", "Sad", "Neutral", "Surprise")
NUM_CLASSES = len(EMOTIONS)

# Per-class video counts of the AFEW 7.0 splits, in EMOTIONS order.
AFEW_CLASS_COUNTS = {
    "train": (133, 74, 81, 150, 117, 144, 74),
    "val": (64, 40, 46, 63, 61, 63, 46),
    "test": (99, 40, 70, 144, 80, 191, 29),
}

FEATURE_MAGIC = b"TMFF"
FEATURE_VERSION = 1
MANIFEST_SCHEMA = "tmf-manifest"
MANIFEST_VERSION = 1


def label_index(label) -> int:
    """Map an emotion name (case-insensitive) or index to its class index."""
    if isinstance(label, (int, np.integer)):
        if 0 <= int(label) < NUM_CLASSES:
            return int(label)
        raise LoadError(f"class index {label} outside [0, {NUM_CLASSES})")
    lowered = str(label).strip().lower()
    for i, name in enumerate(EMOTIONS):
        if name.lower() == lowered:
            return i
    raise LoadError(f"unknown emotion label {label!r}; expected one of {', '.join(EMOTIONS)}")


def label_name(index: int) -> str:
    return EMOTIONS[index]


# ---------------------------------------------------------------------------
# TMFF feature files


@dataclass
class FeatureFile:
    modality: str
    data: np.ndarray  # (T, d) float64 promoted from the float32 payload

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def encode_feature_file(sequence, modality: str) -> bytes:
    arr = np.asarray(sequence)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"feature sequence must be a non-empty (T, d) array, got {arr.shape}")
    name = modality.encode("utf-8")
    t, d = arr.shape
    header = FEATURE_MAGIC + struct.pack("<HH", FEATURE_VERSION, len(name)) + name + struct.pack("<II", d, t)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_feature_file(raw: bytes, source: str = "<bytes>") -> FeatureFile:
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{source}: truncated header")
    version, name_len = struct.unpack("<HH", raw[4:8])
    if version != FEATURE_VERSION:
        raise FormatError(f"{source}: unsupported feature file version {version}")
    end = 8 + name_len + 8
    if len(raw) < end:
        raise FormatError(f"{source}: truncated header")
    modality = raw[8:8 + name_len].decode("utf-8")
    d, t = struct.unpack("<II", raw[8 + name_len:end])
    if d < 1 or t < 1:
        raise FormatError(f"{source}: dimensions must be positive, got T={t} d={d}")
    payload = raw[end:]
    if len(payload) != 4 * t * d:
        raise FormatError(f"{source}: payload has {len(payload)} bytes, header implies {4 * t * d}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, d)
    return FeatureFile(modality, data)


def write_feature_file(path, sequence, modality: str) -> None:
    Path(path).write_bytes(encode_feature_file(sequence, modality))


def read_feature_file(path) -> FeatureFile:
    return decode_feature_file(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    video_id: str
    label: int
    features: dict[str, Path]


@dataclass
class DatasetManifest:
    split: str
    modalities: dict[str, int]
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    @property
    def video_ids(self) -> list[str]:
        return [e.video_id for e in self.entries]

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES) if self.entries else np.zeros(NUM_CLASSES, int)


def write_manifest(path, manifest: DatasetManifest) -> None:
    """JSON-lines manifest: a header object, then one object per video."""
    path = Path(path)
    header = {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION,
              "split": manifest.split, "modalities": manifest.modalities}
    lines = [json.dumps(header, sort_keys=True)]
    for e in manifest.entries:
        feats = {m: Path(p).as_posix() for m, p in e.features.items()}
        lines.append(json.dumps({"video_id": e.video_id, "label": EMOTIONS[e.label], "features": feats},
                                sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest {path} does not exist")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise LoadError(f"{path}: empty manifest (no header line)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}:1: {exc}") from None
    if header.get("schema") != MANIFEST_SCHEMA:
        raise LoadError(f"{path}: not a {MANIFEST_SCHEMA} file")
    if header.get("version") != MANIFEST_VERSION:
        raise LoadError(f"{path}: unsupported manifest version {header.get('version')}")
    modalities = {str(k): int(v) for k, v in header.get("modalities", {}).items()}
    root = path.parent
    seen: set[str] = set()
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
            vid = str(obj["video_id"])
            label = label_index(obj["label"])
            feats = {str(m): Path(p) for m, p in obj.get("features", {}).items()}
        except (json.JSONDecodeError, KeyError) as exc:
            raise LoadError(f"{path}:{lineno}: malformed entry ({exc})") from None
        except LoadError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from None
        if vid in seen:
            raise LoadError(f"{path}:{lineno}: duplicate video_id {vid!r}")
        seen.add(vid)
        unknown = set(feats) - set(modalities)
        if unknown:
            raise LoadError(f"{path}:{lineno}: undeclared modalities {sorted(unknown)}")
        if check_files:
            for m, p in feats.items():
                if not (root / p).is_file():
                    raise LoadError(f"{path}:{lineno}: feature file {p} for {m!r} does not exist")
        entries.append(ManifestEntry(vid, label, feats))
    return DatasetManifest(str(header.get("split", "")), modalities, entries, root)


@dataclass
class VideoSample:
    video_id: str
    label: int
    sequences: dict[str, np.ndarray]


def load_samples(manifest: DatasetManifest, modalities: Iterable[str] | None = None) -> list[VideoSample]:
    """Read every feature file referenced by ``manifest``."""
    wanted = list(modalities) if modalities is not None else list(manifest.modalities)
    samples = []
    for e in manifest.entries:
        seqs = {}
        for m in wanted:
            if m not in e.features:
                raise LoadError(f"video {e.video_id} has no features for modality {m!r}")
            ff = read_feature_file(manifest.root / e.features[m])
            declared = manifest.modalities[m]
            if ff.dim != declared:
                raise LoadError(f"video {e.video_id}, modality {m!r}: dimension {ff.dim}, manifest declares {declared}")
            seqs[m] = ff.data
        samples.append(VideoSample(e.video_id, e.label, seqs))
    return samples


# ---------------------------------------------------------------------------
# class statistics


@dataclass
class ClassDistribution:
    counts: np.ndarray
    total: int

    @property
    def percentages(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(len(self.counts))
        return 100.0 * self.counts / self.total

    def rows(self) -> list[tuple[str, int, float]]:
        return [(EMOTIONS[i], int(c), float(p)) for i, (c, p) in enumerate(zip(self.counts, self.percentages))]

    def format_table(self) -> str:
        lines = [f"{name:<9} {count:>5} ({pct:.1f} %)" for name, count, pct in self.rows()]
        lines.append(f"{'Total':<9} {self.total:>5}")
        return "\n".join(lines)


def class_distribution(labels) -> ClassDistribution:
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=NUM_CLASSES) if labels.size else np.zeros(NUM_CLASSES, int)
    return ClassDistribution(counts, int(labels.size))


def stratified_split(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split indices so each class contributes ``round(fraction * n_c)`` to the first part."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("split fraction must lie in [0, 1]")
    labels = np.asarray(labels, dtype=int)
    first, second = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        first.append(idx[:k])
        second.append(idx[k:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.array([], dtype=int)  # noqa: E731
    return cat(first), cat(second)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticModality:
    name: str
    dim: int
    informative: list[int]
    kind: str = "sequence"  # "sequence" of frames or a single "vector"
    min_length: int = 16
    max_length: int = 64
    window_length: int = 16
    signal_fraction: float = 1.0

    def validate(self) -> None:
        if self.kind not in ("sequence", "vector"):
            raise ConfigError(f"modality {self.name}: kind must be 'sequence' or 'vector'")
        if self.dim < 1:
            raise ConfigError(f"modality {self.name}: dim must be positive")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ConfigError(f"modality {self.name}: signal_fraction must lie in (0, 1]")
        if self.kind == "sequence" and not 1 <= self.min_length <= self.max_length:
            raise ConfigError(f"modality {self.name}: need 1 <= min_length <= max_length")
        if self.window_length < 1:
            raise ConfigError(f"modality {self.name}: window_length must be positive")
        bad = [c for c in self.informative if not 0 <= c < NUM_CLASSES]
        if bad:
            raise ConfigError(f"modality {self.name}: informative classes {bad} out of range")


@dataclass
class SyntheticSpec:
    modalities: list[SyntheticModality]
    noise: float = 1.0
    seed: int = 0
    counts: dict[str, list[int]] = field(default_factory=lambda: {"train": [10] * 7, "val": [5] * 7, "test": [5] * 7})
    prototype_scale: float = 1.0

    def __post_init__(self):
        self.counts = {k: _expand_counts(v) for k, v in self.counts.items()}

    def validate(self) -> None:
        if not self.modalities:
            raise ConfigError("synthetic spec needs at least one modality")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError("modality names must be unique")
        for m in self.modalities:
            m.validate()
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")
        for split, counts in self.counts.items():
            if len(counts) != NUM_CLASSES or any(c < 0 for c in counts) or sum(counts) < 1:
                raise ConfigError(f"split {split}: need {NUM_CLASSES} non-negative class counts, total >= 1")

    @property
    def covers_all_classes(self) -> bool:
        covered = set().union(*(set(m.informative) for m in self.modalities))
        return covered == set(range(NUM_CLASSES))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        obj = dict(obj)
        mods = [SyntheticModality(**m) for m in obj.pop("modalities")]
        spec = cls(modalities=mods, **obj)
        spec.validate()
        return spec


def complementary_spec(noise: float = 2.0, seed: int = 0, counts: dict | None = None) -> SyntheticSpec:
    """Three modalities that each see only part of the label set.

    ``audio`` (a single 32-d vector) separates classes 0-3, ``frames`` (8-24
    frames of 16-d) separates classes 3-6 and ``clips`` (a 16-d vector) only
    classes 1 and 5. No modality alone can exceed 5/7 accuracy, while all
    three together identify every class.
    """
    mods = [SyntheticModality("audio", 32, [0, 1, 2, 3], "vector"),
            SyntheticModality("frames", 16, [3, 4, 5, 6], "sequence", min_length=8, max_length=24),
            SyntheticModality("clips", 16, [1, 5], "vector")]
    kwargs = {} if counts is None else {"counts": counts}
    return SyntheticSpec(mods, noise=noise, seed=seed, **kwargs)


def _expand_counts(value) -> list[int]:
    """Total or per-class counts; totals are spread evenly, remainder to low indices."""
    if isinstance(value, str):
        if value.lower().startswith("afew:"):
            return list(AFEW_CLASS_COUNTS[value.split(":", 1)[1]])
        raise ConfigError(f"unknown count preset {value!r}")
    if isinstance(value, (int, np.integer)):
        base, rem = divmod(int(value), NUM_CLASSES)
        return [base + (1 if i < rem else 0) for i in range(NUM_CLASSES)]
    return [int(v) for v in value]


_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


def _split_code(split: str) -> int:
    return _SPLIT_CODES.get(split, 100 + sum(split.encode()))


def prototypes(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Per modality an ``(NUM_CLASSES + 1, dim)`` array; the last row is the background."""
    out = {}
    for k, m in enumerate(spec.modalities):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919, k]))
        out[m.name] = spec.prototype_scale * rng.standard_normal((NUM_CLASSES + 1, m.dim))
    return out


def signal_window_count(num_windows: int, fraction: float) -> int:
    return max(1, min(num_windows, int(round(fraction * num_windows))))


@dataclass
class SyntheticVideo:
    video_id: str
    label: int
    sequences: dict[str, np.ndarray]
    signal_windows: dict[str, list[int]]

    def as_sample(self) -> VideoSample:
        return VideoSample(self.video_id, self.label, self.sequences)


def _generate_video(spec: SyntheticSpec, protos, split: str, index: int, label: int) -> SyntheticVideo:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _split_code(split), index]))
    seqs, signal = {}, {}
    for m in spec.modalities:
        length = 1 if m.kind == "vector" else int(rng.integers(m.min_length, m.max_length + 1))
        wl = 1 if m.kind == "vector" else m.window_length
        n_win = math.ceil(length / wl)
        k = signal_window_count(n_win, m.signal_fraction)
        chosen = np.sort(rng.choice(n_win, size=k, replace=False))
        frame_class = np.full(length, NUM_CLASSES)
        if label in m.informative:
            for j in chosen:
                frame_class[j * wl:(j + 1) * wl] = label
        noise = rng.standard_normal((length, m.dim))
        # round-trip through float32 so in-memory samples equal what a TMFF file stores
        seqs[m.name] = (protos[m.name][frame_class] + spec.noise * noise).astype(np.float32).astype(np.float64)
        signal[m.name] = [int(j) for j in chosen] if label in m.informative else []
    return SyntheticVideo(f"{split}_{index:05d}", label, seqs, signal)


def sample_split(spec: SyntheticSpec, split: str, counts=None) -> list[SyntheticVideo]:
    """Generate one split in memory; video ``i`` depends only on (seed, split, i)."""
    spec.validate()
    counts = _expand_counts(counts if counts is not None else spec.counts[split])
    labels = np.repeat(np.arange(NUM_CLASSES), counts)
    perm_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _split_code(split), 2**31]))
    labels = labels[perm_rng.permutation(labels.size)]
    protos = prototypes(spec)
    return [_generate_video(spec, protos, split, i, int(y)) for i, y in enumerate(labels)]


@dataclass
class SyntheticResult:
    manifests: dict[str, Path]
    oracle: Path


def generate_synthetic(spec: SyntheticSpec, out_dir, counts: dict | None = None) -> SyntheticResult:
    """Materialise every split as TMFF files plus JSON-lines manifests and an oracle record."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {k: _expand_counts(v) for k, v in (counts or spec.counts).items()}
    oracle = {"spec": spec.to_dict(), "splits": {}}
    oracle["spec"]["counts"] = counts
    manifests = {}
    dims = {m.name: m.dim for m in spec.modalities}
    for split, split_counts in counts.items():
        feat_dir = out_dir / "features" / split
        feat_dir.mkdir(parents=True, exist_ok=True)
        videos = sample_split(spec, split, split_counts)
        entries = []
        records = []
        for v in videos:
            feats = {}
            for name, seq in v.sequences.items():
                rel = Path("features") / split / f"{v.video_id}.{name}.tmff"
                write_feature_file(out_dir / rel, seq, name)
                feats[name] = rel
            entries.append(ManifestEntry(v.video_id, v.label, feats))
            records.append({"video_id": v.video_id, "label": v.label, "signal_windows": v.signal_windows})
        path = out_dir / f"{split}.jsonl"
        write_manifest(path, DatasetManifest(split, dims, entries, out_dir))
        manifests[split] = path
        oracle["splits"][split] = records
    oracle_path = out_dir / "oracle.json"
    oracle_path.write_text(json.dumps(oracle, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return SyntheticResult(manifests, oracle_path)


def load_oracle(path) -> tuple[SyntheticSpec, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return SyntheticSpec.from_dict(obj["spec"]), obj["splits"]


# ---------------------------------------------------------------------------
# Bayes oracle


def _log_elementary_symmetric(log_r: np.ndarray, k: int) -> float:
    """``log e_k(exp(log_r))`` by the usual subset-size recursion, in log space."""
    e = np.full(k + 1, -np.inf)
    e[0] = 0.0
    for j, lr in enumerate(log_r):
        for i in range(min(j + 1, k), 0, -1):
            e[i] = np.logaddexp(e[i], e[i - 1] + lr)
    return float(e[k])


def modality_log_likelihoods(spec: SyntheticSpec, modality: str, sequence: np.ndarray,
                             protos: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Log-likelihood of ``sequence`` under each class, relative to all-background.

    Signal windows are a uniformly random subset of fixed size, so the class
    likelihood averages the window likelihood ratios over all such subsets.
    """
    protos = protos if protos is not None else prototypes(spec)
    m = next((x for x in spec.modalities if x.name == modality), None)
    if m is None:
        raise ContractError(f"modality {modality!r} is not part of the synthetic spec")
    p = protos[modality]
    x = np.asarray(sequence, dtype=np.float64)
    sigma2 = max(spec.noise, 1e-6) ** 2
    bg = p[NUM_CLASSES]
    wl = 1 if m.kind == "vector" else m.window_length
    n_win = math.ceil(x.shape[0] / wl)
    k = signal_window_count(n_win, m.signal_fraction)
    d_bg = ((x - bg) ** 2).sum(axis=1)
    out = np.zeros(NUM_CLASSES)
    log_subsets = math.lgamma(n_win + 1) - math.lgamma(k + 1) - math.lgamma(n_win - k + 1)
    for c in m.informative:
        frame_lr = (d_bg - ((x - p[c]) ** 2).sum(axis=1)) / (2.0 * sigma2)
        win_lr = np.add.reduceat(frame_lr, np.arange(0, x.shape[0], wl))
        out[c] = _log_elementary_symmetric(win_lr, k) - log_subsets
    return out


def bayes_posteriors(spec: SyntheticSpec, samples: Sequence, modalities: Iterable[str] | None = None,
                     prior=None) -> np.ndarray:
    """Posterior class probabilities given the selected modalities, one row per sample."""
    names = list(modalities) if modalities is not None else [m.name for m in spec.modalities]
    protos = prototypes(spec)
    if prior is None:
        labels = np.array([s.label for s in samples])
        prior = np.bincount(labels, minlength=NUM_CLASSES) / len(labels)
    with np.errstate(divide="ignore"):
        log_prior = np.log(np.asarray(prior, dtype=np.float64))
    rows = []
    for s in samples:
        ll = log_prior.copy()
        for name in names:
            ll = ll + modality_log_likelihoods(spec, name, s.sequences[name], protos)
        ll -= ll.max()
        p = np.exp(ll)
        rows.append(p / p.sum())
    return np.array(rows)


def bayes_accuracy(spec: SyntheticSpec, samples: Sequence, modalities: Iterable[str] | None = None,
                   method: str = "rule", prior=None) -> float:
    """Accuracy of the Bayes classifier on ``samples``.

    ``rule`` scores the arg-max decisions against the labels; ``expected``
    averages the maximal posterior, an unbiased estimate of the Bayes accuracy.
    """
    post = bayes_posteriors(spec, samples, modalities, prior)
    if method == "expected":
        return float(post.max(axis=1).mean())
    if method != "rule":
        raise ConfigError(f"unknown Bayes accuracy method {method!r}")
    labels = np.array([s.label for s in samples])
    return float((post.argmax(axis=1) == labels).mean())
