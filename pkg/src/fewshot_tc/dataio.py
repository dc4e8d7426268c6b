"""Flow samples, dataset files, class-disjoint partitioning and a synthetic generator.

A dataset file is UTF-8 CSV with header ``flow_id,label,f_0_0,...,f_{P-1}_{F-1}``
(packet-major), plus a sidecar ``<stem>.meta.json`` holding the profile and
the dense-id -> original-label mapping.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass(frozen=True)
class Profile:
    packets: int
    features: int
    feature_names: tuple = ()

    def __post_init__(self):
        if self.packets < 1 or self.features < 1:
            raise ConfigError(f"profile needs P, F >= 1, got {self.packets}x{self.features}")
        if not self.feature_names:
            object.__setattr__(self, "feature_names", default_feature_names(self.features))
        if len(self.feature_names) != self.features:
            raise ConfigError("feature_names length must equal F")

    @property
    def columns(self) -> list[str]:
        return [f"f_{p}_{f}" for p in range(self.packets) for f in range(self.features)]

    def to_dict(self) -> dict:
        return {"packets": self.packets, "features": self.features,
                "feature_names": list(self.feature_names)}


def default_feature_names(n: int) -> tuple:
    known = ("size", "direction", "iat", "window")
    return tuple(known[i] if i < len(known) else f"feat{i}" for i in range(n))


MIRAGE_LIKE = Profile(10, 4, ("size", "direction", "iat", "window"))
APPCLASSNET_LIKE = Profile(20, 2, ("size", "direction"))


@dataclass(frozen=True)
class FlowSample:
    features: np.ndarray
    label: int
    flow_id: str

    def __eq__(self, other):
        if not isinstance(other, FlowSample):
            return NotImplemented
        return (self.label == other.label and self.flow_id == other.flow_id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))

    __hash__ = None


class Dataset:
    """Immutable collection of flows stored as one (n, P, F) array."""

    def __init__(self, X, y, flow_ids: Sequence[str] | None, profile: Profile,
                 class_names: Sequence[str] | None = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 3 or X.shape[1:] != (profile.packets, profile.features):
            raise DataError(f"samples have shape {X.shape[1:]}, profile wants "
                            f"{(profile.packets, profile.features)}")
        if len(y) != len(X):
            raise DataError("label count does not match sample count")
        self.X = X
        self.y = y
        self.flow_ids = list(flow_ids) if flow_ids is not None else [str(i) for i in range(len(y))]
        self.profile = profile
        if class_names is None:
            n = int(y.max()) + 1 if len(y) else 0
            class_names = [str(i) for i in range(n)]
        self.class_names = list(class_names)
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> FlowSample:
        return FlowSample(self.X[i], int(self.y[i]), self.flow_ids[i])

    @property
    def samples(self) -> list[FlowSample]:
        return [self[i] for i in range(len(self))]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    @property
    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return {int(c): int(n) for c, n in zip(labels, counts)}

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.y == label)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], [self.flow_ids[i] for i in idx],
                       self.profile, self.class_names)

    def flat(self) -> np.ndarray:
        """Concatenated packet series, one row per flow (for the forest)."""
        return self.X.reshape(len(self), -1)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.profile == other.profile and self.flow_ids == other.flow_ids
                and np.array_equal(self.y, other.y) and np.array_equal(self.X, other.X))

    __hash__ = None

    def __repr__(self):
        return (f"Dataset(n={len(self)}, classes={len(self.classes)}, "
                f"P={self.profile.packets}, F={self.profile.features})")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_dataset(d: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flow_id", "label"] + d.profile.columns)
        for i in range(len(d)):
            w.writerow([d.flow_ids[i], int(d.y[i])]
                       + ["%.17g" % v for v in d.X[i].reshape(-1)])
    meta = {"profile": d.profile.to_dict(),
            "class_map": {str(i): name for i, name in enumerate(d.class_names)}}
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
    return path


def _label_key(s: str):
    try:
        return (0, int(s), s)
    except ValueError:
        return (1, 0, s)


def load_dataset(path, profile: Profile | None = None) -> Dataset:
    """Read a dataset file; labels come back as dense ids 0..C-1.

    The returned ``class_names[i]`` is the original label of dense id ``i``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text(encoding="utf-8"))
        mprof = meta.get("profile", {})
        file_profile = Profile(int(mprof["packets"]), int(mprof["features"]),
                               tuple(mprof.get("feature_names", ())))
        if profile is not None and (profile.packets, profile.features) != (
                file_profile.packets, file_profile.features):
            raise DataError(f"{path}: metadata profile {file_profile} != requested {profile}")
        profile = file_profile
    if profile is None:
        raise DataError(f"{path}: no metadata sidecar and no profile given")

    expected = ["flow_id", "label"] + profile.columns
    ncol = len(expected)
    ids, raw_labels, rows = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ParseError(path, 1, "header does not match profile "
                             f"P={profile.packets}, F={profile.features}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise ParseError(path, lineno, f"expected {ncol} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-numeric feature ({exc})") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(path, lineno, "non-finite feature value")
            ids.append(row[0])
            raw_labels.append(row[1])
            rows.append(vals)

    uniq = sorted(set(raw_labels), key=_label_key)
    dense = {lab: i for i, lab in enumerate(uniq)}
    stored_map = meta.get("class_map", {})
    class_names = [stored_map.get(lab, lab) for lab in uniq]
    X = np.array(rows, dtype=np.float64).reshape(len(rows), profile.packets, profile.features)
    y = np.array([dense[lab] for lab in raw_labels], dtype=np.int64)
    return Dataset(X, y, ids, profile, class_names)


# ---------------------------------------------------------------------------
# partitioning and splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPartition:
    train_classes: tuple
    val_classes: tuple
    test_classes: tuple
    train_idx: np.ndarray = field(repr=False)
    val_idx: np.ndarray = field(repr=False)
    test_idx: np.ndarray = field(repr=False)

    def indices(self, split: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[split]

    def classes(self, split: str) -> tuple:
        return {"train": self.train_classes, "val": self.val_classes,
                "test": self.test_classes}[split]

    def split(self, d: Dataset, name: str) -> Dataset:
        return d.subset(self.indices(name))

    def to_dict(self) -> dict:
        return {"train_classes": list(self.train_classes),
                "val_classes": list(self.val_classes),
                "test_classes": list(self.test_classes)}


def popularity_order(counts: dict[int, int]) -> list[int]:
    """Classes by descending sample count, ties by ascending class id."""
    return sorted(counts, key=lambda c: (-counts[c], c))


def partition_by_popularity(d: Dataset, n_train: int, n_val: int, n_test: int) -> ClassPartition:
    counts = d.class_counts
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != len(counts):
        raise ConfigError(f"split sizes {n_train}+{n_val}+{n_test} != {len(counts)} classes")
    order = popularity_order(counts)
    tr = tuple(order[:n_train])
    va = tuple(order[n_train:n_train + n_val])
    te = tuple(order[n_train + n_val:])

    def idx(classes):
        return np.flatnonzero(np.isin(d.y, classes)) if classes else np.zeros(0, np.int64)

    return ClassPartition(tr, va, te, idx(tr), idx(va), idx(te))


def monolithic_split(d: Dataset, ratio: tuple = (9, 1), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class stratified fit/validation split; validation takes ceil(n*b/(a+b))."""
    a, b = ratio
    rng = np.random.default_rng(seed)
    fit_idx, val_idx = [], []
    for c in d.classes:
        idx = d.indices_of(c)
        if len(idx) < 2:
            raise DataError(f"class {c} has {len(idx)} sample(s); need >= 2 to split")
        n_val = math.ceil(len(idx) * b / (a + b))
        n_val = min(n_val, len(idx) - 1)
        perm = rng.permutation(idx)
        val_idx.append(perm[:n_val])
        fit_idx.append(perm[n_val:])
    fit = np.sort(np.concatenate(fit_idx))
    val = np.sort(np.concatenate(val_idx))
    return d.subset(fit), d.subset(val)


def imbalance_rho(counts) -> float:
    """Most-popular over least-popular class size."""
    if isinstance(counts, Dataset):
        counts = counts.class_counts
    if isinstance(counts, dict):
        counts = list(counts.values())
    counts = [c for c in counts]
    if not counts:
        raise DataError("imbalance_rho of an empty class set")
    if min(counts) <= 0:
        raise DataError("imbalance_rho needs positive class counts")
    return max(counts) / min(counts)


def stratified_folds(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Assign each sample to one of ``k`` folds, round-robin within each class."""
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold_of[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return [np.flatnonzero(fold_of == f) for f in range(k)]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


def padding_mask(X: np.ndarray) -> np.ndarray:
    """True for packet rows that are zero padding (all features exactly 0)."""
    return ~np.any(X != 0.0, axis=-1)


def normalize_fit(X) -> NormStats:
    """Per-feature mean/std over non-padding packets; zero std is replaced by 1."""
    X = X.X if isinstance(X, Dataset) else np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if len(X) < 2:
        raise DataError("normalize_fit needs at least two samples")
    rows = X[~padding_mask(X)]
    if len(rows) == 0:
        f = X.shape[-1]
        return NormStats(np.zeros(f), np.ones(f))
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std)


def normalize_apply(stats: NormStats, X):
    """Standardize non-padding packets; padding rows stay exactly 0.

    Not idempotent: applying twice standardizes already-standardized values.
    """
    if isinstance(X, Dataset):
        return Dataset(normalize_apply(stats, X.X), X.y, X.flow_ids, X.profile, X.class_names)
    X = np.asarray(X, dtype=np.float64)
    pad = padding_mask(X)
    out = (X - stats.mean) / stats.std
    out[pad] = 0.0
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic stand-in dataset.

    ``separability`` is the expected Euclidean distance between two class
    templates; per-sample jitter is unit Gaussian per entry.
    """

    n_classes: int = 40
    samples_per_class_max: int = 500
    imbalance_rho: float = 1.0
    separability: float = 5.0
    packets: int = 10
    features: int = 4
    seed: int = 0
    truncate_fraction: float = 0.2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.imbalance_rho < 1:
            raise ConfigError("imbalance_rho must be >= 1")
        if self.separability < 0:
            raise ConfigError("separability must be >= 0")
        if self.samples_per_class_max < 1:
            raise ConfigError("samples_per_class_max must be >= 1")
        if not 0 <= self.truncate_fraction <= 1:
            raise ConfigError("truncate_fraction must lie in [0, 1]")

    @property
    def profile(self) -> Profile:
        return Profile(self.packets, self.features)


def synth_class_counts(cfg: SynthConfig) -> list[int]:
    c = cfg.n_classes
    return [max(1, int(round(cfg.samples_per_class_max * cfg.imbalance_rho ** (-i / (c - 1)))))
            for i in range(c)]


def synth_generate(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    P, F = cfg.packets, cfg.features
    scale = cfg.separability / math.sqrt(2 * P * F)
    templates = rng.normal(size=(cfg.n_classes, P, F)) * scale
    has_dir = F >= 2
    if has_dir:
        # probability of an upstream (+1) packet at each position, per class
        up_prob = 1.0 / (1.0 + np.exp(-2.0 * templates[:, :, 1] * math.sqrt(P * F)))

    counts = synth_class_counts(cfg)
    X_parts, y_parts = [], []
    for c, n in enumerate(counts):
        xs = templates[c] + rng.normal(size=(n, P, F))
        if has_dir:
            xs[:, :, 1] = np.where(rng.random((n, P)) < up_prob[c], 1.0, -1.0)
        X_parts.append(xs)
        y_parts.append(np.full(n, c, dtype=np.int64))
    X = np.concatenate(X_parts)
    y = np.concatenate(y_parts)

    n_total = len(y)
    n_trunc = int(round(cfg.truncate_fraction * n_total)) if P > 1 else 0
    victims = rng.choice(n_total, size=n_trunc, replace=False)
    lengths = rng.integers(1, P, size=n_trunc) if n_trunc else np.zeros(0, int)
    for i, length in zip(victims, lengths):
        X[i, length:, :] = 0.0

    ids = [f"c{c}-{k}" for c, n in enumerate(counts) for k in range(n)]
    return Dataset(X, y, ids, cfg.profile)
