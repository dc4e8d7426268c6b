"""Random forest of CART trees (Gini impurity, bootstrap, random feature subsets)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ConfigError(f"n_estimators must be >= 1, got {self.n_estimators}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError(f"max_depth must be a positive integer or None, got {self.max_depth}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray     # (nodes, classes) training-sample histogram per node
    node_depth: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        return int(self.node_depth.max())

    def leaves(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax picks the lowest class index among tied histogram maxima
        return np.argmax(self.counts[self.leaves(X)], axis=1)


@dataclass
class Forest:
    trees: list
    classes: np.ndarray     # original label of each dense class index
    n_features: int
    config: ForestConfig

    @property
    def node_count_total(self) -> int:
        return sum(t.n_nodes for t in self.trees)

    @property
    def avg_depth(self) -> float:
        return float(np.mean([t.depth for t in self.trees]))


def features_per_split(n_features: int) -> int:
    return max(1, math.ceil(math.sqrt(n_features)))


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features) -> tuple | None:
    """Lowest weighted-Gini split over ``features``; None when every feature is constant."""
    n = len(y)
    features = np.asarray(features)
    # only the classes present at this node matter for impurity
    present, y = np.unique(y, return_inverse=True)
    onehot = np.eye(len(present))[y]
    total = onehot.sum(axis=0)
    cols = X[:, features]                                   # (n, m)
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    valid = xs[1:] > xs[:-1]                                # (n-1, m)
    if not valid.any():
        return None
    left = np.cumsum(onehot[order], axis=0)[:-1]            # (n-1, m, C)
    right = total - left
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    # n * weighted Gini = nl - |L|^2/nl + nr - |R|^2/nr
    impurity = n - (left ** 2).sum(2) / nl - (right ** 2).sum(2) / nr
    impurity[~valid] = np.inf
    best_rows = np.argmin(impurity, axis=0)
    scores = impurity[best_rows, np.arange(len(features))]
    # earliest feature among those within 1e-12 of the minimum
    j = int(np.flatnonzero(scores <= scores.min() + 1e-12)[0])
    i = int(best_rows[j])
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = 0.5 * (lo + hi)
    if not lo <= thr < hi:                  # midpoint rounded onto the upper value
        thr = lo
    return scores[j], int(features[j]), thr


def fit_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int | None,
             rng: np.random.Generator) -> Tree:
    n_feat = X.shape[1]
    m = features_per_split(n_feat)
    feature, threshold, left, right, counts, depth = [], [], [], [], [], []

    def new_node(idx, d):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y)), 0), np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        d = depth[node]
        if len(idx) < 2 or np.count_nonzero(counts[node]) <= 1 or (
                max_depth is not None and d >= max_depth):
            continue
        # draw m candidate features; if all are constant here, keep drawing from the rest
        perm = rng.permutation(n_feat)
        split = _best_split(X[idx], y[idx], n_classes, perm[:m])
        if split is None and m < n_feat:
            split = _best_split(X[idx], y[idx], n_classes, perm[m:])
        if split is None:
            continue
        _, f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li, d + 1)
        right[node] = new_node(ri, d + 1)
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(counts, dtype=np.int64).reshape(-1, n_classes),
                np.array(depth, dtype=np.int64))


def fit_forest(X, y, cfg: ForestConfig | None = None) -> Forest:
    """One tree per bootstrap resample of the flattened feature rows."""
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim > 2:
        X = X.reshape(len(X), -1)
    if len(X) == 0 or len(X) != len(y):
        raise DataError(f"fit_forest needs matching non-empty inputs, got {len(X)} rows "
                        f"and {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise DataError("fit_forest: non-finite feature values")
    classes, yd = np.unique(y, return_inverse=True)
    trees = []
    for t in range(cfg.n_estimators):
        rng = np.random.default_rng([cfg.seed, t])
        idx = rng.integers(0, len(X), size=len(X)) if cfg.bootstrap else np.arange(len(X))
        trees.append(fit_tree(X[idx], yd[idx], len(classes), cfg.max_depth, rng))
    return Forest(trees, classes, X.shape[1], cfg)


def forest_votes(forest: Forest, X) -> np.ndarray:
    """(n, classes) count of trees voting for each class."""
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(len(X), -1) if X.ndim > 1 else X.reshape(1, -1)
    if X.shape[1] != forest.n_features:
        raise DataError(f"forest expects {forest.n_features} features, got {X.shape[1]}")
    votes = np.zeros((len(X), len(forest.classes)), dtype=np.int64)
    rows = np.arange(len(X))
    for tree in forest.trees:
        np.add.at(votes, (rows, tree.predict(X)), 1)
    return votes


def forest_predict(forest: Forest, X, allowed=None) -> np.ndarray:
    """Majority vote, ties to the lowest label.

    ``allowed`` restricts the vote to a subset of labels: votes for any other
    class are discarded before the argmax.
    """
    votes = forest_votes(forest, X)
    if allowed is not None:
        keep = np.isin(forest.classes, np.asarray(list(allowed)))
        votes = np.where(keep[None, :], votes, -1)
    return forest.classes[np.argmax(votes, axis=1)]


def forest_stats(forest: Forest) -> tuple[int, float]:
    """(total node count over trees, mean tree depth)."""
    return forest.node_count_total, forest.avg_depth


def save_forest(path, forest: Forest) -> Path:
    path = Path(path)
    arrs = {"classes": forest.classes}
    for i, t in enumerate(forest.trees):
        for name in ("feature", "threshold", "left", "right", "counts", "node_depth"):
            arrs[f"tree{i}/{name}"] = getattr(t, name)
    header = {"n_features": forest.n_features, "config": forest.config.to_dict(),
              "n_trees": len(forest.trees)}
    arrs["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrs)
    return path


def load_forest(path) -> Forest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"forest file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arrs = {k: z[k] for k in z.files}
    header = json.loads(bytes(arrs.pop("__meta__")).decode())
    trees = [Tree(*(arrs[f"tree{i}/{name}"] for name in
                    ("feature", "threshold", "left", "right", "counts", "node_depth")))
             for i in range(header["n_trees"])]
    return Forest(trees, arrs["classes"], header["n_features"], ForestConfig(**header["config"]))
