"""Random-forest feature ranking by mean decrease in Gini impurity."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def gini_impurity(class_counts) -> float:
    """1 - sum(p_i^2) for the class distribution given by ``class_counts``."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini impurity of an empty node")
    p = counts / total
    return float(1.0 - np.dot(p, p))


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    features_per_split: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def resolved_features_per_split(self, n_features: int) -> int:
        m = self.features_per_split or math.ceil(math.sqrt(n_features))
        if not 1 <= m <= n_features:
            raise ValueError(f"features_per_split={m} outside [1, {n_features}]")
        return m


@dataclass
class TreeNode:
    """A split node or, when ``split_feature`` is None, a leaf.

    ``counts`` is the class distribution of the samples reaching the node;
    ``impurity_decrease`` is already weighted by the node's share of the
    tree's training samples.
    """

    counts: np.ndarray
    split_feature: int | None = None
    split_threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    impurity_decrease: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.split_feature is None


def _best_split(X, Y, features):
    """Best (feature, threshold, left_mask) over ``features`` for one node.

    ``Y`` is the one-hot class matrix of the node's samples. Returns None
    when no candidate feature has two distinct values.
    """
    n = X.shape[0]
    parent = Y.sum(axis=0)
    best_gain, best = 0.0, None
    parent_gini = 1.0 - np.sum((parent / n) ** 2)
    for f in features:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        left = np.cumsum(Y[order], axis=0)[:-1]
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        right = parent - left
        g_left = 1.0 - np.sum(left ** 2, axis=1) / n_left ** 2
        g_right = 1.0 - np.sum(right ** 2, axis=1) / n_right ** 2
        child = (n_left * g_left + n_right * g_right) / n
        gain = np.where(valid, parent_gini - child, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > best_gain + 1e-15:
            best_gain = float(gain[pos])
            threshold = 0.5 * (xs[pos] + xs[pos + 1])
            if threshold >= xs[pos + 1]:  # midpoint rounded up to the right value
                threshold = xs[pos]
            best = (f, float(threshold), best_gain)
    return best


class DecisionTree:
    """CART classification tree grown with Gini splits."""

    def __init__(self, n_features, n_classes, max_depth=None, min_samples_split=2,
                 features_per_split=None, rng=None):
        self.n_features = n_features
        self.n_classes = n_classes
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.features_per_split = features_per_split or n_features
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.root: TreeNode | None = None
        self.n_nodes = 0

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        Y = np.eye(self.n_classes)[y]
        total = len(y)
        self.root = TreeNode(Y.sum(axis=0))
        self.n_nodes = 1
        stack = [(self.root, np.arange(total), 0)]
        while stack:
            node, idx, depth = stack.pop()
            n = len(idx)
            if (
                n < self.min_samples_split
                or np.count_nonzero(node.counts) < 2
                or (self.max_depth is not None and depth >= self.max_depth)
            ):
                continue
            feats = self.rng.choice(self.n_features, self.features_per_split, replace=False)
            found = _best_split(X[idx], Y[idx], feats)
            if found is None:
                continue
            f, thr, gain = found
            go_left = X[idx, f] <= thr
            li, ri = idx[go_left], idx[~go_left]
            node.split_feature = int(f)
            node.split_threshold = thr
            node.impurity_decrease = n / total * gain
            node.left = TreeNode(Y[li].sum(axis=0))
            node.right = TreeNode(Y[ri].sum(axis=0))
            self.n_nodes += 2
            stack.append((node.right, ri, depth + 1))
            stack.append((node.left, li, depth + 1))
        return self

    def _nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend((node.right, node.left))

    def raw_importances(self) -> np.ndarray:
        imp = np.zeros(self.n_features)
        for node in self._nodes():
            if not node.is_leaf:
                imp[node.split_feature] += node.impurity_decrease
        return imp

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty((len(X), self.n_classes))
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.split_feature] <= node.split_threshold else node.right
            out[i] = node.counts / node.counts.sum()
        return out


@dataclass
class RandomForest:
    config: ForestConfig
    n_features: int
    n_classes: int
    trees: list[DecisionTree] = field(default_factory=list)

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def fit_random_forest(X, y, config: ForestConfig | None = None) -> RandomForest:
    """Grow ``config.n_trees`` trees, each on a seeded bootstrap resample.

    Tree ``i`` draws all of its randomness from ``(seed, i)``, so results do
    not depend on the order trees are built in.
    """
    config = config or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n_samples, n_features) matching y")
    if len(y) < 2:
        raise ValueError("need at least 2 samples")
    if len(np.unique(y)) < 2:
        raise ValueError("single-class input: both classes must be present")
    if config.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    n, d = X.shape
    n_classes = int(y.max()) + 1
    m = config.resolved_features_per_split(d)
    forest = RandomForest(config, d, n_classes)
    for i in range(config.n_trees):
        rng = np.random.default_rng([config.seed, i])
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        tree = DecisionTree(d, n_classes, config.max_depth, config.min_samples_split, m, rng)
        forest.trees.append(tree.fit(X[rows], y[rows]))
    return forest


@dataclass
class ImportanceReport:
    features: tuple[str, ...]
    importances: dict[str, float]

    @property
    def ranking(self) -> list[str]:
        """Feature names by importance, descending; ties keep column order."""
        pos = {f: i for i, f in enumerate(self.features)}
        return sorted(self.features, key=lambda f: (-self.importances[f], pos[f]))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["Feature", "Importance"])
            for f in self.ranking:
                writer.writerow([f, repr(self.importances[f])])

    @classmethod
    def from_csv(cls, path, feature_order: Sequence[str] | None = None):
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        imp = {r["Feature"]: float(r["Importance"]) for r in rows}
        order = tuple(feature_order) if feature_order else tuple(r["Feature"] for r in rows)
        return cls(order, imp)


def feature_importances(forest: RandomForest, feature_names: Sequence[str] | None = None) -> ImportanceReport:
    """Mean decrease in impurity, normalised per tree and then overall.

    Trees that never split (a bootstrap sample holding one class) carry no
    information and are left out of the average.
    """
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"f{i}" for i in range(forest.n_features))
    if len(names) != forest.n_features:
        raise ValueError("feature_names length does not match the forest")
    per_tree = []
    for tree in forest.trees:
        imp = tree.raw_importances()
        if imp.sum() > 0:
            per_tree.append(imp / imp.sum())
    if per_tree:
        mean = np.mean(per_tree, axis=0)
        mean = mean / mean.sum()
    else:
        mean = np.zeros(forest.n_features)
    return ImportanceReport(names, {f: float(v) for f, v in zip(names, mean)})


def select_top_k(report: ImportanceReport, k: int = 10) -> list[str]:
    """The ``k`` most important features, returned in original column order."""
    if not 0 <= k <= len(report.features):
        raise ValueError(f"k={k} exceeds the {len(report.features)} available features")
    chosen = set(report.ranking[:k])
    return [f for f in report.features if f in chosen]
