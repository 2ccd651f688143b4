"""Random-forest classifier over CART trees with Gini splits.

The forest issues the final verdict for samples whose scorer loss falls in
the uncertain band, and exposes mean-decrease-in-Gini feature importances
as the interpretability surface. Trees are stored as flat node arrays so
checkpoints are plain JSON and round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateTrainingSetError, EmptyNodeError
from .labels import Label

_CHECKPOINT_VERSION = 1
_NO_CHILD = -1
_LEAF_FEATURE = -1


@dataclass(frozen=True)
class LabeledSample:
    """One pseudo-labeled feature vector."""

    features: np.ndarray
    label: Label


@dataclass
class ForestConfig:
    n_estimators: int = 40
    max_depth: int = 16
    min_samples_split: int = 2
    max_features: str | int = "sqrt"  # "sqrt", "all", or an explicit count

    def features_per_split(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return int(math.ceil(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        return min(int(self.max_features), n_features)


def gini(counts) -> float:
    """CART impurity 1 - sum((c_i / total)^2) of a class-count pair."""
    c = np.asarray(counts, dtype=float)
    if np.any(c < 0):
        raise ValueError("class counts must be non-negative")
    total = float(c.sum())
    if total <= 0:
        raise EmptyNodeError("cannot compute impurity of an empty node")
    frac = c / total
    return float(1.0 - np.sum(frac * frac))


class DecisionTree:
    """Binary CART tree as parallel node arrays.

    ``feature[i] == -1`` marks a leaf; ``counts[i]`` holds the training
    class counts (normal, abnormal) observed at node ``i``.
    """

    def __init__(self, feature, threshold, left, right, counts):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_index(self, features: np.ndarray) -> int:
        node = 0
        while self.feature[node] != _LEAF_FEATURE:
            if features[self.feature[node]] < self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return node

    def predict(self, features: np.ndarray) -> Label:
        counts = self.counts[self.leaf_index(np.asarray(features, dtype=float))]
        # Equal leaf counts resolve to abnormal, matching the forest tie rule.
        return Label.ABNORMAL if counts[1] >= counts[0] else Label.NORMAL

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        best = 0
        for i in range(self.n_nodes):
            if self.feature[i] != _LEAF_FEATURE:
                for child in (self.left[i], self.right[i]):
                    depths[child] = depths[i] + 1
                    best = max(best, depths[child])
        return best


def _best_split(x: np.ndarray, y: np.ndarray, feature_ids: np.ndarray):
    """Exhaustive best (feature, threshold) by weighted child Gini.

    Returns (feature, threshold, weighted_gini) or None when no feature
    offers a valid boundary. Ties keep the earliest candidate in
    ``feature_ids`` order, then the lowest threshold.
    """
    n = y.shape[0]
    best = None
    for f in feature_ids:
        values = x[:, f]
        order = np.argsort(values, kind="stable")
        vs = values[order]
        ys = y[order]
        boundaries = np.nonzero(vs[:-1] < vs[1:])[0]
        if boundaries.size == 0:
            continue
        cum_abn = np.cumsum(ys)
        n_left = boundaries + 1.0
        n_right = n - n_left
        abn_left = cum_abn[boundaries].astype(float)
        abn_right = cum_abn[-1] - abn_left
        nor_left = n_left - abn_left
        nor_right = n_right - abn_right
        gini_left = 1.0 - (nor_left**2 + abn_left**2) / n_left**2
        gini_right = 1.0 - (nor_right**2 + abn_right**2) / n_right**2
        weighted = (n_left * gini_left + n_right * gini_right) / n
        k = int(np.argmin(weighted))
        if best is None or weighted[k] < best[2]:
            threshold = 0.5 * (vs[boundaries[k]] + vs[boundaries[k] + 1])
            best = (int(f), float(threshold), float(weighted[k]))
    return best


def build_tree(x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
               config: ForestConfig) -> DecisionTree:
    """Grow one CART tree on (x, y); deterministic given the rng state."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot build a tree on an empty sample")
    n_features = x.shape[1]
    k = config.features_per_split(n_features)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    counts: list[tuple[int, int]] = []

    def add_node(idx: np.ndarray) -> int:
        node = len(feature)
        feature.append(_LEAF_FEATURE)
        threshold.append(0.0)
        left.append(_NO_CHILD)
        right.append(_NO_CHILD)
        sub = y[idx]
        counts.append((int(np.sum(sub == 0)), int(np.sum(sub == 1))))
        return node

    def grow(idx: np.ndarray, node: int, depth: int) -> None:
        sub_y = y[idx]
        if (
            depth >= config.max_depth
            or idx.shape[0] < config.min_samples_split
            or np.all(sub_y == sub_y[0])
        ):
            return
        if k < n_features:
            candidates = rng.choice(n_features, size=k, replace=False)
        else:
            candidates = np.arange(n_features)
        found = _best_split(x[idx], sub_y, candidates)
        if found is None:
            return
        f, thr, _ = found
        mask = x[idx, f] < thr
        left_idx = idx[mask]
        right_idx = idx[~mask]
        feature[node] = f
        threshold[node] = thr
        left[node] = add_node(left_idx)
        right[node] = add_node(right_idx)
        grow(left_idx, left[node], depth + 1)
        grow(right_idx, right[node], depth + 1)

    root_idx = np.arange(x.shape[0])
    root = add_node(root_idx)
    grow(root_idx, root, 0)
    return DecisionTree(feature, threshold, left, right, counts)


@dataclass
class RandomForest:
    trees: list[DecisionTree]
    config: ForestConfig
    n_features: int
    seed: int

    @property
    def n_estimators(self) -> int:
        return len(self.trees)


def stack_samples(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray([s.features for s in samples], dtype=float)
    y = np.asarray([int(s.label) for s in samples], dtype=np.int64)
    return x, y


def fit_forest(x: np.ndarray, y: np.ndarray, config: ForestConfig | None = None,
               seed: int | np.random.SeedSequence = 0) -> RandomForest:
    """Fit ``n_estimators`` trees on bootstrap resamples.

    Each tree draws its bootstrap and its split candidates from its own
    spawned rng, so the forest is deterministic given ``seed``.
    """
    config = config or ForestConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad training shapes {x.shape} / {y.shape}")
    present = np.unique(y)
    if present.size < 2:
        raise DegenerateTrainingSetError(
            "training set must contain both classes, got only "
            + (Label(int(present[0])).display if present.size else "nothing")
        )
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seed_value = seed if isinstance(seed, int) else -1
    n = x.shape[0]
    trees = []
    for child in base.spawn(config.n_estimators):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, n, size=n)
        trees.append(build_tree(x[boot], y[boot], rng, config))
    return RandomForest(trees=trees, config=config, n_features=x.shape[1], seed=seed_value)


def predict(forest: RandomForest, features) -> tuple[Label, tuple[int, int]]:
    """Majority vote over trees; ties resolve to abnormal."""
    if forest.n_estimators == 0:
        raise ValueError("forest has no trees")
    features = np.asarray(features, dtype=float)
    abnormal = sum(int(t.predict(features)) for t in forest.trees)
    normal = forest.n_estimators - abnormal
    label = Label.ABNORMAL if abnormal >= normal else Label.NORMAL
    return label, (normal, abnormal)


def vote_fraction(votes: tuple[int, int]) -> float:
    """Fraction of trees voting abnormal; the classifier's ranking score."""
    total = votes[0] + votes[1]
    return votes[1] / total if total else 0.0


def feature_importances(forest: RandomForest) -> np.ndarray:
    """Mean decrease in Gini per feature, normalized to sum to one."""
    total = np.zeros(forest.n_features)
    for tree in forest.trees:
        node_n = tree.counts.sum(axis=1).astype(float)
        root_n = node_n[0]
        for i in range(tree.n_nodes):
            f = tree.feature[i]
            if f == _LEAF_FEATURE:
                continue
            li, ri = tree.left[i], tree.right[i]
            decrease = (
                node_n[i] * gini(tree.counts[i])
                - node_n[li] * gini(tree.counts[li])
                - node_n[ri] * gini(tree.counts[ri])
            ) / root_n
            total[f] += decrease
    total /= forest.n_estimators
    s = total.sum()
    return total / s if s > 0 else total


def save_forest(forest: RandomForest, path) -> None:
    """Serialize to JSON node arrays; floats round-trip exactly."""
    doc = {
        "format_version": _CHECKPOINT_VERSION,
        "n_features": forest.n_features,
        "seed": forest.seed,
        "config": {
            "n_estimators": forest.config.n_estimators,
            "max_depth": forest.config.max_depth,
            "min_samples_split": forest.config.min_samples_split,
            "max_features": forest.config.max_features,
        },
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "counts": t.counts.tolist(),
            }
            for t in forest.trees
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_forest(path) -> RandomForest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported forest checkpoint version {version}")
    config = ForestConfig(**doc["config"])
    trees = [
        DecisionTree(t["feature"], t["threshold"], t["left"], t["right"], t["counts"])
        for t in doc["trees"]
    ]
    return RandomForest(
        trees=trees, config=config, n_features=doc["n_features"], seed=doc["seed"]
    )
