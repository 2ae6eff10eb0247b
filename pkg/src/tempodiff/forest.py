"""Window summary features and a from-scratch random forest (CART, Gini)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

FEATURE_NAMES = ("mean", "std", "min", "max", "mean_abs", "zero_crossings")


def extract_features(window):
    """Six statistics per channel, channel-major: mean, std, min, max, mean |x|, zero crossings."""
    w = np.asarray(window, dtype=np.float64)
    mean = w.mean(axis=0)
    c = w - mean
    crossings = (c[:-1] * c[1:] < 0).sum(axis=0)
    feats = np.stack([mean, w.std(axis=0), w.min(axis=0), w.max(axis=0), np.abs(w).mean(axis=0), crossings], axis=1)
    return feats.ravel()


def feature_matrix(windows):
    return np.stack([extract_features(w.x0 if hasattr(w, "x0") else w) for w in windows])


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    counts: list = field(default_factory=list)

    def _add(self, counts):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append(counts)
        return len(self.feature) - 1

    def freeze(self):
        self.feature = np.array(self.feature, dtype=np.int64)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left, dtype=np.int64)
        self.right = np.array(self.right, dtype=np.int64)
        self.counts = np.array(self.counts, dtype=np.int64)
        return self

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X):
        return self.counts[self.apply(X)].argmax(axis=1)


def _best_split(X, y, idx, features, n_classes, min_leaf, max_features):
    """Lowest weighted Gini split; scans features until ``max_features`` yielded a candidate."""
    best = None
    tried = 0
    n = len(idx)
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        v = vals[order]
        valid = np.flatnonzero(v[:-1] < v[1:])
        valid = valid[(valid + 1 >= min_leaf) & (n - valid - 1 >= min_leaf)]
        if valid.size == 0:
            continue
        tried += 1
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[idx][order]] = 1.0
        cl = np.cumsum(onehot, axis=0)[valid]
        cr = onehot.sum(axis=0) - cl
        nl = (valid + 1).astype(np.float64)
        nr = n - nl
        # n * weighted Gini = (nl - |cl|^2/nl) + (nr - |cr|^2/nr)
        score = (nl - (cl * cl).sum(axis=1) / nl) + (nr - (cr * cr).sum(axis=1) / nr)
        j = int(np.argmin(score))
        if best is None or score[j] < best[0] - 1e-12:
            pos = valid[j]
            thr = 0.5 * (v[pos] + v[pos + 1])
            if thr >= v[pos + 1]:  # adjacent floats
                thr = v[pos]
            best = (score[j], f, thr)
        if tried >= max_features:
            break
    return best


def build_tree(X, y, n_classes, rng, max_features, max_depth=None, min_samples_leaf=1):
    tree = Tree()
    root_idx = np.arange(len(y))
    root = tree._add(np.bincount(y, minlength=n_classes))
    stack = [(root, root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = tree.counts[node]
        if np.count_nonzero(counts) <= 1 or (max_depth is not None and depth >= max_depth) \
                or len(idx) < 2 * min_samples_leaf:
            continue
        split = _best_split(X, y, idx, rng.permutation(X.shape[1]), n_classes, min_samples_leaf, max_features)
        if split is None:
            continue
        _, f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        tree.feature[node], tree.threshold[node] = int(f), float(thr)
        tree.left[node] = tree._add(np.bincount(y[li], minlength=n_classes))
        tree.right[node] = tree._add(np.bincount(y[ri], minlength=n_classes))
        stack.append((tree.right[node], ri, depth + 1))
        stack.append((tree.left[node], li, depth + 1))
    return tree.freeze()


@dataclass
class ForestModel:
    n_classes: int
    trees: list
    tree_seeds: list
    n_trees: int = 100
    max_depth: int = None
    min_samples_leaf: int = 1
    max_features: int = 1
    constant_label: int = None

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.constant_label is not None:
            return np.full(len(X), self.constant_label, dtype=np.int64)
        votes = np.stack([t.predict(X) for t in self.trees])  # (n_trees, n)
        tally = np.zeros((len(X), self.n_classes), dtype=np.int64)
        for row in votes:
            tally[np.arange(len(X)), row] += 1
        return tally.argmax(axis=1)


def rf_train(X, y, n_classes=None, n_trees=100, max_depth=None, min_samples_leaf=1, seed=0):
    """Bootstrap-aggregated CART trees with sqrt(n_features) candidates per split.

    Each tree draws from its own seed stream spawned off ``seed``, so results
    do not depend on the order trees are built in.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    max_features = max(1, int(math.isqrt(X.shape[1])))
    model = ForestModel(n_classes, [], [], n_trees, max_depth, min_samples_leaf, max_features)
    present = np.unique(y)
    if present.size == 1:
        warnings.warn(f"training labels contain only class {present[0]}; forest always predicts it", stacklevel=2)
        model.constant_label = int(present[0])
        return model
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(y), size=len(y))
        model.trees.append(build_tree(X[boot], y[boot], n_classes, rng, max_features, max_depth, min_samples_leaf))
        model.tree_seeds.append(list(child.spawn_key))
    return model


def rf_predict(model, X):
    return model.predict(X)
