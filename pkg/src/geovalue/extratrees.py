"""Extremely randomized trees for regression.

At each node, ``k_features`` of the non-constant features are drawn without
replacement; each gets one cut point drawn uniformly inside the node's value
range, and the candidate with the largest variance reduction wins. Every tree
sees the full training sample (no bootstrap). Ties go to the lower feature
index.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

ET_MAGIC = b"GVET"
ET_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    k_features: int | None = None  # None -> all features
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0
    n_jobs: int = 1


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf. ``x < threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            f = self.feature[node[idx]]
            go_left = X[idx, f] < self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[-1]}")
        out = np.zeros(X.shape[0])
        for tree in self.trees:
            out += tree.predict(X)
        out /= len(self.trees)
        return out[0] if single else out


def _sse(y: np.ndarray) -> float:
    return float(np.sum((y - y.mean()) ** 2))


def _grow(X, y, params: ForestParams, k: int, rng: np.random.Generator,
          trace: Callable | None = None) -> Tree:
    n, d = X.shape
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[rows].mean()))
        count.append(len(rows))
        return len(feature) - 1

    root = new_node(np.arange(n))
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, rows, depth = stack.pop()
        ys = y[rows]
        if (len(rows) < params.min_samples_split
                or (params.max_depth is not None and depth >= params.max_depth)
                or np.all(ys == ys[0])):
            continue
        Xs = X[rows]
        lo, hi = Xs.min(axis=0), Xs.max(axis=0)
        live = np.flatnonzero(hi > lo)
        if live.size == 0:
            continue
        chosen = np.sort(rng.choice(live, size=min(k, live.size), replace=False))
        cuts = rng.uniform(lo[chosen], hi[chosen])
        parent = _sse(ys)
        best = None
        candidates = []
        for f, t in zip(chosen, cuts):
            mask = Xs[:, f] < t
            nl = int(mask.sum())
            if nl < params.min_samples_leaf or len(rows) - nl < params.min_samples_leaf:
                score = -np.inf
            else:
                score = (parent - _sse(ys[mask]) - _sse(ys[~mask])) / len(rows)
            candidates.append((int(f), float(t), score))
            if best is None or score > best[2]:
                best = (int(f), float(t), score)
        if trace is not None:
            trace(node, candidates, best)
        if best is None or not np.isfinite(best[2]):
            continue
        f, t, _ = best
        mask = Xs[:, f] < t
        feature[node], threshold[node] = f, t
        lrows, rrows = rows[mask], rows[~mask]
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))

    return Tree(np.asarray(feature, np.int64), np.asarray(threshold, np.float64),
                np.asarray(left, np.int64), np.asarray(right, np.int64),
                np.asarray(value, np.float64), np.asarray(count, np.int64))


def fit(X, y, params: ForestParams = ForestParams(), trace: Callable | None = None) -> Forest:
    """Grow ``params.n_trees`` trees; tree ``i`` uses the RNG stream ``(seed, i)``.

    ``trace(node, candidates, chosen)`` is called at every split attempt, where
    ``candidates`` lists ``(feature, threshold, score)`` triples.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-d feature matrix")
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y disagree on row count")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data contains non-finite values")
    d = X.shape[1]
    k = d if params.k_features is None else params.k_features
    if not 1 <= k <= d:
        raise ValueError(f"k_features must be in [1, {d}], got {k}")
    if params.n_trees < 1 or params.min_samples_leaf < 1:
        raise ValueError("n_trees and min_samples_leaf must be >= 1")

    def grow(i):
        return _grow(X, y, params, k, np.random.default_rng([params.seed, i]), trace)

    if params.n_jobs > 1 and trace is None:
        with ThreadPoolExecutor(params.n_jobs) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    else:
        trees = [grow(i) for i in range(params.n_trees)]
    return Forest(trees, d)


def predict(forest: Forest, x) -> np.ndarray | float:
    return forest.predict(x)


def save_forest(forest: Forest, path) -> None:
    """``GVET`` | u16 version | u32 n_features | u32 n_trees, then each tree in
    pre-order: leaf ``u8 0, f64 value, u64 count`` or split ``u8 1, u32 feature,
    f64 threshold`` followed by the left and right subtrees."""
    out = bytearray(ET_MAGIC)
    out += struct.pack("<HII", ET_VERSION, forest.n_features, len(forest.trees))
    for tree in forest.trees:
        stack = [0]
        while stack:
            i = stack.pop()
            if tree.feature[i] < 0:
                out += struct.pack("<BdQ", 0, tree.value[i], tree.count[i])
            else:
                out += struct.pack("<BId", 1, tree.feature[i], tree.threshold[i])
                stack.append(int(tree.right[i]))
                stack.append(int(tree.left[i]))
    Path(path).write_bytes(bytes(out))


def load_forest(path) -> Forest:
    data = Path(path).read_bytes()
    if data[:4] != ET_MAGIC:
        raise ValueError(f"{path}: not a forest file")
    version, d, n_trees = struct.unpack_from("<HII", data, 4)
    if version != ET_VERSION:
        raise ValueError(f"{path}: unsupported forest version {version}")
    pos = 4 + struct.calcsize("<HII")
    trees = []
    for _ in range(n_trees):
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "value", "count")}

        def add(f, t, v, c):
            for k, val in zip(("feature", "threshold", "left", "right", "value", "count"),
                              (f, t, -1, -1, v, c)):
                cols[k].append(val)
            return len(cols["feature"]) - 1

        # (parent, is_left) for nodes still to be read, in pre-order
        pending = [(None, False)]
        while pending:
            parent, is_left = pending.pop()
            tag = data[pos]
            if tag == 0:
                _, v, c = struct.unpack_from("<BdQ", data, pos)
                pos += struct.calcsize("<BdQ")
                i = add(-1, 0.0, v, c)
            else:
                _, f, t = struct.unpack_from("<BId", data, pos)
                pos += struct.calcsize("<BId")
                i = add(f, t, 0.0, 0)
                pending.append((i, False))
                pending.append((i, True))
            if parent is not None:
                cols["left" if is_left else "right"][parent] = i
        tree = Tree(*(np.asarray(cols[k], dt) for k, dt in (
            ("feature", np.int64), ("threshold", np.float64), ("left", np.int64),
            ("right", np.int64), ("value", np.float64), ("count", np.int64))))
        # split-node value/count are not stored; rebuild them from the leaves
        _fill_internal(tree)
        trees.append(tree)
    return Forest(trees, d)


def _fill_internal(tree: Tree) -> None:
    for i in range(tree.n_nodes - 1, -1, -1):
        if tree.feature[i] >= 0:
            l, r = tree.left[i], tree.right[i]
            c = tree.count[l] + tree.count[r]
            tree.count[i] = c
            tree.value[i] = (tree.value[l] * tree.count[l] + tree.value[r] * tree.count[r]) / c
