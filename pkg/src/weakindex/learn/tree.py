"""CART binary classification trees (Gini impurity) and bagged forests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

_CHUNK = 64


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf.

    ``counts[i]`` is ``(negatives, positives)`` of training rows at node ``i``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = sp.csr_matrix(X)
        n = X.shape[0]
        node = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        while active.size:
            f = self.feature[node[active]]
            internal = f >= 0
            active = active[internal]
            if not active.size:
                break
            cur = node[active]
            vals = np.asarray(X[active, :][np.arange(active.size), self.feature[cur]]).ravel()
            go_left = vals <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return node

    def predict(self, X) -> np.ndarray:
        c = self.counts[self.apply(X)]
        return (c[:, 1] > c[:, 0]).astype(np.uint8)

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Tree":
        return cls(np.array(obj["feature"], dtype=np.int64),
                   np.array(obj["threshold"], dtype=float),
                   np.array(obj["left"], dtype=np.int64),
                   np.array(obj["right"], dtype=np.int64),
                   np.array(obj["counts"], dtype=np.int64).reshape(-1, 2))


def _best_split(X: sp.csr_matrix, rows: np.ndarray, y: np.ndarray, feats: np.ndarray,
                min_leaf: int):
    """Lowest weighted Gini split over ``feats``; ties keep the earliest feature."""
    n = rows.size
    npos = y.sum()
    best = None  # (impurity, feature, threshold)
    sub = X[rows].tocsc()
    for start in range(0, feats.size, _CHUNK):
        fchunk = feats[start:start + _CHUNK]
        block = sub[:, fchunk].toarray()
        order = np.argsort(block, axis=0, kind="stable")
        sv = np.take_along_axis(block, order, axis=0)
        sy = y[order]
        left_pos = np.cumsum(sy, axis=0)[:-1]
        left_n = np.arange(1, n)[:, None].astype(float)
        right_n = n - left_n
        right_pos = npos - left_pos
        imp = (2.0 * left_pos * (left_n - left_pos) / left_n
               + 2.0 * right_pos * (right_n - right_pos) / right_n)
        valid = sv[1:] > sv[:-1]
        if min_leaf > 1:
            size_ok = (left_n >= min_leaf) & (right_n >= min_leaf)
            valid &= size_ok
        imp = np.where(valid, imp, np.inf)
        pos = np.argmin(imp, axis=0)
        vals = imp[pos, np.arange(fchunk.size)]
        j = int(np.argmin(vals))
        v = vals[j]
        if np.isfinite(v) and (best is None or v < best[0] - 1e-12):
            p = pos[j]
            best = (v, int(fchunk[j]), float(0.5 * (sv[p, j] + sv[p + 1, j])))
    return best


def build_tree(X, y, *, max_depth: int | None = None, min_leaf: int = 1,
               max_features: int | None = None, rng: np.random.Generator | None = None,
               sample: np.ndarray | None = None) -> Tree:
    """Grow a CART tree on rows ``sample`` (default: all rows, with repeats allowed).

    With ``max_features`` each split considers a fresh random subset of that
    many features drawn from ``rng``.
    """
    X = sp.csr_matrix(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_features = X.shape[1]
    rows0 = np.arange(X.shape[0]) if sample is None else np.asarray(sample)
    all_feats = np.arange(n_features)

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(rows):
        pos = int(y[rows].sum())
        feature.append(-1); threshold.append(0.0); left.append(-1); right.append(-1)
        counts.append((rows.size - pos, pos))
        return len(feature) - 1

    root = new_node(rows0)
    stack = [(root, rows0, 0)]
    while stack:
        node, rows, depth = stack.pop()
        neg, pos = counts[node]
        if pos == 0 or neg == 0 or rows.size < 2 * min_leaf:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        if max_features is not None and max_features < n_features:
            feats = np.sort(rng.choice(n_features, size=max_features, replace=False))
        else:
            feats = all_feats
        split = _best_split(X, rows, y[rows], feats, min_leaf)
        if split is None:
            continue
        _, f, thr = split
        col = X[rows][:, [f]].toarray().ravel()
        mask = col <= thr
        l = new_node(rows[mask])
        r = new_node(rows[~mask])
        feature[node], threshold[node], left[node], right[node] = f, thr, l, r
        stack.append((r, rows[~mask], depth + 1))
        stack.append((l, rows[mask], depth + 1))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(counts, dtype=np.int64).reshape(-1, 2))


def build_forest(X, y, *, n_trees: int = 100, max_depth: int | None = None,
                 min_leaf: int = 1, feature_subsample: float | None = None,
                 rng: np.random.Generator) -> list[Tree]:
    """Bootstrap-bagged trees with per-split feature subsampling.

    ``feature_subsample`` is the fraction of features tried at each split;
    ``None`` means ``sqrt(n_features) / n_features``.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be at least 1")
    n, d = X.shape
    if feature_subsample is None:
        m = max(1, int(round(np.sqrt(d))))
    else:
        m = max(1, int(round(feature_subsample * d)))
    trees = []
    for _ in range(n_trees):
        sample = rng.integers(0, n, size=n)
        trees.append(build_tree(X, y, max_depth=max_depth, min_leaf=min_leaf,
                                max_features=m, rng=rng, sample=sample))
    return trees


def forest_predict(trees: list[Tree], X) -> np.ndarray:
    """Strict-majority vote; ties go to the negative class."""
    votes = np.sum([t.predict(X) for t in trees], axis=0)
    return (2 * votes > len(trees)).astype(np.uint8)
