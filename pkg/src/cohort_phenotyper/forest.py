"""CART random forest for binary labels and mean-decrease-in-Gini importance."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .errors import EmptyNode, SingleClass, ValidationError
from .folds import fold_masks, stratified_subject_folds
from .preprocess import FeatureMatrix, smote_oversample


def gini_impurity(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    if (counts < 0).any():
        raise ValidationError("class counts must be non-negative")
    n = counts.sum()
    if n == 0:
        raise EmptyNode("gini impurity of an empty node")
    return float(1.0 - np.sum((counts / n) ** 2))


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    mtry: int | None = None
    min_leaf: int = 1
    seed: int = 0
    n_jobs: int | None = None

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(p))
        if not 1 <= m <= p:
            raise ValidationError(f"mtry must be in 1..{p}")
        return m


def n_jobs_from_env(default: int | None = None) -> int:
    env = os.environ.get("COHORT_PHENOTYPER_THREADS")
    if env:
        return max(1, int(env))
    return default or 1


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    importance: np.ndarray
    oob: np.ndarray = field(repr=False, default=None)

    def apply(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=float))]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def _best_split(X, y, w, idx, feats, min_leaf):
    """Best (decrease, feature, threshold, left mask) over ``feats`` or None."""
    Xn = X[np.ix_(idx, feats)]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ws = w[idx][order]
    ps = (w[idx] * y[idx])[order]
    cw = np.cumsum(ws, axis=0)[:-1]
    cp = np.cumsum(ps, axis=0)[:-1]
    W = ws.sum(axis=0)
    P = ps.sum(axis=0)
    wr = W - cw
    pr = P - cp
    valid = (xs[1:] > xs[:-1]) & (cw >= min_leaf) & (wr >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        child = 2 * cp * (cw - cp) / cw + 2 * pr * (wr - pr) / wr
    parent = 2 * P * (W - P) / W
    dec = np.where(valid, parent - child, -np.inf)
    best = None
    for c in range(len(feats)):
        if not valid[:, c].any():
            continue
        i = int(np.argmax(dec[:, c]))
        if best is None or dec[i, c] > best[0]:
            lo, hi = xs[i, c], xs[i + 1, c]
            thr = 0.5 * (lo + hi)
            if thr >= hi:
                thr = lo
            best = (max(float(dec[i, c]), 0.0), int(feats[c]), float(thr))
    return best


def grow_tree(X, y, w, mtry, min_leaf=1, max_depth=None, rng=None) -> Tree:
    """Grow an unpruned CART tree on weighted rows (``w`` = bootstrap counts)."""
    rng = np.random.default_rng() if rng is None else rng
    n, p = X.shape
    feature, threshold, left, right, value = [], [], [], [], []
    importance = np.zeros(p)

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        W = w[idx].sum()
        value.append(float((w[idx] * y[idx]).sum() / W))
        return len(feature) - 1

    root_idx = np.flatnonzero(w > 0)
    stack = [(new_node(root_idx), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        v = value[node]
        if v == 0.0 or v == 1.0 or (max_depth is not None and depth >= max_depth):
            continue
        if w[idx].sum() < 2 * min_leaf:
            continue
        perm = rng.permutation(p)
        best = None
        for start in range(0, p, mtry):
            feats = np.sort(perm[start:start + mtry])
            best = _best_split(X, y, w, idx, feats, min_leaf)
            if best is not None:
                break
        if best is None:
            continue
        dec, f, thr = best
        importance[f] += dec
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        ln, rn = new_node(li), new_node(ri)
        left[node], right[node] = ln, rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value),
        importance,
    )


def _fit_one(X, y, seed, t, mtry, min_leaf, max_depth) -> Tree:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
    n = len(y)
    w = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
    tree = grow_tree(X, y, w, mtry, min_leaf, max_depth, rng)
    tree.oob = w == 0
    return tree


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int

    @property
    def feature_importances(self) -> np.ndarray:
        """Per-tree normalised Gini decrease, averaged over trees, renormalised."""
        acc = np.zeros(self.n_features)
        for t in self.trees:
            s = t.importance.sum()
            if s > 0:
                acc += t.importance / s
        total = acc.sum()
        return acc / total if total > 0 else acc

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.int8)

    def oob_proba(self, X) -> np.ndarray:
        """Out-of-bag class-1 probability (NaN for rows in every bootstrap)."""
        X = np.asarray(X, dtype=float)
        num = np.zeros(len(X))
        cnt = np.zeros(len(X))
        for t in self.trees:
            m = t.oob
            num[m] += t.predict_proba(X[m])
            cnt[m] += 1
        with np.errstate(invalid="ignore"):
            return np.where(cnt > 0, num / np.maximum(cnt, 1), np.nan)


def fit_random_forest(X, y, config: ForestConfig | None = None) -> Forest:
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(float)
    if X.ndim != 2 or len(y) != len(X):
        raise ValidationError("X must be 2-D with one label per row")
    if not np.isfinite(X).all():
        raise ValidationError("X contains missing or non-finite cells")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("labels must be binary")
    if len(np.unique(y)) < 2:
        raise SingleClass("y is constant")
    if config.n_trees < 1:
        raise ValidationError("n_trees must be >= 1")
    mtry = config.resolved_mtry(X.shape[1])
    jobs = config.n_jobs or n_jobs_from_env()
    args = (mtry, config.min_leaf, config.max_depth)
    if jobs > 1:
        trees = Parallel(n_jobs=jobs)(
            delayed(_fit_one)(X, y, config.seed, t, *args) for t in range(config.n_trees))
    else:
        trees = [_fit_one(X, y, config.seed, t, *args) for t in range(config.n_trees)]
    return Forest(trees, X.shape[1])


@dataclass
class ImportanceTable:
    names: list[str]
    per_fold: np.ndarray
    n_top: int

    @property
    def mean(self) -> np.ndarray:
        return self.per_fold.mean(axis=0)

    @property
    def order(self) -> np.ndarray:
        return np.lexsort((np.arange(len(self.names)), -self.mean))

    @property
    def rank(self) -> np.ndarray:
        r = np.empty(len(self.names), dtype=int)
        r[self.order] = np.arange(1, len(self.names) + 1)
        return r

    @property
    def top(self) -> list[str]:
        return [self.names[i] for i in self.order[: self.n_top]]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"feature": self.names, "mean": self.mean})
        for f in range(self.per_fold.shape[0]):
            df[f"fold{f + 1}"] = self.per_fold[f]
        df["rank"] = self.rank
        return df.sort_values("rank").reset_index(drop=True)


def rank_features(matrix: FeatureMatrix, y, subject_ids, n_top: int = 20, folds: int = 5,
                  config: ForestConfig | None = None, smote_percent: int = 100,
                  smote_classes="minority", smote_k: int = 5, seed: int = 0) -> ImportanceTable:
    """Cross-validated forest importances with SMOTE applied to each training split.

    ``n_top`` is 20 for the full cohort and 10 for subgroup runs.
    """
    if not matrix.complete:
        raise ValidationError("rank_features needs a complete (imputed) matrix")
    config = config or ForestConfig(seed=seed)
    y = np.asarray(y)
    splits = stratified_subject_folds(subject_ids, y, folds, seed)
    per_fold = []
    for f, (train, _) in enumerate(fold_masks(subject_ids, splits)):
        Xtr, ytr = matrix.values[train], y[train]
        if smote_percent:
            Xtr, ytr = smote_oversample(Xtr, ytr, smote_percent, smote_k, seed=seed + f,
                                        classes=smote_classes, categorical=matrix.discrete)
        cfg = ForestConfig(config.n_trees, config.max_depth, config.mtry, config.min_leaf,
                           config.seed + 7919 * f, config.n_jobs)
        per_fold.append(fit_random_forest(Xtr, ytr, cfg).feature_importances)
    return ImportanceTable(list(matrix.names), np.array(per_fold), min(n_top, len(matrix.names)))
