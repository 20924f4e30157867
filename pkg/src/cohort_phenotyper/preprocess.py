"""Label encoding, KNN imputation, Mahalanobis outlier flags, SMOTE and
quadratic-term augmentation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from .cohort import Cohort
from .errors import (
    ClampedNeighbors,
    DegenerateClass,
    EmptyOverlap,
    InsufficientDonors,
    NotContinuous,
    SingularCovariance,
    UnknownLevel,
    ValidationError,
)


@dataclass
class Codebook:
    """Per categorical feature, level label -> integer code (lexicographic order)."""

    levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def from_levels(cls, levels: dict[str, tuple[str, ...]]) -> "Codebook":
        return cls({name: tuple(sorted(set(lv))) for name, lv in levels.items()})

    def mapping(self, name: str) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.levels[name])}

    def encode(self, name: str, labels) -> np.ndarray:
        m = self.mapping(name)
        try:
            return np.array([m[str(lab)] for lab in labels], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLevel(f"{name}: level {exc.args[0]!r} not in {self.levels[name]}") from None

    def decode(self, name: str, codes) -> np.ndarray:
        lv = self.levels[name]
        return np.array([lv[int(c)] for c in codes], dtype=object)

    def to_dict(self) -> dict:
        return {name: self.mapping(name) for name in self.levels}


@dataclass
class FeatureMatrix:
    """Numeric feature matrix with its missingness mask.

    ``kinds`` follows the cohort schema; categorical columns hold codes.
    ``imputed`` marks cells filled by :func:`impute_knn`.
    """

    values: np.ndarray
    missing: np.ndarray
    names: list[str]
    kinds: list[str]
    imputed: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.ndim != 2 or self.missing.shape != self.values.shape:
            raise ValidationError("values and missing mask must be 2-D with equal shape")
        if len(self.names) != self.values.shape[1] or len(self.kinds) != self.values.shape[1]:
            raise ValidationError("names/kinds must match the number of columns")
        if self.imputed is None:
            self.imputed = np.zeros_like(self.missing)

    @property
    def discrete(self) -> np.ndarray:
        return np.array([k != "continuous" for k in self.kinds])

    @property
    def complete(self) -> bool:
        return not self.missing.any()

    def columns(self, names) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.values[:, idx]


def encode_categoricals(cohort: Cohort) -> tuple[FeatureMatrix, Codebook]:
    """Replace categorical labels by their lexicographic level index."""
    codebook = Codebook.from_levels(
        {s.name: s.category_levels for s in cohort.specs if s.is_categorical})
    n, p = len(cohort), len(cohort.specs)
    values = np.zeros((n, p))
    for j, s in enumerate(cohort.specs):
        col = cohort.column(s.name)
        obs = ~cohort.missing[:, j]
        if s.is_categorical:
            values[obs, j] = codebook.encode(s.name, col[obs])
        else:
            values[:, j] = col
            values[~obs, j] = 0.0
    fm = FeatureMatrix(values, cohort.missing.copy(), cohort.names, [s.kind for s in cohort.specs])
    return fm, codebook


def _observed_scale(values, missing):
    obs = ~missing
    cnt = obs.sum(axis=0)
    mean = np.where(cnt > 0, (values * obs).sum(axis=0) / np.maximum(cnt, 1), 0.0)
    var = np.where(cnt > 0, (((values - mean) * obs) ** 2).sum(axis=0) / np.maximum(cnt, 1), 0.0)
    sd = np.sqrt(var)
    return mean, np.where(sd > 0, sd, 1.0)


def _mode(vals: np.ndarray) -> float:
    uniq, counts = np.unique(vals, return_counts=True)
    return float(uniq[np.argmax(counts)])  # np.unique sorts, so ties go to the smallest code


def impute_knn(matrix: FeatureMatrix, k: int = 5) -> FeatureMatrix:
    """Fill each missing cell from the ``k`` nearest rows that observe its column.

    Distances are Euclidean over z-scored columns observed in both rows,
    rescaled by ``p / overlap`` so rows with fewer shared columns are not
    favoured.  Continuous cells take the donor mean; discrete cells the donor
    mode (smallest code on ties).  Cells whose row shares no column with
    enough donors fall back to the column mean/mode and raise
    :class:`EmptyOverlap` as a warning.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    X, M = matrix.values, matrix.missing
    n, p = X.shape
    obs = ~M
    n_obs = obs.sum(axis=0)
    for j in np.flatnonzero(M.any(axis=0)):
        if n_obs[j] < k:
            raise InsufficientDonors(f"column {matrix.names[j]!r}: {n_obs[j]} observed rows < k={k}")
    mean, sd = _observed_scale(X, M)
    Z = np.where(obs, (X - mean) / sd, 0.0)
    discrete = matrix.discrete

    out = X.copy()
    fallback = []
    for r in np.flatnonzero(M.any(axis=1)):
        shared = obs & obs[r]
        count = shared.sum(axis=1)
        sq = (((Z - Z[r]) ** 2) * shared).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(count > 0, np.sqrt(sq * p / count), np.inf)
        dist[r] = np.inf
        for j in np.flatnonzero(M[r]):
            donors = np.flatnonzero(obs[:, j] & np.isfinite(dist))
            if donors.size < k:
                col = X[obs[:, j], j]
                out[r, j] = _mode(col) if discrete[j] else float(col.mean())
                fallback.append((int(r), matrix.names[j]))
                continue
            order = np.lexsort((donors, dist[donors]))[:k]
            vals = X[donors[order], j]
            out[r, j] = _mode(vals) if discrete[j] else float(vals.mean())
    if fallback:
        warnings.warn(f"{len(fallback)} cells imputed by column mean/mode (no overlapping donors): "
                      f"{fallback[:5]}", EmptyOverlap, stacklevel=2)
    # observed cells are returned bit-identical
    out[obs] = X[obs]
    return replace(matrix, values=out, missing=np.zeros_like(M), imputed=M.copy())


@dataclass
class OutlierReport:
    distance: np.ndarray
    d2: np.ndarray
    threshold: float
    flags: np.ndarray
    alpha: float
    ridge: float = 0.0

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold_d2": self.threshold,
            "ridge": self.ridge,
            "n_flagged": int(self.flags.sum()),
            "flagged_rows": np.flatnonzero(self.flags).tolist(),
            "distance": self.distance.tolist(),
        }


def mahalanobis_outliers(X, alpha: float = 0.001) -> OutlierReport:
    """Squared Mahalanobis distance to the sample mean; flag rows beyond the
    chi-square(p) quantile at ``1 - alpha``.  Flagged rows are only reported."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n <= p:
        raise ValidationError(f"need more rows than columns (got {n} x {p})")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must be in (0, 1)")
    m = X.mean(axis=0)
    D = X - m
    S = D.T @ D / (n - 1)
    ridge = 0.0
    if np.linalg.cond(S) > 1e12:
        ridge = 1e-8 * np.trace(S) / p
        S = S + ridge * np.eye(p)
    try:
        c = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        raise SingularCovariance("covariance is singular even after ridge regularization") from None
    d2 = np.einsum("ij,ij->i", D, linalg.cho_solve(c, D.T).T)
    d2 = np.maximum(d2, 0.0)
    thr = float(chi2.ppf(1.0 - alpha, p))
    return OutlierReport(np.sqrt(d2), d2, thr, d2 > thr, alpha, ridge)


@dataclass
class SmoteResult:
    """Augmented data.  Originals come first in their input order, synthetic
    rows after; ``parent``/``neighbor`` index the source rows (-1 for originals)."""

    X: np.ndarray
    y: np.ndarray
    synthetic: np.ndarray
    parent: np.ndarray
    neighbor: np.ndarray
    lam: np.ndarray

    def __iter__(self):
        yield self.X
        yield self.y


def interpolate(parent, neighbor, lam, categorical=None):
    """``parent + lam * (neighbor - parent)``; categorical cells copy the parent."""
    parent = np.asarray(parent, dtype=float)
    out = parent + lam * (np.asarray(neighbor, dtype=float) - parent)
    if categorical is not None:
        cat = np.asarray(categorical, dtype=bool)
        out[cat] = parent[cat]
    return out


def smote_oversample(X, y, percent: int = 100, k: int = 5, seed: int = 0,
                     classes="minority", categorical=None) -> SmoteResult:
    """Synthetic oversampling by interpolation towards same-class neighbours.

    ``percent`` must be a multiple of 100; each 100% adds one synthetic row
    per member of every target class.  ``classes`` is ``"minority"``,
    ``"both"`` (every class) or an explicit list of labels.  Neighbour search
    uses z-scored continuous columns and raw codes for ``categorical`` ones.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n, p = X.shape
    if len(y) != n:
        raise ValidationError("X and y lengths differ")
    if percent < 0 or percent % 100:
        raise ValidationError("percent must be a non-negative multiple of 100")
    cat = np.zeros(p, dtype=bool) if categorical is None else np.asarray(categorical, dtype=bool)
    labels, counts = np.unique(y, return_counts=True)
    if classes == "minority":
        targets = [labels[np.argmin(counts)]]
    elif classes == "both":
        targets = list(labels)
    else:
        targets = list(classes)

    rng = np.random.default_rng(seed)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.where(cat, X, (X - mean) / sd)

    new_X, new_y, parents, nbrs, lams = [], [], [], [], []
    rounds = percent // 100
    for c in targets:
        members = np.flatnonzero(y == c)
        if members.size < 2:
            raise DegenerateClass(f"class {c!r} has {members.size} member(s); need >= 2")
        kk = k
        if members.size < k + 1:
            kk = members.size - 1
            warnings.warn(f"class {c!r}: k clamped from {k} to {kk}", ClampedNeighbors, stacklevel=2)
        Zc = Z[members]
        d2 = ((Zc[:, None, :] - Zc[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        idx = np.arange(members.size)
        nn = np.array([np.lexsort((idx, row))[:kk] for row in d2])
        for _ in range(rounds):
            for a in range(members.size):
                b = nn[a, rng.integers(kk)]
                lam = rng.random()
                new_X.append(interpolate(X[members[a]], X[members[b]], lam, cat))
                new_y.append(c)
                parents.append(members[a])
                nbrs.append(members[b])
                lams.append(lam)
    m = len(new_X)
    Xs = np.vstack([X] + ([np.array(new_X)] if m else []))
    ys = np.concatenate([y, np.array(new_y, dtype=y.dtype)])
    return SmoteResult(
        X=Xs,
        y=ys,
        synthetic=np.r_[np.zeros(n, bool), np.ones(m, bool)],
        parent=np.r_[np.full(n, -1), np.array(parents, dtype=int)],
        neighbor=np.r_[np.full(n, -1), np.array(nbrs, dtype=int)],
        lam=np.r_[np.full(n, np.nan), np.array(lams)],
    )


def augment_quadratic(matrix: FeatureMatrix, features) -> FeatureMatrix:
    """Append a squared copy ``f^2`` of each named continuous column."""
    extra_vals, extra_names = [], []
    for f in features:
        if f not in matrix.names:
            raise ValidationError(f"unknown feature {f!r}")
        j = matrix.names.index(f)
        if matrix.kinds[j] != "continuous":
            raise NotContinuous(f"{f!r} is {matrix.kinds[j]}, not continuous")
        extra_vals.append(matrix.values[:, j] ** 2)
        extra_names.append(f"{f}^2")
    if not extra_vals:
        return replace(matrix)
    cols = np.column_stack(extra_vals)
    j_src = [matrix.names.index(f) for f in features]
    return FeatureMatrix(
        np.hstack([matrix.values, cols]),
        np.hstack([matrix.missing, matrix.missing[:, j_src]]),
        matrix.names + extra_names,
        matrix.kinds + ["continuous"] * len(extra_names),
        np.hstack([matrix.imputed, matrix.imputed[:, j_src]]),
    )
