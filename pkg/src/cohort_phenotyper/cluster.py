"""Gaussian mixture clustering of the embedding, cluster contrasts and
visit-to-visit trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from scipy.special import gammaln, logsumexp

from .errors import DegenerateComponent, DegenerateTable, ValidationError, ZeroVariance
from .forest import n_jobs_from_env
from .lgmm import sig_code
from .preprocess import FeatureMatrix

LOG2PI = np.log(2.0 * np.pi)


@dataclass
class GmmConfig:
    tol: float = 1e-8
    max_iter: int = 500
    restarts: int = 10
    seed: int = 0
    eig_floor: float = 1e-6
    max_rescues: int = 3
    n_jobs: int | None = None


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    loglik_trace: list[float]
    n: int
    seed: int = 0
    restarts: int = 1
    rescues: int = 0
    converged: bool = True

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    @property
    def n_params(self) -> int:
        # weights, 2-D means, 2x2 symmetric covariances
        return self.K - 1 + 2 * self.K + 3 * self.K

    @property
    def bic(self) -> float:
        return bic(self, self.n)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covs.tolist(),
            "loglik": self.loglik,
            "bic": self.bic,
            "n": self.n,
            "iterations": len(self.loglik_trace),
            "converged": self.converged,
            "seed": self.seed,
            "restarts": self.restarts,
            "rescues": self.rescues,
        }


def _log_weighted(Y, weights, means, covs):
    """n x K matrix of log(pi_k) + log N(y; mu_k, Sigma_k)."""
    L = np.linalg.cholesky(covs)
    D = Y[None, :, :] - means[:, None, :]
    z = np.linalg.solve(L, np.swapaxes(D, 1, 2))
    logdet = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    d = Y.shape[1]
    logpdf = -0.5 * (np.sum(z * z, axis=1) + d * LOG2PI) - logdet[:, None]
    return (np.log(weights)[:, None] + logpdf).T


def _floor_cov(covs, floor):
    """Symmetrise and clip eigenvalues at ``floor``; also flag collapsed covariances."""
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    vals, vecs = np.linalg.eigh(covs)
    collapsed = vals.min(axis=-1) < floor
    if collapsed.any():
        covs = (vecs * np.maximum(vals, floor)[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return covs, collapsed


def _kmeans_pp(Y, K, rng):
    centers = [Y[rng.integers(len(Y))]]
    d2 = np.sum((Y - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(len(Y), p=d2 / total) if total > 0 else rng.integers(len(Y))
        centers.append(Y[idx])
        d2 = np.minimum(d2, np.sum((Y - Y[idx]) ** 2, axis=1))
    return np.array(centers)


def _em_run(Y, K, cfg: GmmConfig, r):
    """One EM run from a k-means++ start, or None if components keep collapsing.

    A component is degenerate when its responsibility mass falls below
    1e-6 n or its covariance collapses onto the eigenvalue floor (scaled by
    the mean data variance when that exceeds 1); it is
    restarted at a random point and the trace begins afresh.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(K, r)))
    n, d = Y.shape
    data_cov = np.atleast_2d(np.cov(Y.T, bias=True))
    # floor scales with the data so collapse detection is unit-free
    floor = cfg.eig_floor * max(1.0, float(np.trace(data_cov)) / d)
    base_cov, _ = _floor_cov(data_cov, floor)
    means = _kmeans_pp(Y, K, rng)
    covs = np.repeat(base_cov[None], K, axis=0)
    weights = np.full(K, 1.0 / K)
    trace: list[float] = []
    rescues = 0
    converged = False
    for _ in range(cfg.max_iter):
        logw = _log_weighted(Y, weights, means, covs)
        ll = float(logsumexp(logw, axis=1).sum())
        if trace and ll < trace[-1]:
            # rounding noise at the optimum; keep the previous parameters
            weights, means, covs = prev
            converged = True
            break
        if trace and abs(ll - trace[-1]) < cfg.tol * abs(trace[-1]):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        resp = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        Nk = resp.sum(axis=0)
        dead = Nk < 1e-6 * n
        if not dead.any():
            new_means = (resp.T @ Y) / Nk[:, None]
            D = Y[None, :, :] - new_means[:, None, :]
            raw = np.einsum("kn,kni,knj->kij", resp.T, D, D) / Nk[:, None, None]
            new_covs, dead = _floor_cov(raw, floor)
        if dead.any():
            rescues += int(dead.sum())
            if rescues > cfg.max_rescues:
                return None
            for k in np.flatnonzero(dead):
                means[k] = Y[rng.integers(n)]
                covs[k] = base_cov
            weights = np.full(K, 1.0 / K)
            trace = []
            continue
        prev = (weights, means, covs)
        weights, means, covs = Nk / n, new_means, new_covs
    return GmmModel(weights, means, covs, trace, n, cfg.seed, cfg.restarts, rescues, converged)


def _sorted(model: GmmModel) -> GmmModel:
    order = np.lexsort(model.means.T[::-1])
    model.weights = model.weights[order]
    model.means = model.means[order]
    model.covs = model.covs[order]
    return model


def gmm_fit_em(Y, K: int, config: GmmConfig | None = None) -> GmmModel:
    """Best-of-restarts full-covariance GMM fitted by EM.

    Components are ordered by their first mean coordinate so that labels are
    stable between runs.
    """
    cfg = config or GmmConfig()
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or not np.isfinite(Y).all():
        raise ValidationError("Y must be a finite 2-D array")
    if K < 1 or len(Y) < 3 * K:
        raise ValidationError(f"need K >= 1 and at least 3K points (n={len(Y)}, K={K})")
    if cfg.restarts < 1:
        raise ValidationError("restarts must be >= 1")
    jobs = cfg.n_jobs or n_jobs_from_env()
    if jobs > 1 and cfg.restarts > 1:
        runs = Parallel(n_jobs=jobs)(delayed(_em_run)(Y, K, cfg, r) for r in range(cfg.restarts))
    else:
        runs = [_em_run(Y, K, cfg, r) for r in range(cfg.restarts)]
    runs = [m for m in runs if m is not None]
    if not runs:
        raise DegenerateComponent(f"K={K}: every restart collapsed a component "
                                  f"more than {cfg.max_rescues} times")
    best = runs[int(np.argmax([m.loglik for m in runs]))]
    return _sorted(best)


def bic(model: GmmModel, n: int) -> float:
    return float(model.n_params * np.log(n) - 2.0 * model.loglik)


def select_k(Y, k_range=range(1, 7), config: GmmConfig | None = None):
    """Fit every K in ``k_range``; return (argmin-BIC K, {K: model}).

    A K whose every restart degenerates is left out of the comparison.
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValidationError("k_range is empty")
    models = {}
    for k in ks:
        try:
            models[k] = gmm_fit_em(Y, k, config)
        except DegenerateComponent:
            if k == ks[0] and len(ks) == 1:
                raise
    if not models:
        raise DegenerateComponent("no K in range could be fitted")
    best = min(models, key=lambda k: (models[k].bic, k))
    return best, models


@dataclass
class ClusterAssignment:
    responsibilities: np.ndarray
    labels: np.ndarray


def assign_clusters(model: GmmModel, Y) -> ClusterAssignment:
    logw = _log_weighted(np.asarray(Y, dtype=float), model.weights, model.means, model.covs)
    resp = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    return ClusterAssignment(resp, np.argmax(logw, axis=1))


def kld_gaussian_1d(p, q) -> float:
    """D(N(p) || N(q)) for ``(mean, variance)`` pairs."""
    (mp, vp), (mq, vq) = p, q
    if vp <= 0 or vq <= 0:
        raise ZeroVariance("variances must be positive")
    return float(0.5 * np.log(vq / vp) + (vp + (mp - mq) ** 2) / (2.0 * vq) - 0.5)


def kld_discrete(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = p > 0
    return float(max(np.sum(p[m] * np.log(p[m] / q[m])), 0.0))


def smoothed_pmf(values, levels) -> np.ndarray:
    """Empirical PMF over ``levels`` with 1/L pseudo-count per level."""
    L = len(levels)
    counts = np.array([np.sum(values == lv) for lv in levels], dtype=float)
    return (counts + 1.0 / L) / (len(values) + 1.0)


@dataclass
class KldReport:
    features: list[str]
    kld: np.ndarray
    methods: list[str]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"feature": self.features, "kld": self.kld, "method": self.methods})


def _two_clusters(labels, a, b):
    labels = np.asarray(labels)
    ia, ib = labels == a, labels == b
    if not ia.any() or not ib.any():
        raise ValidationError(f"clusters {a} and {b} must both be non-empty")
    return ia, ib


def per_feature_kld(matrix: FeatureMatrix, labels, a: int = 0, b: int = 1) -> KldReport:
    """Per-feature D(cluster a || cluster b), sorted descending.

    Continuous features use per-cluster Gaussian fits; discrete features use
    smoothed empirical PMFs.
    """
    ia, ib = _two_clusters(labels, a, b)
    X = matrix.values
    rows = []
    for j, (name, kind) in enumerate(zip(matrix.names, matrix.kinds)):
        xa, xb = X[ia, j], X[ib, j]
        if kind == "continuous":
            span = float(np.ptp(X[ia | ib, j]))
            if span == 0:
                rows.append((name, 0.0, "gaussian"))
                continue
            floor = 1e-12 * span ** 2
            d = kld_gaussian_1d((xa.mean(), max(xa.var(), floor)), (xb.mean(), max(xb.var(), floor)))
            rows.append((name, max(d, 0.0), "gaussian"))
        else:
            levels = (0.0, 1.0) if kind == "binary" else np.unique(X[ia | ib, j])
            d = kld_discrete(smoothed_pmf(xa, levels), smoothed_pmf(xb, levels))
            rows.append((name, d, "smoothed_pmf"))
    rows.sort(key=lambda r: -r[1])
    return KldReport([r[0] for r in rows], np.array([r[1] for r in rows]), [r[2] for r in rows])


def welch_test(a, b) -> tuple[float, float, float]:
    """Welch two-sample t-test: (t, df, two-sided p)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        return (0.0, np.nan, 1.0) if diff == 0 else (np.copysign(np.inf, diff), np.nan, 0.0)
    t = diff / np.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return float(t), float(df), float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def fisher_exact_rx2(table, max_tables: int = 2_000_000) -> float:
    """Two-sided exact p for an r x 2 table with fixed margins.

    Sums the probabilities of every table no more likely than the observed
    one.  Returns NaN when the enumeration would exceed ``max_tables``.
    """
    T = np.asarray(table, dtype=np.int64)
    if T.ndim != 2 or T.shape[1] != 2 or (T < 0).any():
        raise ValidationError("expected an r x 2 table of non-negative counts")
    rows = T.sum(axis=1)
    c1 = int(T[:, 0].sum())
    N = int(rows.sum())
    if N == 0 or (rows == 0).any() or (T.sum(axis=0) == 0).any():
        raise DegenerateTable("table has an all-zero margin")
    exact = _fisher_exact_int(rows, T[:, 0], c1)
    if exact is not None:
        return exact
    obs = float(np.sum(_log_comb(rows, T[:, 0])) - _log_comb(N, c1))
    sums = np.zeros(1, dtype=np.int64)
    logp = np.zeros(1)
    remaining = int(rows.sum())
    for r in rows:
        remaining -= r
        x = np.arange(r + 1)
        s = (sums[:, None] + x[None, :]).ravel()
        lp = (logp[:, None] + _log_comb(r, x)[None, :]).ravel()
        keep = (s <= c1) & (s + remaining >= c1)
        sums, logp = s[keep], lp[keep]
        if len(sums) > max_tables:
            return np.nan
    logp -= _log_comb(N, c1)
    # relative tolerance guards against ties lost to rounding
    p = float(np.exp(logp[logp <= obs + 1e-7]).sum())
    return min(1.0, p)


def _fisher_exact_int(rows, col, c1, max_tables: int = 100_000):
    """Exact rational p-value with integer table weights, or None if too many tables."""
    weight = lambda r, x: math.comb(int(r), int(x))
    obs = 1
    for r, x in zip(rows, col):
        obs *= weight(r, x)
    # partial column sums -> list of integer weights
    tables = {0: [1]}
    remaining = int(rows.sum())
    for r in rows:
        remaining -= int(r)
        nxt: dict[int, list[int]] = {}
        for s, ws in tables.items():
            for x in range(int(r) + 1):
                t = s + x
                if t <= c1 and t + remaining >= c1:
                    w = weight(r, x)
                    nxt.setdefault(t, []).extend(v * w for v in ws)
        tables = nxt
        if sum(len(v) for v in tables.values()) > max_tables:
            return None
    ws = tables[c1]
    total = math.comb(int(rows.sum()), c1)
    return float(Fraction(sum(w for w in ws if w <= obs), total))


def contingency_test(table) -> tuple[float, str]:
    """Chi-square (no continuity correction), or exact when an expected cell is < 5."""
    T = np.asarray(table, dtype=float)
    rs, cs = T.sum(axis=1), T.sum(axis=0)
    if T.sum() == 0 or (rs == 0).any() or (cs == 0).any():
        raise DegenerateTable("table has an all-zero margin")
    expected = np.outer(rs, cs) / T.sum()
    if (expected < 5).any() and T.shape[1] == 2:
        p = fisher_exact_rx2(T.astype(np.int64))
        if np.isfinite(p):
            return p, "fisher"
    chi = float(np.sum((T - expected) ** 2 / expected))
    df = (T.shape[0] - 1) * (T.shape[1] - 1)
    return float(stats.chi2.sf(chi, df)), "chi2"


def _level_summary(x, levels, n):
    return "; ".join(f"{lv:g}: {int(np.sum(x == lv))}({100.0 * np.sum(x == lv) / n:.2f}%)"
                     for lv in levels)


def compare_clusters(matrix: FeatureMatrix, labels, a: int = 0, b: int = 1) -> pd.DataFrame:
    """Per-feature two-cluster comparison with p-values and sig codes."""
    ia, ib = _two_clusters(labels, a, b)
    na, nb = int(ia.sum()), int(ib.sum())
    if na < 2 or nb < 2:
        raise ValidationError("each cluster needs at least 2 rows")
    ca, cb = f"Cluster 1 (n = {na})", f"Cluster 2 (n = {nb})"
    out = []
    for j, (name, kind) in enumerate(zip(matrix.names, matrix.kinds)):
        xa, xb = matrix.values[ia, j], matrix.values[ib, j]
        if kind == "continuous":
            _, _, p = welch_test(xa, xb)
            sa = f"{xa.mean():.2f} ± {xa.std(ddof=1):.2f}"
            sb = f"{xb.mean():.2f} ± {xb.std(ddof=1):.2f}"
            test = "welch"
        else:
            levels = np.unique(np.concatenate([xa, xb]))
            if kind == "binary":
                sa = f"{int(xa.sum())}({100.0 * xa.mean():.2f}%)"
                sb = f"{int(xb.sum())}({100.0 * xb.mean():.2f}%)"
            else:
                sa, sb = _level_summary(xa, levels, na), _level_summary(xb, levels, nb)
            if len(levels) < 2:
                p, test = 1.0, "constant"
            else:
                table = np.array([[np.sum(xa == lv), np.sum(xb == lv)] for lv in levels])
                p, test = contingency_test(table)
        out.append({"Variables": name, ca: sa, cb: sb, "p-value": p,
                    "Sig code": sig_code(p), "test": test})
    return pd.DataFrame(out, columns=["Variables", ca, cb, "p-value", "Sig code", "test"])


@dataclass
class TrajectorySummary:
    """Mean consecutive-visit displacement per (group, cluster, visit pair).

    Displacements are attributed to the cluster of the later visit.  Rows
    with ``cluster`` = -1 pool all clusters of a group.
    """

    distances: pd.DataFrame
    transitions: dict[tuple[int, int], np.ndarray]
    skipped: dict[tuple[int, int], int] = field(default_factory=dict)
    attribution: str = "later_visit"

    def to_dict(self) -> dict:
        return {
            "attribution": self.attribution,
            "distances": self.distances.to_dict(orient="records"),
            "transitions": {f"{u}->{v}": m.tolist() for (u, v), m in self.transitions.items()},
            "skipped": {f"{u}->{v}": c for (u, v), c in self.skipped.items()},
        }

    def describe(self) -> list[str]:
        pooled = self.distances[self.distances["cluster"] == -1]
        lines = []
        for g, sub in pooled.groupby("group", sort=True):
            parts = [f"{r.mean_distance:.2f} units (visit {r.from_visit} to {r.to_visit})"
                     for r in sub.itertuples()]
            lines.append(f"Group {g}: " + ", then ".join(parts))
        return lines


def trajectory_distances(coords, subject_ids, visits, labels, groups, K: int | None = None
                         ) -> TrajectorySummary:
    """Displacement of each subject between consecutive visits in the embedding.

    ``groups`` gives each row's outcome group; subjects missing either visit
    of a pair are skipped and counted.
    """
    coords = np.asarray(coords, dtype=float)
    sids = np.asarray(subject_ids, dtype=object).astype(str)
    visits = np.asarray(visits, dtype=int)
    labels = np.asarray(labels, dtype=int)
    groups = np.asarray(groups, dtype=int)
    K = int(labels.max()) + 1 if K is None else K
    index = {(s, v): i for i, (s, v) in enumerate(zip(sids, visits))}
    subjects = list(dict.fromkeys(sids.tolist()))
    vs = sorted(set(visits.tolist()))
    records, transitions, skipped = [], {}, {}
    for u, v in zip(vs[:-1], vs[1:]):
        trans = np.zeros((K, K), dtype=np.int64)
        dist, grp, clu = [], [], []
        miss = 0
        for s in subjects:
            i, j = index.get((s, u)), index.get((s, v))
            if i is None or j is None:
                miss += 1
                continue
            dist.append(float(np.linalg.norm(coords[j] - coords[i])))
            grp.append(groups[j])
            clu.append(labels[j])
            trans[labels[i], labels[j]] += 1
        transitions[(u, v)] = trans
        skipped[(u, v)] = miss
        dist, grp, clu = np.array(dist), np.array(grp, dtype=int), np.array(clu, dtype=int)
        for g in np.unique(grp):
            mg = grp == g
            records.append((int(g), -1, u, v, int(mg.sum()), float(dist[mg].mean())))
            for c in np.unique(clu[mg]):
                m = mg & (clu == c)
                records.append((int(g), int(c), u, v, int(m.sum()), float(dist[m].mean())))
    df = pd.DataFrame(records, columns=["group", "cluster", "from_visit", "to_visit",
                                        "n_subjects", "mean_distance"])
    return TrajectorySummary(df, transitions, skipped)
