"""Exact t-SNE to two dimensions.

Affinities use a Gaussian kernel whose per-point bandwidth is found by
bisection so that each conditional distribution hits the target perplexity;
the low-dimensional kernel is Student-t with one degree of freedom.
Optimisation is gradient descent with momentum and per-coordinate gains,
with early exaggeration of P for the first iterations.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CalibrationFailed, DegenerateCalibration, ValidationError

EPS = 1e-12


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    total_iters: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    min_gain: float = 0.01
    restart_slack: float | None = 1e-3
    init: str = "random"
    standardize: bool = True
    seed: int = 0

    def validate(self, n: int) -> None:
        if n < 5:
            raise ValidationError("t-SNE needs at least 5 points")
        if not 1.0 < self.perplexity < n - 1:
            raise ValidationError(f"perplexity must lie in (1, {n - 1})")
        if self.early_exaggeration <= 0 or self.learning_rate <= 0:
            raise ValidationError("exaggeration and learning rate must be positive")
        if self.init not in ("random", "pca"):
            raise ValidationError(f"unknown init {self.init!r}")


def _row_entropy(D, beta):
    """Shannon entropy (nats) and normalised rows of exp(-beta * D)."""
    P = np.exp(-beta[:, None] * D)
    sumP = P.sum(axis=1)
    H = np.log(sumP) + beta * (D * P).sum(axis=1) / sumP
    return H, P / sumP[:, None]


def calibrate_rows(D, perplexity: float, tol: float = 1e-5, max_iter: int = 50):
    """Conditional probabilities for each row of squared distances ``D``.

    ``D`` has shape (m, k) and excludes self-distances.  Returns ``(P, perp)``
    with the achieved perplexities.
    """
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[1] < 2:
        raise ValidationError("each row needs at least 2 distances")
    if not np.isfinite(D).all():
        raise ValidationError("distances must be finite")
    m, k = D.shape
    D = D - D.min(axis=1, keepdims=True)
    flat = D.max(axis=1) == 0
    scale = np.where(flat, 1.0, D.sum(axis=1) / np.maximum((D > 0).sum(axis=1), 1))
    lo = np.log(1e-12 / scale)
    hi = np.log(1e12 / scale)
    target = float(perplexity)

    H_lo, _ = _row_entropy(D, np.exp(lo))
    H_hi, _ = _row_entropy(D, np.exp(hi))
    reachable = (np.exp(H_lo) >= target - tol) & (np.exp(H_hi) <= target + tol)
    if not (reachable | flat).all():
        raise CalibrationFailed(f"perplexity {target} cannot be bracketed for "
                                f"{int((~(reachable | flat)).sum())} row(s)")
    logb = 0.5 * (lo + hi)
    H, P = _row_entropy(D, np.exp(logb))
    for _ in range(max_iter):
        perp = np.exp(H)
        done = np.abs(perp - target) < tol
        if done.all():
            break
        high = perp > target          # too flat: increase precision
        lo = np.where(~done & high, logb, lo)
        hi = np.where(~done & ~high, logb, hi)
        logb = np.where(done, logb, 0.5 * (lo + hi))
        H, P = _row_entropy(D, np.exp(logb))
    perp = np.exp(H)
    if flat.any():
        P[flat] = 1.0 / k
        perp[flat] = float(k)
        if np.any(np.abs(perp[flat] - target) >= tol):
            warnings.warn(f"{int(flat.sum())} row(s) have all-equal distances; uniform row used",
                          DegenerateCalibration, stacklevel=2)
    return P, perp


def perplexity_calibration(sq_distance_row, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 50) -> np.ndarray:
    """Conditional neighbour probabilities p_{j|i} for one row (self excluded)."""
    P, _ = calibrate_rows(np.asarray(sq_distance_row, dtype=float)[None, :], perplexity, tol, max_iter)
    return P[0]


def squared_distances(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def joint_probabilities(X, perplexity: float) -> np.ndarray:
    """Symmetrised P = (P_{j|i} + P_{i|j}) / (2n) with zero diagonal."""
    D = squared_distances(X)
    n = len(D)
    off = ~np.eye(n, dtype=bool)
    cond, _ = calibrate_rows(D[off].reshape(n, n - 1), perplexity)
    Pc = np.zeros((n, n))
    Pc[off] = cond.reshape(-1)
    P = (Pc + Pc.T) / (2.0 * n)
    return P


def tsne_cost_grad(P, Y):
    """KL(P || Q) and its gradient with respect to the embedding ``Y``."""
    P = np.asarray(P, dtype=float)
    return _cost_grad(P, np.asarray(Y, dtype=float), 1.0, _plogp(P))


def _plogp(P) -> float:
    pos = P[P > 0]
    return float(np.sum(pos * np.log(np.maximum(pos, EPS))))


def _cost_grad(P, Y, exaggeration, plogp):
    """KL(P || Q) for the plain P; gradient for ``exaggeration * P``."""
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), EPS)
    cost = plogp - float(np.sum(P * np.log(Q)))
    W = (exaggeration * P - Q) * num
    np.fill_diagonal(W, 0.0)
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    return cost, grad


def kl_cost(P, Y) -> float:
    return tsne_cost_grad(P, Y)[0]


@dataclass
class Embedding:
    coords: np.ndarray
    cost_trace: np.ndarray
    config: dict = field(default_factory=dict)
    seed: int = 0
    restarts: int = 0

    @property
    def final_cost(self) -> float:
        return float(self.cost_trace[-1])


def _standardize(X):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mean) / sd


def _initial_coords(X, config: TsneConfig):
    n = len(X)
    if config.init == "pca":
        Xc = X - X.mean(axis=0)
        U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        # fix signs so the largest-magnitude loading is positive
        signs = np.sign(Vt[np.arange(2), np.argmax(np.abs(Vt[:2]), axis=1)])
        Y = Xc @ (Vt[:2].T * signs)
        sd = Y[:, 0].std()
        return Y / (sd if sd > 0 else 1.0) * 1e-4
    rng = np.random.default_rng(config.seed)
    return 1e-4 * rng.standard_normal((n, 2))


def tsne_embed(X, config: TsneConfig | None = None) -> Embedding:
    config = config or TsneConfig()
    X = np.asarray(X, dtype=float)
    if not np.isfinite(X).all():
        raise ValidationError("X has missing or non-finite cells")
    n = len(X)
    config.validate(n)
    # work in lexicographic row order so the result does not depend on input order
    order = np.lexsort(X.T[::-1])
    X = X[order]
    if config.standardize:
        X = _standardize(X)
    P = joint_probabilities(X, config.perplexity)
    plogp = _plogp(P)
    Y = _initial_coords(X, config)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    step_scale = 1.0
    restarts = 0
    slack = config.restart_slack
    E = config.exaggeration_iters
    trace = []
    prev = None
    for it in range(config.total_iters):
        exaggerate = it < E
        if it == E:
            # second phase starts with fresh velocity and gains
            update[:] = 0.0
            gains[:] = 1.0
        cost, grad = _cost_grad(P, Y, config.early_exaggeration if exaggerate else 1.0, plogp)
        if slack is not None and it > E and cost > prev[1] + slack:
            # adaptive restart: reject the step, drop momentum, shrink the step size
            Y, cost, grad = prev
            update[:] = 0.0
            gains[:] = 1.0
            step_scale *= 0.5
            restarts += 1
        prev = (Y, cost, grad)
        trace.append(cost)
        mom = config.momentum if it < config.momentum_switch else config.final_momentum
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, config.min_gain, out=gains)
        update = mom * update - config.learning_rate * step_scale * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    final = kl_cost(P, Y)
    if slack is not None and config.total_iters > E and final > prev[1] + slack:
        Y, final = prev[0], prev[1]
    trace.append(final)
    coords = np.empty_like(Y)
    coords[order] = Y
    return Embedding(coords, np.array(trace), asdict(config), config.seed, restarts)
