"""Random-intercept logistic mixed model fitted by maximum marginal likelihood.

Model: ``logit P(y_ij = 1) = x_ij' beta + mu_i`` with ``mu_i ~ N(0, sigma^2)``.
Writing ``mu_i = sigma * u_i`` with ``u_i ~ N(0, 1)``, each subject's
marginal likelihood ``L_i = int exp(h_i(u)) du`` is approximated by adaptive
Gauss-Hermite quadrature centred at the mode of ``h_i`` and scaled by its
curvature (one node = Laplace approximation).

The optimiser works on ``theta = (beta on standardised covariates, log sigma)``
and uses the exact gradient of the quadrature approximation, which includes
the dependence of each subject's mode and curvature on ``theta``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import expit, logsumexp
from scipy.stats import norm

from .errors import NonFinite, NotConverged, SeparationDetected, UnknownSubject, ValidationError

_LOG_2PI = np.log(2.0 * np.pi)
SEPARATION_LIMIT = 10.0  # |beta| on standardised covariates


@dataclass
class LgmmDesign:
    """Covariates (without intercept), binary outcomes and subject grouping."""

    subject_ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    visits: np.ndarray | None = None
    standardize: bool = True

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=object)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float)
        n = len(self.y)
        if self.X.shape[0] != n or len(self.subject_ids) != n:
            raise ValidationError("X, y and subject_ids must have equal length")
        if self.X.shape[1] != len(self.names):
            raise ValidationError("one name per covariate column required")
        if not np.isfinite(self.X).all():
            raise ValidationError("design has missing or non-finite cells")
        if not np.isin(self.y, (0.0, 1.0)).all():
            raise ValidationError("outcomes must be 0/1")
        if self.visits is not None:
            self.visits = np.asarray(self.visits, dtype=np.int64)

    @classmethod
    def from_matrix(cls, matrix, subject_ids, y, features, visits=None,
                    include_visit: bool = False) -> "LgmmDesign":
        X = matrix.columns(features)
        names = list(features)
        if include_visit:
            X = np.column_stack([np.asarray(visits, dtype=float), X])
            names = ["visit"] + names
        return cls(subject_ids, X, y, names, visits)

    def subset(self, mask) -> "LgmmDesign":
        mask = np.asarray(mask)
        return LgmmDesign(self.subject_ids[mask], self.X[mask], self.y[mask], self.names,
                          None if self.visits is None else self.visits[mask], self.standardize)

    @property
    def n_subjects(self) -> int:
        return len(set(self.subject_ids.tolist()))


class _Marginal:
    """Marginal log-likelihood machinery on a fixed design matrix (with intercept)."""

    def __init__(self, Xt, y, subject_ids, quad_points):
        if quad_points < 1:
            raise ValidationError("quad_points must be >= 1")
        subjects, g = np.unique(np.asarray(subject_ids, dtype=object).astype(str), return_inverse=True)
        order = np.argsort(g, kind="stable")
        self.order = order
        self.Xt = Xt[order]
        self.y = y[order]
        self.g = g[order]
        self.subjects = subjects
        self.S = len(subjects)
        self.starts = np.r_[0, np.flatnonzero(np.diff(self.g)) + 1]
        t, w = hermgauss(quad_points)
        self.t = t
        self.logw = np.log(w) + t ** 2
        self.u = np.zeros(self.S)

    def _sum(self, a):
        return np.add.reduceat(a, self.starts, axis=0)

    def modes(self, eta, sigma):
        """Newton ascent on h_i(u) for all subjects at once."""
        u = self.u.copy()
        y = self.y
        for _ in range(200):
            lin = eta + sigma * u[self.g]
            p = expit(lin)
            grad = sigma * self._sum(y - p) - u
            c = sigma ** 2 * self._sum(p * (1 - p)) + 1.0
            step = grad / c
            h0 = self._sum(y * lin - np.logaddexp(0.0, lin)) - 0.5 * u ** 2
            for _ in range(60):
                un = u + step
                ln = eta + sigma * un[self.g]
                h1 = self._sum(y * ln - np.logaddexp(0.0, ln)) - 0.5 * un ** 2
                bad = h1 < h0 - 1e-12 * (1 + np.abs(h0))
                if not bad.any():
                    break
                step = np.where(bad, 0.5 * step, step)
            u = u + step
            if np.max(np.abs(step)) < 1e-12:
                break
        self.u = u
        return u

    def evaluate(self, beta, sigma, gradient=False):
        eta = self.Xt @ beta
        y = self.y
        if not np.isfinite(eta).all():
            raise NonFinite("linear predictor overflow")
        if sigma == 0.0:
            ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
            if not gradient:
                return ll
            return ll, np.r_[self.Xt.T @ (y - expit(eta)), 0.0]

        u = self.modes(eta, sigma)
        lin0 = eta + sigma * u[self.g]
        p0 = expit(lin0)
        v0 = p0 * (1 - p0)
        A = self._sum(v0)
        c = sigma ** 2 * A + 1.0
        s = 1.0 / np.sqrt(c)
        U = u[:, None] + np.sqrt(2.0) * s[:, None] * self.t[None, :]          # (S, Q)
        lin = eta[:, None] + sigma * U[self.g]                                 # (n, Q)
        G = self._sum(y[:, None] * lin - np.logaddexp(0.0, lin))               # (S, Q)
        h = G - 0.5 * U ** 2 - 0.5 * _LOG_2PI
        terms = np.log(np.sqrt(2.0) * s)[:, None] + self.logw[None, :] + h
        logL = logsumexp(terms, axis=1)
        ll = float(logL.sum())
        if not np.isfinite(ll):
            raise NonFinite("marginal log-likelihood is not finite")
        if not gradient:
            return ll

        omega = np.exp(terms - logL[:, None])                                   # (S, Q)
        e = y[:, None] - expit(lin)                                             # (n, Q)
        R = self._sum(e)                                                        # (S, Q)
        hprime = sigma * R - U
        T = np.sum(omega * hprime, axis=1)
        T2 = np.sum(omega * hprime * np.sqrt(2.0) * self.t[None, :], axis=1)
        D = -(1.0 + s * T2) / (2.0 * c)
        kappa = v0 * (1 - 2 * p0)
        K = self._sum(kappa)

        # beta: direct term, curvature term, mode term
        direct_b = self.Xt.T @ np.sum(omega[self.g] * e, axis=1)
        curv_b = sigma ** 2 * (self.Xt.T @ (D[self.g] * kappa))
        coef = D * sigma ** 3 * K + T
        mode_b = self.Xt.T @ (coef[self.g] * (-sigma / c[self.g]) * v0)
        g_beta = direct_b + curv_b + mode_b

        du_tau = u * (1.0 - sigma ** 2 * A) / c
        direct_t = np.sum(omega * sigma * U * R)
        dc_tau = 2 * sigma ** 2 * A + sigma ** 3 * K * (u + du_tau)
        g_tau = direct_t + np.sum(D * dc_tau + T * du_tau)
        return ll, np.r_[g_beta, g_tau]

    def mode_map(self, sigma):
        return {sid: float(sigma * ui) for sid, ui in zip(self.subjects, self.u)}


def _with_intercept(X):
    return np.column_stack([np.ones(len(X)), X])


def lgmm_loglik(design: LgmmDesign, beta, sigma_mu: float, quad_points: int = 15) -> float:
    """Marginal log-likelihood at ``beta`` (intercept first, original scale)."""
    m = _Marginal(_with_intercept(design.X), design.y, design.subject_ids, quad_points)
    return m.evaluate(np.asarray(beta, dtype=float), float(sigma_mu))


def lgmm_loglik_grad(design: LgmmDesign, beta, sigma_mu: float, quad_points: int = 15):
    """Log-likelihood and its gradient with respect to ``(beta, log sigma)``."""
    m = _Marginal(_with_intercept(design.X), design.y, design.subject_ids, quad_points)
    return m.evaluate(np.asarray(beta, dtype=float), float(sigma_mu), gradient=True)


@dataclass
class FitConfig:
    quad_points: int = 15
    tol: float = 1e-8
    max_iter: int = 200
    grad_tol: float = 1e-6


@dataclass
class LgmmFit:
    names: list[str]
    beta: np.ndarray
    sigma_mu: float
    mu_modes: dict[str, float]
    cov_beta: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    loglik_trace: list[float] = field(default_factory=list)
    quad_points: int = 15
    sigma_fixed: bool = False
    separation: bool = False
    grad_max: float = np.nan
    n_obs: int = 0
    n_subjects: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_beta), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "names": ["(Intercept)"] + list(self.names),
            "beta": self.beta.tolist(),
            "sigma_mu": self.sigma_mu,
            "cov_beta": self.cov_beta.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "quad_points": self.quad_points,
            "sigma_fixed": self.sigma_fixed,
            "separation": self.separation,
            "n_obs": self.n_obs,
            "n_subjects": self.n_subjects,
            "mu_modes": self.mu_modes,
        }


def _standardizer(X, enabled):
    if not enabled:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    m = X.mean(axis=0)
    s = X.std(axis=0)
    const = s == 0
    m[const] = 0.0
    s[const] = 1.0
    return m, s


def _back_transform(m, s):
    """Matrix A with beta_original = A @ beta_standardised."""
    p = len(m)
    A = np.eye(p + 1)
    A[0, 1:] = -m / s
    A[1:, 1:] = np.diag(1.0 / s)
    return A


def _fd_hessian(fun_grad, x, rel=1e-5):
    k = len(x)
    H = np.empty((k, k))
    for i in range(k):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros(k)
        e[i] = h
        H[:, i] = (fun_grad(x + e)[1] - fun_grad(x - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def _newton_logistic(m: _Marginal, beta, cfg: FitConfig, trace):
    """Plain logistic regression (sigma = 0) by damped Newton."""
    ll = m.evaluate(beta, 0.0)
    trace.append(ll)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        eta = m.Xt @ beta
        p = expit(eta)
        g = m.Xt.T @ (m.y - p)
        Hn = (m.Xt * (p * (1 - p))[:, None]).T @ m.Xt
        try:
            step = np.linalg.solve(Hn, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(Hn, g, rcond=None)[0]
        for _ in range(60):
            nb = beta + step
            nl = m.evaluate(nb, 0.0)
            if nl >= ll:
                break
            step = 0.5 * step
        else:
            nb, nl = beta, ll
        change = abs(nl - ll) / max(1.0, abs(nl))
        beta, ll = nb, nl
        trace.append(ll)
        gmax = np.max(np.abs(m.Xt.T @ (m.y - expit(m.Xt @ beta))))
        if change < cfg.tol and gmax < cfg.grad_tol:
            converged = True
            break
    return beta, ll, converged, it


def _bfgs(fun_grad, x0, cfg: FitConfig, trace):
    """Maximise with BFGS + Armijo backtracking; every accepted step increases f."""
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    trace.append(f)
    k = len(x)
    Hinv = np.eye(k)
    first = True
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        d = Hinv @ g                 # ascent direction
        if g @ d <= 0:
            Hinv = np.eye(k)
            d = g.copy()
        big = np.max(np.abs(d))
        if big > 5.0:
            d = d * (5.0 / big)
        alpha = 1.0
        accepted = False
        for _ in range(50):
            xn = x + alpha * d
            try:
                fn, gn = fun_grad(xn)
            except NonFinite:
                fn = -np.inf
            if np.isfinite(fn) and fn >= f + 1e-4 * alpha * (g @ d):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        s = xn - x
        yv = g - gn                  # gradient of -f changes by -(gn - g)
        change = abs(fn - f) / max(1.0, abs(fn))
        x, f, g = xn, fn, gn
        trace.append(f)
        sy = s @ yv
        if sy > 1e-12:
            if first:
                Hinv = np.eye(k) * sy / (yv @ yv)
                first = False
            rho = 1.0 / sy
            I = np.eye(k)
            Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        if change < cfg.tol and np.max(np.abs(g)) < cfg.grad_tol:
            converged = True
            break
    return x, f, g, converged, it


def lgmm_fit(design: LgmmDesign, config: FitConfig | None = None,
             sigma_mu: float | None = None) -> LgmmFit:
    """Maximum marginal likelihood fit.

    ``sigma_mu`` fixes the random-intercept SD (``0`` gives plain logistic
    regression); ``None`` estimates it.  Non-convergence and quasi-separation
    are reported through warnings and the ``converged``/``separation`` flags.
    """
    cfg = config or FitConfig()
    if design.n_subjects < 2 and sigma_mu is None:
        raise ValidationError("need at least 2 subjects")
    if np.all(design.y == design.y[0]):
        raise ValidationError("outcomes are all identical")
    ctr, scl = _standardizer(design.X, design.standardize)
    Xt = _with_intercept((design.X - ctr) / scl)
    m = _Marginal(Xt, design.y, design.subject_ids, cfg.quad_points)
    p1 = Xt.shape[1]
    trace: list[float] = []

    beta0 = np.zeros(p1)
    ybar = design.y.mean()
    beta0[0] = np.log(ybar / (1 - ybar))
    lr_trace: list[float] = []
    beta_lr, ll_lr, conv_lr, it_lr = _newton_logistic(m, beta0, cfg, lr_trace)

    if sigma_mu == 0.0:
        beta, ll, converged, iters, sigma = beta_lr, ll_lr, conv_lr, it_lr, 0.0
        trace = lr_trace
        p = expit(m.Xt @ beta)
        info = (m.Xt * (p * (1 - p))[:, None]).T @ m.Xt
        cov_std = _safe_inverse(info)
        gmax = float(np.max(np.abs(m.Xt.T @ (m.y - p))))
    elif sigma_mu is not None:
        sig = float(sigma_mu)
        def fun(b):
            ll_b, g_b = m.evaluate(b, sig, gradient=True)
            return ll_b, g_b[:-1]
        beta, ll, g, converged, iters = _bfgs(fun, beta_lr, cfg, trace)
        sigma = sig
        H = _fd_hessian(fun, beta)
        cov_std = _safe_inverse(-H)
        gmax = float(np.max(np.abs(g)))
    else:
        def fun(theta):
            return m.evaluate(theta[:-1], float(np.exp(theta[-1])), gradient=True)
        theta, ll, g, converged, iters = _bfgs(fun, np.r_[beta_lr, np.log(0.5)], cfg, trace)
        theta, ll, g, converged = _polish(fun, theta, ll, g, converged, cfg, trace)
        beta, sigma = theta[:-1], float(np.exp(theta[-1]))
        if ll_lr >= ll:
            # boundary: the sigma = 0 fit is at least as good
            beta, ll, sigma, g = beta_lr, ll_lr, 0.0, np.r_[m.Xt.T @ (m.y - expit(m.Xt @ beta_lr)), 0.0]
            converged = conv_lr
            trace.append(ll)
        gmax = float(np.max(np.abs(g)))
        cov_std = _covariance(fun, beta, sigma, m)

    if sigma > 0:
        m.evaluate(beta, sigma)  # refresh modes at the estimate
        modes = m.mode_map(sigma)
    else:
        modes = {sid: 0.0 for sid in m.subjects}
    A = _back_transform(ctr, scl)
    separation = bool(np.max(np.abs(beta[1:]), initial=0.0) > SEPARATION_LIMIT
                      or abs(beta[0]) > 3 * SEPARATION_LIMIT)
    if separation:
        warnings.warn("coefficient estimates diverge: (quasi-)complete separation", SeparationDetected,
                      stacklevel=2)
    if not converged:
        warnings.warn(f"fit did not converge in {cfg.max_iter} iterations (max |grad| {gmax:.2e})",
                      NotConverged, stacklevel=2)
    cov = A @ cov_std @ A.T
    return LgmmFit(
        names=list(design.names),
        beta=A @ beta,
        sigma_mu=sigma,
        mu_modes=modes,
        cov_beta=0.5 * (cov + cov.T),
        loglik=float(ll),
        converged=bool(converged),
        iterations=int(iters),
        loglik_trace=[float(v) for v in trace],
        quad_points=cfg.quad_points,
        sigma_fixed=sigma_mu is not None,
        separation=separation,
        grad_max=gmax,
        n_obs=len(design.y),
        n_subjects=m.S,
    )


def _polish(fun, theta, ll, g, converged, cfg, trace):
    """A few Newton steps with a finite-difference Hessian to tighten the gradient."""
    for _ in range(5):
        if converged and np.max(np.abs(g)) < cfg.grad_tol:
            break
        H = _fd_hessian(fun, theta)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or g @ step <= 0:
            break
        improved = False
        for _ in range(30):
            tn = theta + step
            try:
                fn, gn = fun(tn)
            except NonFinite:
                fn = -np.inf
            if np.isfinite(fn) and fn >= ll:
                improved = True
                break
            step = 0.5 * step
        if not improved:
            break
        change = abs(fn - ll) / max(1.0, abs(fn))
        theta, ll, g = tn, fn, gn
        trace.append(ll)
        converged = change < cfg.tol and np.max(np.abs(g)) < cfg.grad_tol
    return theta, ll, g, converged


def _safe_inverse(info):
    info = 0.5 * (info + info.T)
    try:
        np.linalg.cholesky(info)
        inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(info, hermitian=True)
    return 0.5 * (inv + inv.T)


def _covariance(fun, beta, sigma, m):
    """Inverse observed information for beta (standardised scale)."""
    k = len(beta)
    if sigma < 1e-3:
        # sigma at the boundary: information for log sigma vanishes, use the beta block only
        if sigma == 0.0:
            p = expit(m.Xt @ beta)
            return _safe_inverse((m.Xt * (p * (1 - p))[:, None]).T @ m.Xt)
        H = _fd_hessian(fun, np.r_[beta, np.log(sigma)])
        return _safe_inverse(-H[:k, :k])
    H = _fd_hessian(fun, np.r_[beta, np.log(sigma)])
    info = -H
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        return _safe_inverse(info[:k, :k])
    return _safe_inverse(info)[:k, :k]


def lgmm_predict(fit: LgmmFit, X, subject_ids=None, mode: str = "population") -> np.ndarray:
    """Event probabilities; ``subject`` mode adds each subject's posterior-mode intercept."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(fit.names):
        raise ValidationError(f"expected {len(fit.names)} covariates, got {X.shape[1]}")
    eta = fit.beta[0] + X @ fit.beta[1:]
    if mode == "population":
        return expit(eta)
    if mode != "subject":
        raise ValidationError(f"unknown prediction mode {mode!r}")
    if subject_ids is None:
        raise ValidationError("subject mode needs subject_ids")
    shift = np.zeros(len(X))
    unknown = set()
    for i, sid in enumerate(np.asarray(subject_ids, dtype=object).astype(str)):
        if sid in fit.mu_modes:
            shift[i] = fit.mu_modes[sid]
        else:
            unknown.add(sid)
    if unknown:
        warnings.warn(f"{len(unknown)} unseen subject(s) predicted at population level",
                      UnknownSubject, stacklevel=2)
    return expit(eta + shift)


def sig_code(p: float) -> str:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p-value out of range: {p}")
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "+"
    return ""


@dataclass
class WaldRow:
    variable: str
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    p_value: float
    sig: str


def wald_row(variable: str, estimate: float, se: float, crit: float = 1.96) -> WaldRow:
    if se > 0:
        z = estimate / se
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    else:
        p = 1.0 if estimate == 0 else 0.0
    return WaldRow(variable, float(estimate), float(se), float(estimate - crit * se),
                   float(estimate + crit * se), p, sig_code(p))


def wald_table(fit: LgmmFit, names=None) -> list[WaldRow]:
    names = list(names) if names is not None else ["(Intercept)"] + list(fit.names)
    if len(names) != len(fit.beta):
        raise ValidationError("one name per coefficient (intercept first) required")
    return [wald_row(n, b, s) for n, b, s in zip(names, fit.beta, fit.se)]


def wald_frame(rows):
    """Rows in the fixed-effects table layout (CI upper before CI lower)."""
    import pandas as pd

    return pd.DataFrame(
        [[r.variable, r.estimate, r.se, r.ci_upper, r.ci_lower, r.p_value, r.sig] for r in rows],
        columns=["Variables", "Estimate", "SE", "CI upper", "CI lower", "p-value", "Sig code"],
    )


def lr_fit_per_visit(design: LgmmDesign, visit: int, config: FitConfig | None = None) -> LgmmFit:
    """Plain logistic regression on the rows of one visit."""
    if design.visits is None:
        raise ValidationError("design carries no visit indices")
    if visit not in set(design.visits.tolist()):
        raise ValidationError(f"visit {visit} not present in the design")
    return lgmm_fit(design.subset(design.visits == visit), config, sigma_mu=0.0)
