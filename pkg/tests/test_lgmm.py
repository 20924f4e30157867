import warnings

import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.special import expit, log_expit
from scipy.stats import norm

from cohort_phenotyper.errors import SeparationDetected, UnknownSubject, ValidationError
from cohort_phenotyper.lgmm import (FitConfig, LgmmDesign, lgmm_fit, lgmm_loglik,
                                    lgmm_loglik_grad, lgmm_predict, lr_fit_per_visit, sig_code,
                                    wald_frame, wald_row, wald_table)


def simulate(S=150, beta=(-1.0, 0.5, -0.3), sigma=0.8, J=3, seed=1):
    rng = np.random.default_rng(seed)
    sid = np.repeat([f"s{i}" for i in range(S)], J)
    X = rng.standard_normal((S * J, len(beta) - 1))
    mu = sigma * rng.standard_normal(S)
    eta = beta[0] + X @ np.asarray(beta[1:]) + np.repeat(mu, J)
    y = (rng.random(S * J) < expit(eta)).astype(float)
    visits = np.tile(np.arange(1, J + 1), S)
    return LgmmDesign(sid, X, y, [f"x{k}" for k in range(1, len(beta))], visits)


def logistic_loglik(X, y, beta):
    eta = beta[0] + X @ beta[1:]
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


@pytest.fixture(scope="module")
def design():
    return simulate()


@pytest.fixture(scope="module")
def fitted(design):
    return lgmm_fit(design)


class TestLoglik:
    def test_sigma_zero_is_logistic(self, design):
        beta = np.array([-0.7, 0.2, 0.4])
        assert lgmm_loglik(design, beta, 0.0) == pytest.approx(
            logistic_loglik(design.X, design.y, beta), abs=1e-9)

    def test_single_observation_half(self):
        d = LgmmDesign(["a"], np.zeros((1, 1)), [1.0], ["x"])
        assert lgmm_loglik(d, [0.0, 0.0], 1e-12) == pytest.approx(np.log(0.5), abs=1e-12)

    def test_dense_grid_oracle(self):
        sid = ["a", "a", "b", "b", "c", "c"]
        X = np.array([[0.3], [-1.2], [0.8], [0.1], [-0.4], [1.5]])
        y = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
        beta = np.array([-0.2, 0.7])
        grid = np.linspace(-12.0, 12.0, 10_001)
        total = 0.0
        for s in ("a", "b", "c"):
            m = np.array(sid) == s
            eta = beta[0] + X[m] @ beta[1:]
            logp = (y[m, None] * log_expit(eta[:, None] + grid)
                    + (1 - y[m, None]) * log_expit(-(eta[:, None] + grid))).sum(axis=0)
            total += np.log(simpson(np.exp(logp) * norm.pdf(grid), x=grid))
        d = LgmmDesign(sid, X, y, ["x"])
        assert lgmm_loglik(d, beta, 1.0) == pytest.approx(total, abs=1e-6)

    def test_gradient_matches_finite_differences(self, design):
        rng = np.random.default_rng(42)
        for _ in range(10):
            beta, s = rng.normal(scale=0.7, size=3), np.exp(rng.normal(scale=0.5))
            _, g = lgmm_loglik_grad(design, beta, s)
            th = np.r_[beta, np.log(s)]
            fd = np.empty(4)
            for i in range(4):
                e = np.zeros(4)
                e[i] = 1e-5
                f = lambda t: lgmm_loglik(design, t[:3], np.exp(t[3]))
                fd[i] = (f(th + e) - f(th - e)) / 2e-5
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4

    def test_quadrature_refinement(self, design, fitted):
        ll = [lgmm_loglik(design, fitted.beta, fitted.sigma_mu, q) for q in (1, 7, 15, 31)]
        steps = np.abs(np.diff(ll))
        assert np.all(np.diff(steps) < 0)

    def test_quadrature_settles_at_moderate_sigma(self):
        # node error grows with sigma_hat; this replicate lands near 0.3
        d = simulate(seed=2)
        fit = lgmm_fit(d)
        assert fit.sigma_mu < 0.5
        ll = [lgmm_loglik(d, fit.beta, fit.sigma_mu, q) for q in (1, 7, 15)]
        assert abs(ll[2] - ll[1]) < abs(ll[1] - ll[0])
        assert abs(ll[2] - ll[1]) < 1e-6


class TestFit:
    def test_converged_with_modes(self, fitted, design):
        assert fitted.converged
        assert len(fitted.mu_modes) == design.n_subjects
        assert fitted.sigma_mu >= 0
        np.testing.assert_allclose(fitted.cov_beta, fitted.cov_beta.T, atol=1e-12)
        assert np.linalg.eigvalsh(fitted.cov_beta).min() >= -1e-12

    def test_loglik_monotone(self, fitted):
        assert np.all(np.diff(fitted.loglik_trace) >= -1e-9)
        assert fitted.loglik == pytest.approx(fitted.loglik_trace[-1])

    def test_recovers_planted_values(self, fitted):
        truth = np.array([-1.0, 0.5, -0.3])
        assert np.all(np.abs(fitted.beta - truth) < 3 * fitted.se)

    def test_nesting(self, design, fitted):
        lr = lgmm_fit(design, sigma_mu=0.0)
        assert fitted.loglik >= lr.loglik - 1e-9
        assert lr.sigma_fixed and lr.sigma_mu == 0.0

    def test_intercept_symmetry(self):
        sid = np.repeat([f"s{i}" for i in range(40)], 2)
        X = np.zeros((80, 1))
        y = np.tile([0.0, 1.0], 40)
        fit = lgmm_fit(LgmmDesign(sid, X, y, ["z"]))
        assert abs(fit.beta[0]) < 2 * fit.se[0]

    def test_shift_equivariance(self, design, fitted):
        c = 3.7
        shifted = LgmmDesign(design.subject_ids, design.X + [c, 0.0], design.y, design.names)
        refit = lgmm_fit(shifted)
        assert refit.loglik == pytest.approx(fitted.loglik, abs=1e-6)
        assert refit.beta[0] == pytest.approx(fitted.beta[0] - c * fitted.beta[1], abs=1e-4)

    def test_null_sigma_boundary(self):
        # with no planted intercept spread, sigma_hat sits on the boundary exactly when
        # the variance score at sigma = 0 is non-positive
        at_boundary = 0
        for seed in range(6):
            d = simulate(S=1000, beta=(-0.5, 0.4), sigma=0.0, seed=seed)
            lr = lgmm_fit(d, sigma_mu=0.0)
            p = expit(lr.beta[0] + d.X @ lr.beta[1:])
            _, inv = np.unique(d.subject_ids.astype(str), return_inverse=True)
            r = np.bincount(inv, d.y - p)
            w = np.bincount(inv, p * (1 - p))
            score = 0.5 * np.sum(r ** 2 - w)
            fit = lgmm_fit(d)
            if score <= 0:
                assert fit.sigma_mu <= 0.05
                at_boundary += 1
            else:
                assert fit.loglik > lr.loglik
        assert at_boundary >= 2

    def test_identical_outcomes_rejected(self):
        d = LgmmDesign(["a", "b"], np.zeros((2, 1)), [1.0, 1.0], ["x"])
        with pytest.raises(ValidationError):
            lgmm_fit(d)

    def test_serialisable(self, fitted):
        d = fitted.to_dict()
        assert d["names"][0] == "(Intercept)" and len(d["beta"]) == 3


class TestPerVisit:
    def test_matches_sigma_zero_fit(self, design):
        a = lr_fit_per_visit(design, 2)
        b = lgmm_fit(design.subset(design.visits == 2), sigma_mu=0.0)
        assert a.loglik == pytest.approx(b.loglik, abs=1e-8)
        assert a.loglik == pytest.approx(
            logistic_loglik(design.X[design.visits == 2], design.y[design.visits == 2], a.beta),
            abs=1e-8)

    def test_separation_warning(self):
        d = LgmmDesign(["a", "b", "c", "d"], [[-2.0], [-1.0], [1.0], [2.0]], [0, 0, 1, 1], ["x"],
                       visits=[1, 1, 1, 1])
        with pytest.warns(SeparationDetected):
            fit = lr_fit_per_visit(d, 1)
        assert fit.separation

    def test_missing_visit(self, design):
        with pytest.raises(ValidationError):
            lr_fit_per_visit(design, 4)


class TestPredict:
    def test_null_half(self, fitted):
        from dataclasses import replace
        f = replace(fitted, beta=np.zeros(3))
        assert lgmm_predict(f, np.zeros((1, 2)))[0] == 0.5

    def test_logistic_two(self, fitted):
        from dataclasses import replace
        f = replace(fitted, beta=np.array([1.0, 1.0, 0.0]))
        assert lgmm_predict(f, [[1.0, 5.0]])[0] == pytest.approx(0.8807970779778823, abs=1e-12)

    def test_subject_shift(self, fitted, design):
        rows = design.X[:6]
        sids = design.subject_ids[:6]
        logit = lambda p: np.log(p / (1 - p))
        diff = logit(lgmm_predict(fitted, rows, sids, "subject")) - logit(lgmm_predict(fitted, rows))
        np.testing.assert_allclose(diff, [fitted.mu_modes[s] for s in sids], atol=1e-9)

    def test_unknown_subject(self, fitted):
        with pytest.warns(UnknownSubject):
            p = lgmm_predict(fitted, [[0.0, 0.0]], ["nobody"], "subject")
        assert p[0] == pytest.approx(lgmm_predict(fitted, [[0.0, 0.0]])[0])


class TestWald:
    def test_row_anchor(self):
        r = wald_row("total_cholesterol", -0.0081, 0.0027)
        assert r.p_value == pytest.approx(2 * norm.sf(3.0), rel=1e-12)
        assert r.p_value == pytest.approx(0.0027, abs=1e-4)
        assert r.ci_lower <= r.estimate <= r.ci_upper

    def test_null_estimate(self):
        r = wald_row("x", 0.0, 0.5)
        assert r.p_value == 1.0 and r.sig == ""

    def test_boundary_p(self):
        assert wald_row("x", 1.96 * 0.3, 0.3).p_value == pytest.approx(0.05, abs=1e-4)

    @pytest.mark.parametrize("p, code", [(0.0031, "**"), (0.0224, "*"), (0.245, ""),
                                         (0.0005, "***"), (0.07, "+"), (0.05, "+"), (0.001, "**")])
    def test_sig_code(self, p, code):
        assert sig_code(p) == code

    def test_table_layout(self, fitted):
        df = wald_frame(wald_table(fitted))
        assert list(df.columns) == ["Variables", "Estimate", "SE", "CI upper", "CI lower",
                                    "p-value", "Sig code"]
        assert df["Variables"].tolist() == ["(Intercept)", "x1", "x2"]
        assert ((df["p-value"] >= 0) & (df["p-value"] <= 1)).all()
        np.testing.assert_allclose(df["SE"], fitted.se)
