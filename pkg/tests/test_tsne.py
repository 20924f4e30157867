import numpy as np
import pytest

from cohort_phenotyper.errors import CalibrationFailed, ValidationError
from cohort_phenotyper.tsne import (TsneConfig, calibrate_rows, joint_probabilities, kl_cost,
                                    perplexity_calibration, squared_distances, tsne_cost_grad,
                                    tsne_embed)


def _perplexity(row):
    p = row[row > 0]
    return np.exp(-np.sum(p * np.log(p)))


def _blobs(seed=42, n=20, gap=10.0):
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(size=(n, 4)), rng.normal(size=(n, 4)) + gap])


def _fd_check(P, Y, h=1e-6):
    _, g = tsne_cost_grad(P, Y)
    fd = np.zeros_like(Y)
    for i in range(Y.shape[0]):
        for k in range(2):
            E = np.zeros_like(Y)
            E[i, k] = h
            fd[i, k] = (kl_cost(P, Y + E) - kl_cost(P, Y - E)) / (2 * h)
    return np.linalg.norm(g - fd) / np.linalg.norm(fd)


class TestCalibration:
    def test_equidistant_uniform(self):
        np.testing.assert_allclose(perplexity_calibration([1.0, 1.0, 1.0], 3.0), [1 / 3] * 3)

    def test_hits_target(self):
        rng = np.random.default_rng(42)
        X = rng.normal(size=(60, 5))
        D = squared_distances(X)
        off = ~np.eye(60, dtype=bool)
        P, _ = calibrate_rows(D[off].reshape(60, 59), 15.0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        perp = np.array([_perplexity(r) for r in P])
        assert np.max(np.abs(perp - 15.0)) < 1e-4

    def test_nearer_points_heavier(self):
        row = perplexity_calibration([0.5, 0.6, 9.0], 1.5)
        assert row[0] > row[1] > row[2]

    def test_unreachable_target(self):
        with pytest.raises(CalibrationFailed):
            perplexity_calibration([1.0, 2.0, 3.0], 5.0)

    def test_joint_symmetric_normalised(self):
        rng = np.random.default_rng(42)
        P = joint_probabilities(rng.normal(size=(30, 3)), 8.0)
        np.testing.assert_allclose(P, P.T)
        assert P.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.diag(P) == 0)


class TestCostGrad:
    def test_zero_gradient_when_q_equals_p(self):
        rng = np.random.default_rng(42)
        Y = rng.normal(size=(6, 2))
        num = 1.0 / (1.0 + squared_distances(Y))
        np.fill_diagonal(num, 0.0)
        P = num / num.sum()
        cost, g = tsne_cost_grad(P, Y)
        assert cost == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_cost_non_negative(self):
        rng = np.random.default_rng(42)
        P = joint_probabilities(rng.normal(size=(15, 3)), 4.0)
        for _ in range(20):
            assert kl_cost(P, rng.normal(size=(15, 2))) >= 0.0

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(42)
        P = joint_probabilities(rng.normal(size=(10, 3)), 3.0)
        for _ in range(10):
            assert _fd_check(P, rng.normal(size=(10, 2))) < 1e-4

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(42)
        P = joint_probabilities(rng.normal(size=(12, 3)), 4.0)
        Y = rng.normal(size=(12, 2))
        a = rng.uniform(0, 2 * np.pi)
        R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        moved = Y @ R.T + rng.normal(size=2) * 5
        assert kl_cost(P, moved) == pytest.approx(kl_cost(P, Y), abs=1e-10)


@pytest.fixture(scope="module")
def blob_embedding():
    cfg = TsneConfig(perplexity=10.0, seed=3)
    return tsne_embed(_blobs(), cfg), cfg


class TestEmbed:
    def test_blobs_separate(self, blob_embedding):
        emb, _ = blob_embedding
        a, b = emb.coords[:20], emb.coords[20:]
        ca, cb = a.mean(axis=0), b.mean(axis=0)
        spread = np.mean(np.r_[np.linalg.norm(a - ca, axis=1), np.linalg.norm(b - cb, axis=1)])
        assert np.linalg.norm(ca - cb) > 3 * spread

    def test_cost_monotone_after_exaggeration(self, blob_embedding):
        emb, cfg = blob_embedding
        post = emb.cost_trace[cfg.exaggeration_iters:]
        assert np.all(np.diff(post) <= 1e-3)
        assert emb.final_cost < emb.cost_trace[cfg.exaggeration_iters]

    def test_same_seed_identical(self, blob_embedding):
        emb, cfg = blob_embedding
        again = tsne_embed(_blobs(), cfg)
        assert again.coords.tobytes() == emb.coords.tobytes()
        assert again.cost_trace.tobytes() == emb.cost_trace.tobytes()

    def test_row_permutation_equivariance(self, blob_embedding):
        emb, cfg = blob_embedding
        perm = np.random.default_rng(7).permutation(40)
        moved = tsne_embed(_blobs()[perm], cfg)
        np.testing.assert_array_equal(moved.coords, emb.coords[perm])

    def test_finite_and_shaped(self, blob_embedding):
        emb, cfg = blob_embedding
        assert emb.coords.shape == (40, 2) and np.isfinite(emb.coords).all()
        assert len(emb.cost_trace) == cfg.total_iters + 1
        assert emb.config["perplexity"] == 10.0

    def test_pca_init(self):
        emb = tsne_embed(_blobs(n=10), TsneConfig(perplexity=5.0, init="pca", total_iters=300))
        assert np.isfinite(emb.coords).all()

    @pytest.mark.parametrize("kw", [{"perplexity": 50.0}, {"init": "umap"},
                                    {"learning_rate": 0.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValidationError):
            tsne_embed(_blobs(n=10), TsneConfig(**kw))

    def test_missing_cells(self):
        X = _blobs(n=5)
        X[0, 0] = np.nan
        with pytest.raises(ValidationError):
            tsne_embed(X)
