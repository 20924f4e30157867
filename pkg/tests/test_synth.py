import numpy as np
import pytest
from scipy.special import logit

from cohort_phenotyper.cohort import FeatureSpec
from cohort_phenotyper.errors import InfeasibleTargets, ValidationError
from cohort_phenotyper.synth import (REFERENCE_GROUP_COUNTS, SynthConfig, SynthFeature,
                                     generate_cohort, reference_config)

from conftest import small_config


class TestGenerator:
    def test_group_targets_met(self, reference_cohort):
        cohort, _ = reference_cohort
        assert cohort.group_counts() == REFERENCE_GROUP_COUNTS

    def test_null_model_probability_half(self):
        cfg = small_config(n_subjects=50, beta=(0.0, 0.0, 0.0), sigma_mu=0.0)
        _, truth = generate_cohort(cfg)
        assert np.all(truth.true_probability == 0.5)

    def test_logit_identity(self):
        cfg = small_config(n_subjects=80, beta=(-0.3, 0.7, -1.1), sigma_mu=1.2, seed=5)
        cohort, truth = generate_cohort(cfg)
        eta = (truth.beta[0] + truth.beta[1] * truth.true_values["x1"]
               + truth.beta[2] * truth.true_values["x2"] + np.repeat(truth.mu, 3))
        np.testing.assert_allclose(logit(truth.true_probability), eta, atol=1e-9)

    def test_outcome_rate_matches_probability(self):
        cfg = small_config(n_subjects=100_000, beta=(-1.0, 0.5), sigma_mu=1.0, seed=11)
        cohort, truth = generate_cohort(cfg)
        p = truth.true_probability
        se = np.sqrt(np.sum(p * (1 - p))) / p.size
        assert abs(cohort.outcome.mean() - p.mean()) < 3 * se

    def test_deterministic(self):
        a, ta = generate_cohort(small_config(seed=3, missing_rate=0.1))
        b, tb = generate_cohort(small_config(seed=3, missing_rate=0.1))
        assert a.equals(b)
        np.testing.assert_array_equal(ta.mu, tb.mu)

    def test_seed_changes_draws(self):
        a, _ = generate_cohort(small_config(seed=3))
        b, _ = generate_cohort(small_config(seed=4))
        assert not a.equals(b)

    def test_missing_rate(self):
        cfg = small_config(n_subjects=2000, seed=2, missing_rate=0.1)
        cohort, _ = generate_cohort(cfg)
        n = cohort.missing.size
        se = np.sqrt(0.1 * 0.9 / n)
        assert abs(cohort.missing.mean() - 0.1) < 4 * se
        assert cohort.outcome.dtype.kind in "iu" and np.isin(cohort.outcome, (0, 1)).all()

    def test_adding_feature_keeps_other_streams(self):
        base = small_config(n_subjects=60, beta=(-0.5, 1.0), seed=8)
        extra = small_config(n_subjects=60, beta=(-0.5, 1.0, 0.0), seed=8)
        a, ta = generate_cohort(base)
        b, tb = generate_cohort(extra)
        np.testing.assert_array_equal(ta.mu, tb.mu)
        np.testing.assert_array_equal(a.outcome, b.outcome)
        np.testing.assert_array_equal(a.column("x1"), b.column("x1"))

    def test_categorical_levels(self):
        feats = [SynthFeature(FeatureSpec("sex", "categorical", category_levels=("M", "F")),
                              probs=(0.4, 0.6), persistent=True)]
        cohort, _ = generate_cohort(SynthConfig(40, feats, [0.0, 0.5], 0.5, seed=1))
        sex = cohort.column("sex").reshape(40, 3)
        assert set(sex.ravel()) <= {"M", "F"}
        assert (sex == sex[:, :1]).all()

    def test_infeasible_targets(self):
        cfg = small_config(n_subjects=2, beta=(-30.0, 0.0, 0.0), sigma_mu=0.0)
        cfg = SynthConfig(2, cfg.feature_specs, cfg.true_beta, 0.0,
                          group_targets=[0, 0, 0, 0, 0, 0, 0, 2])
        with pytest.raises(InfeasibleTargets):
            generate_cohort(cfg)


class TestConfig:
    def test_round_trip(self):
        cfg = reference_config(seed=9)
        back = SynthConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_json(self, tmp_path):
        import json
        cfg = small_config()
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert SynthConfig.from_json(tmp_path / "c.json").to_dict() == cfg.to_dict()

    def test_unknown_key(self):
        d = small_config().to_dict()
        d["sigma"] = 1.0
        with pytest.raises(ValidationError):
            SynthConfig.from_dict(d)

    @pytest.mark.parametrize("kw", [{"sigma_mu": -1.0}, {"missing_rate": 1.0},
                                    {"true_beta": [0.0]}, {"n_subjects": 0}])
    def test_invalid(self, kw):
        cfg = small_config()
        args = dict(n_subjects=cfg.n_subjects, feature_specs=cfg.feature_specs,
                    true_beta=cfg.true_beta)
        args.update(kw)
        with pytest.raises(ValidationError):
            SynthConfig(**args)

    def test_targets_must_sum(self):
        cfg = small_config(n_subjects=10)
        with pytest.raises(ValidationError):
            SynthConfig(10, cfg.feature_specs, cfg.true_beta, group_targets=[1] * 8)

    def test_bad_probs(self):
        with pytest.raises(ValidationError):
            SynthFeature(FeatureSpec("b", "binary"), probs=(0.3, 0.3))
