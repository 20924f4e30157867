import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cohort_phenotyper.errors import EmptyStratum, LengthMismatch, ValidationError
from cohort_phenotyper.evaluation import (METRICS, ConfusionCounts, confusion_metrics,
                                          cross_validate, evaluate_by_stratum, metrics_frame,
                                          threshold_sweep)
from cohort_phenotyper.preprocess import encode_categoricals
from cohort_phenotyper.synth import generate_cohort

from conftest import small_config


def _from_counts(tp, tn, fp, fn):
    pred = [1] * tp + [0] * tn + [1] * fp + [0] * fn
    lab = [1] * tp + [0] * tn + [0] * fp + [1] * fn
    return pred, lab


class TestConfusion:
    def test_hand_counted(self):
        r = confusion_metrics(*_from_counts(3, 5, 1, 1))
        assert r.counts == ConfusionCounts(3, 5, 1, 1)
        assert (r.acc, r.pre, r.spec, r.npv, r.recall) == (0.8, 0.75, 5 / 6, 5 / 6, 0.75)

    def test_perfect(self):
        r = confusion_metrics([1, 0, 1, 0], [1, 0, 1, 0])
        assert all(getattr(r, m) == 1.0 for m in METRICS)

    def test_all_negative(self):
        r = confusion_metrics([0, 0, 0], [0, 0, 0])
        assert r.acc == 1.0 and r.pre is None and r.recall is None
        assert set(r.undefined) == {"pre", "recall"}

    @given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
    def test_identities_integer_exact(self, tp, tn, fp, fn):
        if tp + tn + fp + fn == 0:
            return
        r = confusion_metrics(*_from_counts(tp, tn, fp, fn))
        c = r.counts
        assert c.total == tp + tn + fp + fn
        assert round(r.acc * c.total) == tp + tn
        if r.recall is not None:
            assert round(r.recall * (tp + fn)) == tp
        if r.pre is not None:
            assert round(r.pre * (tp + fp)) == tp
        if r.spec is not None:
            assert round(r.spec * (tn + fp)) == tn
        if r.npv is not None:
            assert round(r.npv * (tn + fn)) == tn
        assert all((getattr(r, m) is None) == (m in r.undefined) for m in METRICS)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion_metrics([0, 1], [0])

    def test_non_binary(self):
        with pytest.raises(ValidationError):
            confusion_metrics([0, 2], [0, 1])

    def test_threshold_sweep(self):
        reps = threshold_sweep([0.2, 0.6, 0.9], [0, 1, 1], [0.1, 0.5, 0.95])
        assert [r.counts.tp for r in reps] == [2, 2, 0]
        assert list(metrics_frame(reps)["stratum"]) == ["threshold 0.1", "threshold 0.5",
                                                        "threshold 0.95"]


@pytest.fixture(scope="module")
def cv_run():
    cohort, _ = generate_cohort(small_config(n_subjects=120, beta=(-1.0, 1.2, -0.6), seed=6))
    fm, _ = encode_categoricals(cohort)
    res = cross_validate(fm, cohort.outcome, cohort.subject_id, cohort.visit, ["x1", "x2"],
                         folds=5, seed=2)
    return res, cohort


class TestCrossValidation:
    def test_folds_partition_subjects(self, cv_run):
        res, cohort = cv_run
        members = [s for f in res.folds for s in f]
        assert sorted(members) == sorted(set(cohort.subject_id.tolist()))
        per_subject = res.predictions.groupby("subject_id")["fold"].nunique()
        assert (per_subject == 1).all()

    def test_every_row_predicted_once(self, cv_run):
        res, cohort = cv_run
        assert len(res.predictions) == len(cohort)
        assert res.predictions[["lgmm_prob", "lr_prob"]].notna().all().all()

    def test_no_synthetic_rows_evaluated(self, cv_run):
        res, _ = cv_run
        assert (res.predictions["provenance"] == "original").all()
        evaluated = set(res.predictions["subject_id"])
        for rec in res.training:
            assert rec["synthetic"] > 0
            assert not evaluated & set(rec["synthetic_ids"])

    def test_pooled_equals_concatenated_folds(self, cv_run):
        res, _ = cv_run
        for m in ("lgmm", "lr"):
            total = sum((r.counts for r in res.per_fold[m]), ConfusionCounts())
            assert total == res.pooled[m].counts
        cmp = res.comparison()
        assert list(cmp.columns) == ["lgmm", "lr"] and list(cmp.index) == list(METRICS)

    def test_better_than_chance(self, cv_run):
        res, _ = cv_run
        y = res.predictions["label"]
        assert res.pooled["lgmm"].acc > max(y.mean(), 1 - y.mean()) - 0.05

    def test_strata_recombine(self, cv_run):
        res, cohort = cv_run
        pooled = res.pooled["lgmm"].counts
        by_visit = evaluate_by_stratum(res.predictions, "visit")
        assert sum((r.counts for r in by_visit), ConfusionCounts()) == pooled
        groups = {s: g for s, g in cohort.outcome_groups().items()}
        by_group = evaluate_by_stratum(res.predictions, "group", groups=groups)
        assert sum((r.counts for r in by_group), ConfusionCounts()) == pooled

    def test_empty_stratum(self, cv_run):
        res, _ = cv_run
        with pytest.warns(EmptyStratum):
            reps = evaluate_by_stratum(res.predictions, "visit", strata=[1, 4])
        assert reps[1].counts.total == 0 and set(reps[1].undefined) == set(METRICS)

    def test_stratum_independence(self, cv_run):
        res, _ = cv_run
        pred = res.predictions.copy()
        v1 = pred["visit"] == 1
        pred.loc[v1, "lgmm_pred"] = pred.loc[v1, "label"]
        assert evaluate_by_stratum(pred, "visit")[0].acc == 1.0

    def test_deterministic(self, cv_run):
        res, cohort = cv_run
        fm, _ = encode_categoricals(cohort)
        again = cross_validate(fm, cohort.outcome, cohort.subject_id, cohort.visit, ["x1", "x2"],
                               folds=5, seed=2)
        assert again.predictions.equals(res.predictions)

    def test_unknown_model(self, cv_run):
        _, cohort = cv_run
        fm, _ = encode_categoricals(cohort)
        with pytest.raises(ValidationError):
            cross_validate(fm, cohort.outcome, cohort.subject_id, cohort.visit, ["x1"],
                           models=("svm",))
