"""Confusion metrics, subject-level cross-validation and per-stratum reports."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import EmptyStratum, LengthMismatch, ValidationError
from .folds import fold_masks, stratified_subject_folds
from .lgmm import FitConfig, LgmmDesign, lgmm_fit, lgmm_predict
from .preprocess import FeatureMatrix, smote_oversample

METRICS = ("acc", "pre", "spec", "npv", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @classmethod
    def from_predictions(cls, predictions, labels) -> "ConfusionCounts":
        pred = _binary(predictions, "predictions")
        lab = _binary(labels, "labels")
        if len(pred) != len(lab):
            raise LengthMismatch(f"{len(pred)} predictions vs {len(lab)} labels")
        return cls(int(np.sum(pred & lab)), int(np.sum(~pred & ~lab)),
                   int(np.sum(pred & ~lab)), int(np.sum(~pred & lab)))


def _binary(v, what):
    v = np.asarray(v)
    if v.ndim != 1 or not np.isin(v, (0, 1)).all():
        raise ValidationError(f"{what} must be a 1-D 0/1 vector")
    return v.astype(bool)


def _ratio(num, den):
    return num / den if den else None


@dataclass
class MetricsReport:
    """Accuracy, precision, specificity, NPV and recall from confusion counts.

    A metric with a zero denominator is ``None`` and listed in ``undefined``.
    """

    counts: ConfusionCounts
    stratum: str = "pooled"

    @property
    def acc(self):
        c = self.counts
        return _ratio(c.tp + c.tn, c.total)

    @property
    def pre(self):
        return _ratio(self.counts.tp, self.counts.tp + self.counts.fp)

    @property
    def spec(self):
        return _ratio(self.counts.tn, self.counts.tn + self.counts.fp)

    @property
    def npv(self):
        return _ratio(self.counts.tn, self.counts.tn + self.counts.fn)

    @property
    def recall(self):
        return _ratio(self.counts.tp, self.counts.tp + self.counts.fn)

    @property
    def undefined(self) -> tuple[str, ...]:
        return tuple(m for m in METRICS if getattr(self, m) is None)

    def to_dict(self) -> dict:
        c = self.counts
        d = {"stratum": self.stratum, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn}
        d.update({m: getattr(self, m) for m in METRICS})
        d["undefined"] = list(self.undefined)
        return d


def confusion_metrics(predictions, labels, stratum: str = "pooled") -> MetricsReport:
    pred = np.asarray(predictions)
    if pred.size == 0:
        raise ValidationError("need at least one prediction")
    return MetricsReport(ConfusionCounts.from_predictions(predictions, labels), stratum)


def threshold_sweep(probabilities, labels, thresholds) -> list[MetricsReport]:
    """Metrics at each classification threshold (prob > t is positive)."""
    p = np.asarray(probabilities, dtype=float)
    return [confusion_metrics((p > t).astype(int), labels, f"threshold {t:g}") for t in thresholds]


def metrics_frame(reports) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports])


@dataclass
class CvResult:
    """Out-of-fold predictions and per-fold/pooled metrics for each model.

    ``predictions`` has one row per original observation with its fold,
    provenance tag, label, and per-model probability and class columns.
    ``training`` records per fold how many original and synthetic rows the
    models saw, with the synthetic pseudo-subject ids.
    """

    predictions: pd.DataFrame
    folds: list[list[str]]
    per_fold: dict[str, list[MetricsReport]]
    pooled: dict[str, MetricsReport]
    features: list[str]
    training: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def comparison(self) -> pd.DataFrame:
        """Pooled metrics, one column per model."""
        return pd.DataFrame({m: [getattr(r, k) for k in METRICS] for m, r in self.pooled.items()},
                            index=list(METRICS))


def _augment_training(matrix: FeatureMatrix, y, sids, visits, train, percent, classes, k, seed):
    """Training rows plus SMOTE rows; synthetic rows become one-row pseudo-subjects."""
    X, yt = matrix.values[train], y[train]
    st, vt = sids[train], visits[train]
    if not percent:
        return X, yt, st, vt, np.zeros(len(yt), dtype=bool)
    res = smote_oversample(X, yt, percent, k, seed=seed, classes=classes,
                           categorical=matrix.discrete)
    m = int(res.synthetic.sum())
    parent = res.parent[res.synthetic]
    s_new = np.array([f"~smote{seed}_{i}" for i in range(m)], dtype=object)
    return (res.X, res.y, np.r_[st, s_new], np.r_[vt, vt[parent]], res.synthetic)


def cross_validate(matrix: FeatureMatrix, y, subject_ids, visits, features, folds: int = 5,
                   seed: int = 0, smote_percent: int = 100, smote_classes="minority",
                   smote_k: int = 5, fit_config: FitConfig | None = None,
                   models=("lgmm", "lr"), threshold: float = 0.5) -> CvResult:
    """Subject-level stratified K-fold evaluation of LGMM and per-visit LR.

    SMOTE touches training folds only.  Held-out subjects are unseen by the
    fitted model, so LGMM predicts them at the population level (mu = 0).
    """
    if not matrix.complete:
        raise ValidationError("cross_validate needs a complete (imputed) matrix")
    y = np.asarray(y).astype(int)
    sids = np.asarray(subject_ids, dtype=object).astype(str)
    visits = np.asarray(visits, dtype=int)
    if not (len(y) == len(sids) == len(visits) == matrix.values.shape[0]):
        raise LengthMismatch("matrix, outcome, subject and visit lengths differ")
    unknown = [m for m in models if m not in ("lgmm", "lr")]
    if unknown:
        raise ValidationError(f"unknown model(s) {unknown}")
    features = list(features)
    cols = [matrix.names.index(f) for f in features]
    cfg = fit_config or FitConfig()
    splits = stratified_subject_folds(sids, y, folds, seed)

    n = len(y)
    fold_of = np.full(n, -1)
    prob = {m: np.full(n, np.nan) for m in models}
    notes: list[str] = []
    training: list[dict] = []
    for f, (train, test) in enumerate(fold_masks(sids, splits)):
        fold_of[test] = f
        X, yt, st, vt, synthetic = _augment_training(matrix, y, sids, visits, train, smote_percent,
                                                     smote_classes, smote_k, seed + f)
        Xf = X[:, cols]
        if "lgmm" in models:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = lgmm_fit(LgmmDesign(st, Xf, yt, features, vt), cfg)
            notes += [f"fold {f + 1} lgmm: {w.message}" for w in caught]
            prob["lgmm"][test] = lgmm_predict(fit, matrix.values[np.ix_(test, cols)])
        if "lr" in models:
            for v in np.unique(visits[test]):
                tr_v, te_v = vt == v, test & (visits == v)
                if len(np.unique(yt[tr_v])) < 2:
                    notes.append(f"fold {f + 1} lr visit {v}: single-class training rows")
                    prob["lr"][te_v] = float(yt[tr_v].mean()) if tr_v.any() else 0.0
                    continue
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    fit = lgmm_fit(LgmmDesign(st[tr_v], Xf[tr_v], yt[tr_v], features), cfg,
                                   sigma_mu=0.0)
                notes += [f"fold {f + 1} lr visit {v}: {w.message}" for w in caught]
                prob["lr"][te_v] = lgmm_predict(fit, matrix.values[np.ix_(te_v, cols)])
        synth_ids = set(st[synthetic].tolist())
        leaked = synth_ids & set(sids[test].tolist())
        if leaked:
            raise ValidationError(f"synthetic rows reached fold {f + 1} evaluation: {sorted(leaked)[:3]}")
        training.append({"fold": f + 1, "original": int((~synthetic).sum()),
                         "synthetic": int(synthetic.sum()), "synthetic_ids": sorted(synth_ids)})

    pred = pd.DataFrame({"subject_id": sids, "visit": visits, "fold": fold_of + 1,
                         "provenance": "original", "label": y})
    per_fold, pooled = {}, {}
    for m in models:
        cls = (prob[m] > threshold).astype(int)
        pred[f"{m}_prob"] = prob[m]
        pred[f"{m}_pred"] = cls
        per_fold[m] = [confusion_metrics(cls[fold_of == f], y[fold_of == f], f"fold {f + 1}")
                       for f in range(folds)]
        pooled[m] = confusion_metrics(cls, y, "pooled")
    return CvResult(pred, splits, per_fold, pooled, features, training, notes)


def evaluate_by_stratum(predictions: pd.DataFrame, stratum: str = "visit", strata=None,
                        groups: dict[str, int] | None = None, model: str = "lgmm"
                        ) -> list[MetricsReport]:
    """Metrics per visit or per outcome group from out-of-fold predictions.

    ``groups`` maps subject id to outcome group code and is required for
    ``stratum="group"``.  A requested stratum without rows gives an
    all-undefined report and an :class:`EmptyStratum` warning.
    """
    if stratum == "visit":
        key = predictions["visit"].to_numpy()
    elif stratum == "group":
        if groups is None:
            raise ValidationError("group strata need a subject -> group mapping")
        key = np.array([groups[s] for s in predictions["subject_id"]])
    else:
        raise ValidationError(f"unknown stratum {stratum!r}")
    strata = sorted(set(key.tolist())) if strata is None else list(strata)
    pred = predictions[f"{model}_pred"].to_numpy()
    lab = predictions["label"].to_numpy()
    out = []
    for s in strata:
        m = key == s
        if not m.any():
            warnings.warn(f"{stratum} {s} has no rows", EmptyStratum, stacklevel=2)
            out.append(MetricsReport(ConfusionCounts(), f"{stratum} {s}"))
            continue
        out.append(confusion_metrics(pred[m], lab[m], f"{stratum} {s}"))
    return out
