"""Planted-truth synthetic cohorts generated from the random-intercept logit model.

Each visit outcome is Bernoulli with ``logit(p) = b0 + mu_i + sum_k b_k x_k``
where ``mu_i ~ N(0, sigma_mu^2)`` is shared by all visits of subject ``i``.
Categorical features enter the linear predictor through their label-encoded
code (levels sorted lexicographically), binary features as 0/1.

Randomness comes from one seed split into independent streams per component
(features, random intercepts, outcomes, missingness, group-target rejection),
so adding a feature does not change the outcome or intercept draws.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cohort import Cohort, FeatureSpec
from .errors import InfeasibleTargets, ValidationError

_FEATURES, _MU, _OUTCOME, _MASK, _REJECT = range(5)
_BATCH = 64
_BUDGET_PER_SUBJECT = 10_000


@dataclass(frozen=True)
class SynthFeature:
    """A feature plus the parameters used to draw it.

    Continuous: ``mean``/``sd`` with a subject-level component carrying
    ``within_corr`` of the variance.  Binary: ``probs = (P(0), P(1))``.
    Categorical: ``probs`` aligned with ``spec.category_levels``.  Discrete
    features with ``persistent`` keep the visit-1 draw at every visit.
    """

    spec: FeatureSpec
    mean: float = 0.0
    sd: float = 1.0
    within_corr: float = 0.7
    probs: tuple[float, ...] = ()
    persistent: bool = False

    def __post_init__(self):
        s = self.spec
        if s.kind == "continuous":
            if self.sd < 0:
                raise ValidationError(f"{s.name}: sd must be >= 0")
            if not 0.0 <= self.within_corr <= 1.0:
                raise ValidationError(f"{s.name}: within_corr must be in [0, 1]")
        else:
            n_levels = len(s.category_levels) if s.is_categorical else 2
            probs = np.asarray(self.probs, dtype=float)
            if probs.shape != (n_levels,):
                raise ValidationError(f"{s.name}: need {n_levels} level probabilities")
            if (probs < 0).any() or (probs > 1).any() or abs(probs.sum() - 1.0) > 1e-9:
                raise ValidationError(f"{s.name}: level probabilities must be in [0,1] and sum to 1")

    def to_dict(self) -> dict:
        d = self.spec.to_dict()
        if self.spec.kind == "continuous":
            d.update(mean=self.mean, sd=self.sd, within_corr=self.within_corr)
        else:
            d.update(probs=list(self.probs), persistent=self.persistent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthFeature":
        spec = FeatureSpec.from_dict(d)
        return cls(
            spec=spec,
            mean=float(d.get("mean", 0.0)),
            sd=float(d.get("sd", 1.0)),
            within_corr=float(d.get("within_corr", 0.7)),
            probs=tuple(float(p) for p in d.get("probs", ())),
            persistent=bool(d.get("persistent", False)),
        )


@dataclass
class SynthConfig:
    n_subjects: int
    feature_specs: list[SynthFeature]
    true_beta: np.ndarray
    sigma_mu: float = 1.0
    missing_rate: float = 0.0
    n_visits: int = 3
    group_targets: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        self.true_beta = np.asarray(self.true_beta, dtype=float)
        p = len(self.feature_specs)
        if self.n_subjects < 1:
            raise ValidationError("n_subjects must be >= 1")
        if self.n_visits < 1:
            raise ValidationError("n_visits must be >= 1")
        if self.true_beta.shape != (p + 1,):
            raise ValidationError(f"true_beta needs {p + 1} entries (intercept first)")
        if self.sigma_mu < 0:
            raise ValidationError("sigma_mu must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValidationError("missing_rate must be in [0, 1)")
        names = [f.spec.name for f in self.feature_specs]
        if len(set(names)) != len(names):
            raise ValidationError("feature names must be unique")
        if self.group_targets is not None:
            if self.n_visits != 3:
                raise ValidationError("group targets require exactly 3 visits")
            t = list(self.group_targets)
            if len(t) != 8 or any(c < 0 for c in t) or sum(t) != self.n_subjects:
                raise ValidationError("group_targets must be 8 non-negative counts summing to n_subjects")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @property
    def specs(self) -> list[FeatureSpec]:
        return [f.spec for f in self.feature_specs]

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_visits": self.n_visits,
            "features": [f.to_dict() for f in self.feature_specs],
            "true_beta": self.true_beta.tolist(),
            "sigma_mu": self.sigma_mu,
            "missing_rate": self.missing_rate,
            "group_targets": self.group_targets,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {"n_subjects", "n_visits", "features", "true_beta", "sigma_mu",
                 "missing_rate", "group_targets", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(
            n_subjects=int(d["n_subjects"]),
            n_visits=int(d.get("n_visits", 3)),
            feature_specs=[SynthFeature.from_dict(f) for f in d["features"]],
            true_beta=d["true_beta"],
            sigma_mu=float(d.get("sigma_mu", 1.0)),
            missing_rate=float(d.get("missing_rate", 0.0)),
            group_targets=d.get("group_targets"),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GroundTruth:
    beta: np.ndarray
    sigma_mu: float
    subjects: list[str]
    mu: np.ndarray
    true_probability: np.ndarray
    true_values: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "sigma_mu": self.sigma_mu,
            "mu": dict(zip(self.subjects, self.mu.tolist())),
            "true_probability": self.true_probability.tolist(),
        }


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _draw_feature(f: SynthFeature, k: int, seed: int, S: int, J: int):
    """Return (values, numeric) arrays of shape (S, J)."""
    rng = _stream(seed, _FEATURES, k)
    s = f.spec
    if s.kind == "continuous":
        a = rng.standard_normal(S)[:, None]
        e = rng.standard_normal((S, J))
        z = np.sqrt(f.within_corr) * a + np.sqrt(1.0 - f.within_corr) * e
        x = f.mean + f.sd * z
        return x, x
    probs = np.asarray(f.probs)
    if f.persistent:
        idx = rng.choice(len(probs), size=S, p=probs)[:, None].repeat(J, axis=1)
    else:
        idx = rng.choice(len(probs), size=(S, J), p=probs)
    if s.kind == "binary":
        x = idx.astype(float)
        return x, x
    levels = np.array(s.category_levels, dtype=object)
    codes = np.argsort(np.argsort(s.category_levels, kind="stable"), kind="stable")
    return levels[idx], codes[idx].astype(float)


def _groups_of(outcomes: np.ndarray) -> np.ndarray:
    return 4 * outcomes[..., 0] + 2 * outcomes[..., 1] + outcomes[..., 2]


def generate_cohort(config: SynthConfig) -> tuple[Cohort, GroundTruth]:
    S, J, seed = config.n_subjects, config.n_visits, int(config.seed)
    p = len(config.feature_specs)
    values, eta = {}, np.full((S, J), config.true_beta[0])
    for k, f in enumerate(config.feature_specs):
        vals, numeric = _draw_feature(f, k, seed, S, J)
        values[f.spec.name] = vals
        eta = eta + config.true_beta[k + 1] * numeric

    if config.group_targets is None:
        mu = config.sigma_mu * _stream(seed, _MU).standard_normal(S)
        u = _stream(seed, _OUTCOME).random((S, J))
        prob = expit(eta + mu[:, None])
        outcome = (u < prob).astype(np.int8)
    else:
        mu, outcome = _rejection_sample(config, eta)
        prob = expit(eta + mu[:, None])

    missing = np.zeros((S * J, p), dtype=bool)
    if config.missing_rate > 0:
        for k in range(p):
            missing[:, k] = _stream(seed, _MASK, k).random(S * J) < config.missing_rate

    width = max(4, len(str(S)))
    subjects = [f"S{i + 1:0{width}d}" for i in range(S)]
    cohort = Cohort(
        config.specs,
        np.repeat(np.array(subjects, dtype=object), J),
        np.tile(np.arange(1, J + 1), S),
        {name: v.reshape(-1) for name, v in values.items()},
        missing,
        outcome.reshape(-1),
        n_visits=J,
    )
    truth = GroundTruth(
        beta=config.true_beta.copy(),
        sigma_mu=float(config.sigma_mu),
        subjects=subjects,
        mu=mu,
        true_probability=prob.reshape(-1),
        true_values={name: v.reshape(-1) for name, v in values.items()},
    )
    return cohort, truth


def _rejection_sample(config: SynthConfig, eta: np.ndarray):
    """Draw (mu_i, outcomes) per subject until its outcome group still has room."""
    S = config.n_subjects
    remaining = np.array(config.group_targets, dtype=np.int64)
    budget = _BUDGET_PER_SUBJECT * S
    used = 0
    mu = np.empty(S)
    outcome = np.empty((S, 3), dtype=np.int8)
    for i in range(S):
        rng = _stream(config.seed, _REJECT, i)
        while True:
            if used >= budget:
                raise InfeasibleTargets(
                    f"group targets not met within {budget} draws "
                    f"(subject {i}, remaining {remaining.tolist()})")
            m = config.sigma_mu * rng.standard_normal(_BATCH)
            u = rng.random((_BATCH, 3))
            y = (u < expit(eta[i][None, :] + m[:, None])).astype(np.int8)
            ok = np.flatnonzero(remaining[_groups_of(y)] > 0)
            if ok.size:
                c = ok[0]
                used += c + 1
                mu[i], outcome[i] = m[c], y[c]
                remaining[_groups_of(y[c])] -= 1
                break
            used += _BATCH
    return mu, outcome


REFERENCE_GROUP_COUNTS = [303, 13, 1, 9, 4, 1, 0, 29]


def reference_config(seed: int = 2024, missing_rate: float = 0.03) -> SynthConfig:
    """360-subject, 3-visit reference cohort with a fixed outcome-group histogram.

    Feature names follow common sleep and cardiovascular measures; a handful carry
    planted effects, the rest are noise.
    """
    cont = [
        # name, unit, mean, sd, beta
        ("total_cholesterol", "mg/dL", 195.0, 35.0, -0.030),
        ("ldl", "mg/dL", 115.0, 30.0, -0.020),
        ("hdl", "mg/dL", 52.0, 14.0, 0.0),
        ("triglycerides", "mg/dL", 140.0, 60.0, 0.0),
        ("glucose", "mg/dL", 98.0, 18.0, 0.025),
        ("creatinine", "mg/dL", 1.0, 0.2, 1.5),
        ("sbp_mean", "mmHg", 125.0, 14.0, 0.030),
        ("age", "years", 56.0, 8.0, 0.06),
        ("bmi", "kg/m2", 31.0, 6.0, 0.0),
        ("waisthip", "", 0.93, 0.08, 0.0),
        ("hipgirthm", "cm", 110.0, 12.0, 0.0),
        ("neckgirthm", "cm", 39.0, 4.0, 0.0),
        ("ahi", "events/h", 12.0, 10.0, 0.03),
        ("avgo2sattst", "%", 94.0, 2.0, 0.0),
        ("mean_desat_perc", "%", 3.5, 1.2, 0.0),
        ("sleep_latency", "min", 15.0, 10.0, 0.0),
        ("zung_index", "", 40.0, 8.0, 0.0),
        ("caffeine", "cups/day", 2.5, 1.5, 0.0),
        ("pctststage34", "%", 8.0, 6.0, 0.0),
    ]
    feats = [SynthFeature(FeatureSpec(n, "continuous", unit=u), mean=m, sd=s) for n, u, m, s, _ in cont]
    betas = [b for *_, b in cont]
    disc = [
        (FeatureSpec("diabetes_med", "binary"), (0.85, 0.15), True, 1.2),
        (FeatureSpec("apnea_treatment", "binary"), (0.8, 0.2), False, 0.0),
        (FeatureSpec("sedative_med", "binary"), (0.9, 0.1), False, 0.0),
        (FeatureSpec("sex", "categorical", category_levels=("F", "M")), (0.45, 0.55), True, 0.0),
        (FeatureSpec("general_health", "categorical",
                     category_levels=("Excellent", "Good", "Fair", "Poor")),
         (0.2, 0.45, 0.25, 0.1), False, 0.0),
    ]
    feats += [SynthFeature(s, probs=pr, persistent=pers) for s, pr, pers, _ in disc]
    betas += [b for *_, b in disc]
    # Intercept centres the planted contributions so the baseline log-odds is about -3.
    centre = sum(b * m for (_, _, m, _, b) in cont) + 1.2 * 0.15
    return SynthConfig(
        n_subjects=360,
        feature_specs=feats,
        true_beta=np.array([-3.0 - centre] + betas),
        sigma_mu=2.5,
        missing_rate=missing_rate,
        n_visits=3,
        group_targets=list(REFERENCE_GROUP_COUNTS),
        seed=seed,
    )
