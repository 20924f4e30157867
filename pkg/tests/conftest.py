import warnings

import numpy as np
import pytest

from cohort_phenotyper.cohort import Cohort, FeatureSpec
from cohort_phenotyper.preprocess import encode_categoricals, impute_knn
from cohort_phenotyper.synth import SynthConfig, SynthFeature, generate_cohort, reference_config


@pytest.fixture(scope="session")
def reference_cohort():
    cohort, truth = generate_cohort(reference_config())
    return cohort, truth


@pytest.fixture(scope="session")
def reference_matrix(reference_cohort):
    cohort, _ = reference_cohort
    matrix, _ = encode_categoricals(cohort)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return impute_knn(matrix)


def small_config(n_subjects=120, beta=(-0.5, 1.0, 0.0), sigma_mu=0.8, seed=0, missing_rate=0.0):
    feats = [SynthFeature(FeatureSpec("x1", "continuous"), mean=0.0, sd=1.0),
             SynthFeature(FeatureSpec("x2", "continuous"), mean=0.0, sd=1.0)]
    return SynthConfig(n_subjects, feats[: len(beta) - 1], np.array(beta), sigma_mu,
                       missing_rate, seed=seed)


def make_cohort(rows, specs=None):
    """rows: (subject, visit, values..., outcome)."""
    specs = specs or [FeatureSpec("a", "continuous"), FeatureSpec("g", "categorical",
                                                                  category_levels=("F", "M"))]
    cols = {s.name: [r[2 + j] for r in rows] for j, s in enumerate(specs)}
    missing = np.array([[r[2 + j] is None for j in range(len(specs))] for r in rows])
    for j, s in enumerate(specs):
        if not s.is_categorical:
            cols[s.name] = [0.0 if v is None else v for v in cols[s.name]]
        else:
            cols[s.name] = ["" if v is None else v for v in cols[s.name]]
    return Cohort(specs, [r[0] for r in rows], [r[1] for r in rows], cols, missing,
                  [r[-1] for r in rows])


# -- acceptance report --------------------------------------------------------

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
