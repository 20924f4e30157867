"""Subject-level stratified K-fold splitting."""
from __future__ import annotations

import numpy as np

from .errors import TooFewSubjects


def subject_labels(subject_ids, outcome) -> tuple[list[str], np.ndarray]:
    """Unique subjects (first-appearance order) and their any-visit outcome."""
    subject_ids = np.asarray(subject_ids, dtype=object)
    outcome = np.asarray(outcome)
    subjects = list(dict.fromkeys(subject_ids.tolist()))
    pos = {s: i for i, s in enumerate(subjects)}
    label = np.zeros(len(subjects), dtype=np.int8)
    for s, y in zip(subject_ids, outcome):
        if y:
            label[pos[s]] = 1
    return subjects, label


def stratified_subject_folds(subject_ids, outcome, folds: int = 5, seed: int = 0) -> list[list[str]]:
    """Partition subjects into ``folds`` groups stratified by any-visit outcome.

    Each class is shuffled and dealt round-robin, continuing from where the
    previous class stopped, so every fold holds within one subject of its
    proportional share of each class.
    """
    subjects, label = subject_labels(subject_ids, outcome)
    if folds < 2:
        raise TooFewSubjects("need at least 2 folds")
    rng = np.random.default_rng(seed)
    out: list[list[str]] = [[] for _ in range(folds)]
    start = 0
    for c in np.unique(label):
        members = [subjects[i] for i in np.flatnonzero(label == c)]
        if len(members) < folds:
            raise TooFewSubjects(f"class {int(c)} has {len(members)} subjects < {folds} folds")
        for i, j in enumerate(rng.permutation(len(members))):
            out[(start + i) % folds].append(members[j])
        start = (start + len(members)) % folds
    return out


def fold_masks(subject_ids, folds: list[list[str]]):
    """Yield (train_mask, test_mask) row masks per fold."""
    subject_ids = np.asarray(subject_ids, dtype=object)
    for members in folds:
        test = np.isin(subject_ids, members)
        yield ~test, test
