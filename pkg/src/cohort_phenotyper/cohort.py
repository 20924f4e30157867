"""Longitudinal cohort container, outcome-group coding and descriptive tables.

A :class:`Cohort` is a long table: one row per (subject, visit) with a value
for every feature and a binary outcome.  Missing cells are tracked in a
separate boolean mask; the stored value under a masked cell is a placeholder
(``0.0`` or ``""``) and carries no meaning.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import MissingVisit, ValidationError

KINDS = ("continuous", "categorical", "binary")
OUTCOME_LABELS = {0: "No CVD", 1: "CVD"}


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    unit: str = ""
    category_levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        levels = tuple(str(v) for v in self.category_levels)
        object.__setattr__(self, "category_levels", levels)
        if self.kind == "categorical" and not levels:
            raise ValidationError(f"categorical feature {self.name!r} lists no levels")
        if self.kind == "continuous" and levels:
            raise ValidationError(f"continuous feature {self.name!r} cannot list levels")
        if len(set(levels)) != len(levels):
            raise ValidationError(f"feature {self.name!r} has duplicate levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def is_discrete(self) -> bool:
        return self.kind != "continuous"

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.unit:
            out["unit"] = self.unit
        if self.category_levels:
            out["levels"] = list(self.category_levels)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            unit=d.get("unit", ""),
            category_levels=tuple(d.get("levels", d.get("category_levels", ()))),
        )


@dataclass(frozen=True)
class Observation:
    subject_id: str
    visit: int
    values: tuple
    missing_mask: tuple[bool, ...]
    outcome: int


def assign_outcome_group(outcomes_by_visit: Sequence) -> int:
    """Outcome-group code (0..7) for a subject's (visit 1, visit 2, visit 3) outcomes.

    Visit 1 is the most significant bit: ``code = 4*o1 + 2*o2 + o3``.
    """
    outcomes = list(outcomes_by_visit)
    if len(outcomes) != 3 or any(o is None for o in outcomes):
        raise MissingVisit(f"need outcomes for visits 1..3, got {outcomes!r}")
    bits = []
    for o in outcomes:
        if isinstance(o, float) and np.isnan(o):
            raise MissingVisit("missing visit outcome")
        if int(o) not in (0, 1) or int(o) != o:
            raise ValidationError(f"outcome must be 0 or 1, got {o!r}")
        bits.append(int(o))
    return 4 * bits[0] + 2 * bits[1] + bits[2]


def group_outcomes(code: int) -> tuple[int, int, int]:
    """Inverse of :func:`assign_outcome_group`."""
    if not 0 <= code <= 7:
        raise ValidationError(f"group code out of range: {code}")
    return (code >> 2) & 1, (code >> 1) & 1, code & 1


class Cohort:
    """Immutable subjects x visits table of named features plus an outcome."""

    def __init__(self, specs, subject_id, visit, columns, missing, outcome, n_visits=None):
        self.specs = tuple(specs)
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValidationError("feature names must be unique")
        self.subject_id = np.asarray(subject_id, dtype=object).astype(str).astype(object)
        self.visit = np.asarray(visit, dtype=np.int64)
        self.outcome = np.asarray(outcome, dtype=np.int8)
        n = len(self.subject_id)
        p = len(self.specs)
        missing = np.zeros((n, p), dtype=bool) if missing is None else np.asarray(missing, dtype=bool)
        if missing.shape != (n, p):
            raise ValidationError(f"missing mask shape {missing.shape} != {(n, p)}")
        if self.visit.shape != (n,) or self.outcome.shape != (n,):
            raise ValidationError("subject_id, visit and outcome must have equal length")
        if not np.isin(self.outcome, (0, 1)).all():
            raise ValidationError("outcome must be binary 0/1")
        self.n_visits = int(n_visits if n_visits is not None else (self.visit.max() if n else 1))
        if self.n_visits < 1:
            raise ValidationError("n_visits must be >= 1")
        if n and (self.visit.min() < 1 or self.visit.max() > self.n_visits):
            raise ValidationError(f"visit indices must lie in 1..{self.n_visits}")
        keys = pd.MultiIndex.from_arrays([self.subject_id, self.visit])
        if keys.has_duplicates:
            dup = keys[keys.duplicated()][0]
            raise ValidationError(f"duplicate (subject, visit) pair {dup}")

        self._columns = {}
        for j, spec in enumerate(self.specs):
            col = columns[spec.name]
            if spec.is_categorical:
                arr = np.asarray(col, dtype=object).copy()
                arr[missing[:, j]] = ""
                arr = arr.astype(str).astype(object)
            else:
                arr = np.asarray(col, dtype=np.float64).copy()
                arr[missing[:, j]] = 0.0
                if not np.isfinite(arr).all():
                    raise ValidationError(f"feature {spec.name!r} has non-finite observed values")
                if spec.kind == "binary" and not np.isin(arr, (0.0, 1.0)).all():
                    raise ValidationError(f"binary feature {spec.name!r} must be 0/1")
            if arr.shape != (n,):
                raise ValidationError(f"column {spec.name!r} has wrong length")
            arr.setflags(write=False)
            self._columns[spec.name] = arr
        self.missing = missing.copy()
        for a in (self.subject_id, self.visit, self.outcome, self.missing):
            a.setflags(write=False)

    # -- construction -------------------------------------------------

    @classmethod
    def from_rows(cls, specs, rows: Sequence[Observation], n_visits=None) -> "Cohort":
        specs = tuple(specs)
        p = len(specs)
        for r in rows:
            if len(r.values) != p or len(r.missing_mask) != p:
                raise ValidationError("observation values/mask must align with specs")
        columns = {s.name: [r.values[j] for r in rows] for j, s in enumerate(specs)}
        for j, s in enumerate(specs):
            if not s.is_categorical:
                columns[s.name] = [0.0 if r.missing_mask[j] else r.values[j] for r in rows]
        return cls(
            specs,
            [r.subject_id for r in rows],
            [r.visit for r in rows],
            columns,
            np.array([r.missing_mask for r in rows], dtype=bool).reshape(len(rows), p),
            [r.outcome for r in rows],
            n_visits=n_visits,
        )

    def subset(self, mask) -> "Cohort":
        mask = np.asarray(mask)
        return Cohort(
            self.specs,
            self.subject_id[mask],
            self.visit[mask],
            {k: v[mask] for k, v in self._columns.items()},
            self.missing[mask],
            self.outcome[mask],
            n_visits=self.n_visits,
        )

    def select_subjects(self, subjects) -> "Cohort":
        return self.subset(np.isin(self.subject_id, list(subjects)))

    # -- accessors ----------------------------------------------------

    def __len__(self) -> int:
        return len(self.subject_id)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> FeatureSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def column(self, name: str) -> np.ndarray:
        return self._columns[name]

    def observed(self, name: str) -> np.ndarray:
        return ~self.missing[:, self.names.index(name)]

    @property
    def subjects(self) -> list[str]:
        """Subject ids in order of first appearance."""
        return list(dict.fromkeys(self.subject_id.tolist()))

    @property
    def rows(self) -> Iterator[Observation]:
        cols = [self._columns[s.name] for s in self.specs]
        for i in range(len(self)):
            yield Observation(
                subject_id=self.subject_id[i],
                visit=int(self.visit[i]),
                values=tuple(c[i] for c in cols),
                missing_mask=tuple(bool(m) for m in self.missing[i]),
                outcome=int(self.outcome[i]),
            )

    def outcome_groups(self) -> dict[str, int]:
        """Group code per subject observed at all of visits 1..3."""
        table = {}
        for sid, v, y in zip(self.subject_id, self.visit, self.outcome):
            table.setdefault(sid, {})[int(v)] = int(y)
        groups = {}
        for sid, by_visit in table.items():
            try:
                groups[sid] = assign_outcome_group([by_visit.get(v) for v in (1, 2, 3)])
            except MissingVisit:
                continue
        return groups

    def group_counts(self) -> list[int]:
        counts = [0] * 8
        for g in self.outcome_groups().values():
            counts[g] += 1
        return counts

    def equals(self, other: "Cohort") -> bool:
        if self.specs != other.specs or len(self) != len(other):
            return False
        same = (
            np.array_equal(self.subject_id, other.subject_id)
            and np.array_equal(self.visit, other.visit)
            and np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.missing, other.missing)
        )
        return same and all(
            np.array_equal(self._columns[k], other._columns[k]) for k in self._columns
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame with missing cells as ``None``/NaN (for display and CSV)."""
        df = pd.DataFrame({"subject_id": self.subject_id, "visit": self.visit})
        for j, s in enumerate(self.specs):
            col = self._columns[s.name]
            if s.is_categorical:
                df[s.name] = np.where(self.missing[:, j], None, col)
            else:
                df[s.name] = np.where(self.missing[:, j], np.nan, col)
        df["outcome"] = self.outcome.astype(int)
        return df


# -- CSV + JSON schema ------------------------------------------------------

def write_schema(specs, path, n_visits=None) -> None:
    doc = {"features": [s.to_dict() for s in specs]}
    if n_visits is not None:
        doc["n_visits"] = int(n_visits)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_schema(path) -> tuple[list[FeatureSpec], int | None]:
    doc = json.loads(Path(path).read_text())
    feats = doc["features"] if isinstance(doc, dict) else doc
    n_visits = doc.get("n_visits") if isinstance(doc, dict) else None
    return [FeatureSpec.from_dict(f) for f in feats], n_visits


def _format_number(x: float) -> str:
    return repr(float(x))


def _parse_numbers(cells: pd.Series, name: str) -> np.ndarray:
    # Python's float() round-trips repr exactly; pandas' fast parser may not
    try:
        return np.array([float(c) for c in cells], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"column {name!r}: {exc}") from exc


def write_cohort(cohort: Cohort, csv_path, schema_path=None) -> None:
    """Write the long CSV (empty cell = missing) and optionally the schema sidecar."""
    out = {"subject_id": cohort.subject_id, "visit": cohort.visit}
    for j, s in enumerate(cohort.specs):
        col = cohort.column(s.name)
        miss = cohort.missing[:, j]
        if s.is_categorical:
            cells = [("" if m else v) for v, m in zip(col, miss)]
        elif s.kind == "binary":
            cells = [("" if m else str(int(v))) for v, m in zip(col, miss)]
        else:
            cells = [("" if m else _format_number(v)) for v, m in zip(col, miss)]
        out[s.name] = cells
    out["outcome"] = cohort.outcome.astype(int)
    pd.DataFrame(out).to_csv(csv_path, index=False, lineterminator="\n")
    if schema_path is not None:
        write_schema(cohort.specs, schema_path, cohort.n_visits)


def read_cohort(csv_path, schema_path) -> Cohort:
    specs, n_visits = read_schema(schema_path)
    df = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    expected = ["subject_id", "visit"] + [s.name for s in specs] + ["outcome"]
    if list(df.columns) != expected:
        raise ValidationError(f"CSV header {list(df.columns)} does not match schema {expected}")
    if (df["outcome"].str.strip() == "").any():
        raise ValidationError("outcome cells may not be empty")
    missing = np.zeros((len(df), len(specs)), dtype=bool)
    columns = {}
    for j, s in enumerate(specs):
        raw = df[s.name].str.strip()
        missing[:, j] = (raw == "").to_numpy()
        if s.is_categorical:
            columns[s.name] = raw.to_numpy(dtype=object)
        else:
            columns[s.name] = _parse_numbers(raw.where(raw != "", "0"), s.name)
    return Cohort(
        specs,
        df["subject_id"].to_numpy(dtype=object),
        df["visit"].astype(int).to_numpy(),
        columns,
        missing,
        df["outcome"].astype(int).to_numpy(),
        n_visits=n_visits,
    )


# -- descriptive summary ------------------------------------------------------

@dataclass
class DescriptiveTable:
    """Per-visit, per-outcome descriptive statistics (long format).

    ``stats`` has one row per (visit, outcome, feature, level); continuous
    features leave ``level`` empty and fill ``mean``/``sd``, discrete features
    fill ``count``/``pct``.  ``strata`` holds the row count per stratum.
    """

    strata: pd.DataFrame
    stats: pd.DataFrame
    notes: list[str] = field(default_factory=list)

    def formatted(self) -> pd.DataFrame:
        """Wide table in the ``mean(SD)`` / ``n(%)`` layout."""
        cells = {}
        for r in self.stats.itertuples(index=False):
            key = (r.feature if not r.level else f"{r.feature}={r.level}")
            col = f"Visit {r.visit} {OUTCOME_LABELS[r.outcome]} (n={r.n})"
            if r.n == 0:
                text = ""
            elif r.level == "":
                text = f"{r.mean:.2f}({r.sd:.2f})"
            else:
                text = f"{r.count}({r.pct:.2f}%)"
            cells.setdefault(key, {})[col] = text
        return pd.DataFrame.from_dict(cells, orient="index")


def summarize_by_outcome(cohort: Cohort) -> DescriptiveTable:
    """Describe every feature within each (visit, outcome) stratum.

    Continuous features get mean and sample SD (n-1 denominator); a stratum
    with a single observed value reports SD 0 and sets ``degenerate``.  Empty
    strata report ``n = 0`` with blank statistics.
    """
    if len(cohort) == 0:
        raise ValidationError("cohort is empty")
    strata_rows, stat_rows = [], []
    for v in range(1, cohort.n_visits + 1):
        for y in (0, 1):
            sel = (cohort.visit == v) & (cohort.outcome == y)
            n = int(sel.sum())
            strata_rows.append({"visit": v, "outcome": y, "n": n})
            for j, s in enumerate(cohort.specs):
                obs = sel & ~cohort.missing[:, j]
                vals = cohort.column(s.name)[obs]
                base = {"visit": v, "outcome": y, "n": n, "feature": s.name, "n_observed": len(vals)}
                if s.kind == "continuous":
                    m = len(vals)
                    mean = float(np.mean(vals)) if m else np.nan
                    sd = float(np.std(vals, ddof=1)) if m > 1 else (0.0 if m == 1 else np.nan)
                    stat_rows.append({**base, "level": "", "mean": mean, "sd": sd,
                                      "count": np.nan, "pct": np.nan, "degenerate": m == 1})
                else:
                    levels = s.category_levels if s.is_categorical else ("1",)
                    labels = vals if s.is_categorical else np.array(
                        [str(int(x)) for x in vals], dtype=object)
                    for lev in levels:
                        c = int(np.sum(labels == lev))
                        pct = 100.0 * c / len(vals) if len(vals) else np.nan
                        stat_rows.append({**base, "level": lev, "mean": np.nan, "sd": np.nan,
                                          "count": c, "pct": pct, "degenerate": False})
    return DescriptiveTable(pd.DataFrame(strata_rows), pd.DataFrame(stat_rows))
