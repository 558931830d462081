"""Observation-level data model for longitudinal cluster randomized panels.

A panel holds unit-year records from a trial in which whole clusters
(schools, hospitals, counties) were assigned to one of two arms. Units enter
in cohorts, possibly at different grades within a cohort, and contribute one
record per year of follow-up. Records are partitioned into cohort-year
groups: units that entered in the same cohort at the same grade, observed in
the same follow-up year. Downstream estimation operates on these groups.

Panels are immutable once constructed. Derived views (``with_outcome``)
share column arrays with their parent rather than copying.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import InputError

# Logical column names understood by schemas and by the CSV round trip.
LOGICAL_COLUMNS = (
    "unit",
    "cluster",
    "block",
    "treatment",
    "cohort",
    "grade",
    "year",
    "outcome",
    "tested_in",
)
REQUIRED_COLUMNS = ("unit", "cluster", "treatment", "cohort", "grade", "year", "outcome")

_MAX_REPORTED_ROWS = 8


@dataclass(frozen=True)
class Observation:
    """One unit-year record."""

    unit_id: str
    cluster_id: str
    treatment: int
    cohort: int
    grade: int
    follow_up_year: int
    outcome: float
    tested_in: int | None = None
    block_id: str | None = None


@dataclass(frozen=True)
class GroupInfo:
    """Catalog entry for one cohort-year group."""

    g: int
    cohort: int
    entry_grade: int
    follow_up_year: int
    n: int
    n_treated: int
    n_control: int

    @property
    def degenerate(self) -> bool:
        """True when one arm contributes no observations."""
        return self.n_treated == 0 or self.n_control == 0


@dataclass(frozen=True)
class ThresholdRule:
    """Per-grade cutoff rule used to derive test-in flags at ingestion.

    A unit tests in the first year its score falls below the cutoff for its
    grade; the flag persists for all later years.
    """

    score_column: str
    cutoffs: Mapping[int, float]


@dataclass(frozen=True)
class PanelSchema:
    """Mapping from logical column names to physical column names.

    ``columns`` maps logical names (see ``LOGICAL_COLUMNS``) to the names
    that actually appear in the source. ``covariates`` lists physical
    columns carried along as numeric covariates. ``tested_in_rule``
    optionally derives test-in flags when no flag column exists.
    """

    columns: Mapping[str, str]
    covariates: tuple[str, ...] = ()
    tested_in_rule: ThresholdRule | None = None

    def __post_init__(self) -> None:
        unknown = set(self.columns) - set(LOGICAL_COLUMNS)
        if unknown:
            raise InputError(f"unknown logical columns in schema: {sorted(unknown)}")
        missing = [c for c in REQUIRED_COLUMNS if c not in self.columns]
        if missing:
            raise InputError(f"schema missing required logical columns: {missing}")

    @classmethod
    def from_json(cls, source: str | os.PathLike | io.TextIOBase) -> "PanelSchema":
        if isinstance(source, (str, os.PathLike)):
            with open(source, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        else:
            raw = json.load(source)
        rule = None
        if "tested_in_rule" in raw and raw["tested_in_rule"] is not None:
            spec = raw["tested_in_rule"]
            try:
                cutoffs = {int(k): float(v) for k, v in spec["cutoffs"].items()}
                rule = ThresholdRule(score_column=spec["score_column"], cutoffs=cutoffs)
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"malformed tested_in_rule in schema: {exc}") from exc
        try:
            return cls(
                columns=dict(raw["columns"]),
                covariates=tuple(raw.get("covariates", ())),
                tested_in_rule=rule,
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed schema: {exc}") from exc


@dataclass(frozen=True)
class IngestReport:
    """What ingestion dropped or derived, for the caller's records."""

    n_read: int
    n_kept: int
    dropped_rows: tuple[tuple[int, str], ...] = ()
    derived_tested_in: bool = False


def _as_int_array(values: Sequence, name: str) -> np.ndarray:
    arr = np.asarray(values)
    out = arr.astype(np.int64)
    if not np.array_equal(out, arr.astype(np.float64)):
        raise InputError(f"column '{name}' contains non-integer values")
    return out


def _segment_offsets(sorted_keys: np.ndarray) -> np.ndarray:
    """Index of each row's segment start, for rows sorted by key."""
    if len(sorted_keys) == 0:
        return np.zeros(0, dtype=np.int64)
    new_seg = np.empty(len(sorted_keys), dtype=bool)
    new_seg[0] = True
    new_seg[1:] = sorted_keys[1:] != sorted_keys[:-1]
    starts = np.flatnonzero(new_seg)
    seg_id = np.cumsum(new_seg) - 1
    return starts[seg_id]


def persist_flags(raw: np.ndarray, unit: np.ndarray, year: np.ndarray) -> np.ndarray:
    """Carry a 0/1 flag forward in time within each unit.

    Once a unit's raw flag is 1 in some year, the returned flag is 1 for
    that year and every later year of the same unit.
    """
    raw = np.asarray(raw).astype(np.int8)
    order = np.lexsort((year, unit))
    f = raw[order]
    csum = np.cumsum(f)
    start = _segment_offsets(unit[order])
    seen = csum - np.where(start > 0, csum[start - 1], 0)
    out_sorted = (seen > 0).astype(np.int8)
    out = np.empty_like(out_sorted)
    out[order] = out_sorted
    return out


def _validate_arrays(
    *,
    unit: np.ndarray,
    cluster: np.ndarray,
    treatment: np.ndarray,
    year: np.ndarray,
    outcome: np.ndarray,
    tested_in: np.ndarray | None,
    block: np.ndarray | None,
    row_numbers: np.ndarray | None = None,
) -> None:
    """Raise InputError naming offending rows when an invariant fails."""
    n = len(unit)
    rows = row_numbers if row_numbers is not None else np.arange(n)

    def _fail(mask: np.ndarray, what: str) -> None:
        bad = rows[mask][:_MAX_REPORTED_ROWS].tolist()
        more = int(mask.sum()) - len(bad)
        suffix = f" (+{more} more)" if more > 0 else ""
        raise InputError(f"{what}: rows {bad}{suffix}")

    bad = ~np.isin(treatment, (0, 1))
    if bad.any():
        _fail(bad, "non-binary treatment")
    bad = year < 1
    if bad.any():
        _fail(bad, "follow_up_year below 1")
    bad = ~np.isfinite(outcome)
    if bad.any():
        _fail(bad, "non-finite outcome")
    if tested_in is not None:
        bad = ~np.isin(tested_in, (0, 1))
        if bad.any():
            _fail(bad, "non-binary tested_in flag")

    # duplicate (unit, year) pairs
    order = np.lexsort((year, unit))
    dup_sorted = np.zeros(n, dtype=bool)
    if n > 1:
        dup_sorted[1:] = (unit[order][1:] == unit[order][:-1]) & (
            year[order][1:] == year[order][:-1]
        )
    if dup_sorted.any():
        dup = np.zeros(n, dtype=bool)
        dup[order] = dup_sorted
        _fail(dup, "duplicate (unit, follow_up_year) pair")

    # treatment constant within cluster
    for name, col in (("treatment", treatment),) + (
        (("block", block),) if block is not None else ()
    ):
        first = {}
        bad_mask = np.zeros(n, dtype=bool)
        for i, (c, v) in enumerate(zip(cluster.tolist(), col.tolist())):
            if c in first:
                if first[c] != v:
                    bad_mask[i] = True
            else:
                first[c] = v
        if bad_mask.any():
            _fail(bad_mask, f"{name} varies within a cluster")

    # cluster membership fixed per unit
    first_cl: dict = {}
    bad_mask = np.zeros(n, dtype=bool)
    for i, (u, c) in enumerate(zip(unit.tolist(), cluster.tolist())):
        if u in first_cl:
            if first_cl[u] != c:
                bad_mask[i] = True
        else:
            first_cl[u] = c
    if bad_mask.any():
        _fail(bad_mask, "unit appears in more than one cluster")

    # tested_in monotone non-decreasing within unit
    if tested_in is not None:
        f = tested_in[order]
        csum = np.cumsum(f)
        start = _segment_offsets(unit[order])
        seen = csum - np.where(start > 0, csum[start - 1], 0)
        viol_sorted = (seen > 0) & (f == 0)
        if viol_sorted.any():
            viol = np.zeros(n, dtype=bool)
            viol[order] = viol_sorted
            _fail(viol, "tested_in flag drops back to 0 within a unit")


class PanelDataset:
    """Immutable column store for one panel plus its group catalog.

    Rows are indexed 0..n-1. Units and clusters are held as contiguous
    integer codes; original labels, when known, live in ``unit_labels`` and
    ``cluster_labels`` (arrays indexed by code). The group catalog is
    derived at construction: one entry per observed (cohort, entry grade,
    follow-up year) combination, ordered by that key, where
    entry grade = grade - (follow_up_year - 1).
    """

    def __init__(
        self,
        *,
        unit: np.ndarray,
        cluster: np.ndarray,
        treatment: np.ndarray,
        cohort: np.ndarray,
        grade: np.ndarray,
        year: np.ndarray,
        outcome: np.ndarray,
        tested_in: np.ndarray | None = None,
        block: np.ndarray | None = None,
        covariates: Mapping[str, np.ndarray] | None = None,
        unit_labels: np.ndarray | None = None,
        cluster_labels: np.ndarray | None = None,
        block_labels: np.ndarray | None = None,
        meta: Mapping | None = None,
        validate: bool = True,
        _catalog: tuple[GroupInfo, ...] | None = None,
        _group_ids: np.ndarray | None = None,
    ) -> None:
        self.unit = np.asarray(unit, dtype=np.int64)
        self.cluster = np.asarray(cluster, dtype=np.int64)
        self.treatment = np.asarray(treatment, dtype=np.int8)
        self.cohort = np.asarray(cohort, dtype=np.int64)
        self.grade = np.asarray(grade, dtype=np.int64)
        self.year = np.asarray(year, dtype=np.int64)
        self.outcome = np.asarray(outcome, dtype=np.float64)
        self.tested_in = None if tested_in is None else np.asarray(tested_in, dtype=np.int8)
        self.block = None if block is None else np.asarray(block, dtype=np.int64)
        self.covariates = {k: np.asarray(v, dtype=np.float64) for k, v in (covariates or {}).items()}
        self.unit_labels = unit_labels
        self.cluster_labels = cluster_labels
        self.block_labels = block_labels
        self.meta = dict(meta) if meta else {}

        n = len(self.unit)
        for name, col in (
            ("cluster", self.cluster),
            ("treatment", self.treatment),
            ("cohort", self.cohort),
            ("grade", self.grade),
            ("year", self.year),
            ("outcome", self.outcome),
        ):
            if len(col) != n:
                raise InputError(f"column '{name}' has length {len(col)}, expected {n}")
        if self.tested_in is not None and len(self.tested_in) != n:
            raise InputError("tested_in column length mismatch")
        for name, col in self.covariates.items():
            if len(col) != n:
                raise InputError(f"covariate '{name}' length mismatch")
            if not np.isfinite(col).all():
                raise InputError(f"covariate '{name}' contains non-finite values")

        if validate:
            _validate_arrays(
                unit=self.unit,
                cluster=self.cluster,
                treatment=self.treatment,
                year=self.year,
                outcome=self.outcome,
                tested_in=self.tested_in,
                block=self.block,
            )

        self.n_clusters = int(self.cluster.max()) + 1 if n else 0
        self.z_by_cluster = np.zeros(self.n_clusters, dtype=np.int8)
        if n:
            self.z_by_cluster[self.cluster] = self.treatment

        if _catalog is not None and _group_ids is not None:
            # group identity is static across replicates; arm counts are not
            self.group_ids = _group_ids
            counts = np.bincount(_group_ids, minlength=len(_catalog))
            n_treated = np.bincount(
                _group_ids, weights=self.treatment, minlength=len(_catalog)
            ).astype(np.int64)
            self.catalog = tuple(
                dataclasses.replace(
                    gi,
                    n=int(counts[gi.g]),
                    n_treated=int(n_treated[gi.g]),
                    n_control=int(counts[gi.g] - n_treated[gi.g]),
                )
                for gi in _catalog
            )
        else:
            self.catalog, self.group_ids = self._build_catalog()

    # ------------------------------------------------------------------

    def _build_catalog(self) -> tuple[tuple[GroupInfo, ...], np.ndarray]:
        entry_grade = self.grade - (self.year - 1)
        keys = np.stack([self.cohort, entry_grade, self.year], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.astype(np.int64)
        n_groups = len(uniq)
        counts = np.bincount(inverse, minlength=n_groups)
        n_treated = np.bincount(inverse, weights=self.treatment, minlength=n_groups).astype(np.int64)
        catalog = tuple(
            GroupInfo(
                g=int(g),
                cohort=int(uniq[g, 0]),
                entry_grade=int(uniq[g, 1]),
                follow_up_year=int(uniq[g, 2]),
                n=int(counts[g]),
                n_treated=int(n_treated[g]),
                n_control=int(counts[g] - n_treated[g]),
            )
            for g in range(n_groups)
        )
        return catalog, inverse

    # ------------------------------------------------------------------

    @property
    def n_obs(self) -> int:
        return len(self.unit)

    @property
    def n_groups(self) -> int:
        return len(self.catalog)

    @property
    def n_units(self) -> int:
        return len(np.unique(self.unit))

    @property
    def group_index(self) -> dict[tuple[int, int, int], int]:
        """Map (cohort, entry_grade, follow_up_year) to group ordinal."""
        return {(gi.cohort, gi.entry_grade, gi.follow_up_year): gi.g for gi in self.catalog}

    def column(self, name: str) -> np.ndarray:
        """Numeric column by name, covering intrinsic fields and covariates."""
        intrinsic = {
            "grade": self.grade,
            "cohort": self.cohort,
            "follow_up_year": self.year,
        }
        if name in intrinsic:
            return intrinsic[name].astype(np.float64)
        if name in self.covariates:
            return self.covariates[name]
        raise InputError(f"unknown covariate column '{name}'")

    def cluster_label(self, code: int) -> str:
        if self.cluster_labels is not None:
            return str(self.cluster_labels[code])
        return str(code)

    def with_outcome(self, outcome: np.ndarray) -> "PanelDataset":
        """Copy of this panel with a replaced outcome column.

        All other columns and the catalog are shared, not copied.
        """
        outcome = np.asarray(outcome, dtype=np.float64)
        if outcome.shape != self.outcome.shape:
            raise InputError("replacement outcome has wrong shape")
        new = object.__new__(PanelDataset)
        new.__dict__.update(self.__dict__)
        new.outcome = outcome
        new.meta = dict(self.meta)
        return new

    def exit_mask(self, exit_grade: int | None = None) -> np.ndarray:
        """Boolean mask selecting each unit's exit observation.

        By default the exit observation is the unit's last follow-up year.
        With ``exit_grade`` given, it is the observation at that grade, and
        units never observed at that grade contribute nothing.
        """
        if exit_grade is not None:
            return self.grade == exit_grade
        order = np.lexsort((self.year, self.unit))
        last_sorted = np.zeros(self.n_obs, dtype=bool)
        if self.n_obs:
            last_sorted[-1] = True
            last_sorted[:-1] = self.unit[order][1:] != self.unit[order][:-1]
        mask = np.zeros(self.n_obs, dtype=bool)
        mask[order] = last_sorted
        return mask

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n_obs):
            yield Observation(
                unit_id=str(self.unit_labels[self.unit[i]]) if self.unit_labels is not None else str(self.unit[i]),
                cluster_id=self.cluster_label(int(self.cluster[i])),
                treatment=int(self.treatment[i]),
                cohort=int(self.cohort[i]),
                grade=int(self.grade[i]),
                follow_up_year=int(self.year[i]),
                outcome=float(self.outcome[i]),
                tested_in=None if self.tested_in is None else int(self.tested_in[i]),
                block_id=None
                if self.block is None
                else (str(self.block_labels[self.block[i]]) if self.block_labels is not None else str(self.block[i])),
            )

    # ------------------------------------------------------------------

    def to_csv(self, destination: str | os.PathLike | io.TextIOBase) -> None:
        """Write the panel using canonical logical column names."""
        own = isinstance(destination, (str, os.PathLike))
        fh = open(destination, "w", newline="", encoding="utf-8") if own else destination
        try:
            cols = ["unit", "cluster", "treatment", "cohort", "grade", "year", "outcome"]
            if self.block is not None:
                cols.insert(2, "block")
            if self.tested_in is not None:
                cols.append("tested_in")
            cols.extend(self.covariates)
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            unit_lab = (
                self.unit_labels[self.unit]
                if self.unit_labels is not None
                else np.char.add("u", np.char.zfill(self.unit.astype(str), 7))
            )
            clus_lab = (
                self.cluster_labels[self.cluster]
                if self.cluster_labels is not None
                else np.char.add("c", np.char.zfill(self.cluster.astype(str), 4))
            )
            if self.block is not None:
                blk_lab = (
                    self.block_labels[self.block]
                    if self.block_labels is not None
                    else np.char.add("b", np.char.zfill(self.block.astype(str), 4))
                )
            for i in range(self.n_obs):
                row = [
                    unit_lab[i],
                    clus_lab[i],
                    int(self.treatment[i]),
                    int(self.cohort[i]),
                    int(self.grade[i]),
                    int(self.year[i]),
                    repr(float(self.outcome[i])),
                ]
                if self.block is not None:
                    row.insert(2, blk_lab[i])
                if self.tested_in is not None:
                    row.append(int(self.tested_in[i]))
                for name in self.covariates:
                    row.append(repr(float(self.covariates[name][i])))
                writer.writerow(row)
        finally:
            if own:
                fh.close()


def derive_groups(panel: PanelDataset) -> tuple[GroupInfo, ...]:
    """Group catalog of a panel, ordered by (cohort, entry grade, year)."""
    return panel.catalog


IDENTITY_SCHEMA = PanelSchema(columns={c: c for c in LOGICAL_COLUMNS})


def ingest_panel(
    source: str | os.PathLike | io.TextIOBase | Iterable[Mapping[str, str]],
    schema: PanelSchema = IDENTITY_SCHEMA,
) -> PanelDataset:
    """Read a delimited or record-stream source into a PanelDataset.

    Rows that fail type coercion raise ``InputError`` naming the row. Rows
    with a missing outcome are dropped and recorded in the panel's
    ``ingest_report``. When the schema maps no ``tested_in`` column but
    provides a threshold rule, flags are derived from the designated score
    column with persistence across years.
    """
    own = False
    rows: Iterable[Mapping[str, str]]
    if isinstance(source, (str, os.PathLike)):
        fh = open(source, "r", newline="", encoding="utf-8")
        own = True
        rows = csv.DictReader(fh)
    elif isinstance(source, io.TextIOBase):
        rows = csv.DictReader(source)
    else:
        rows = source

    col = dict(schema.columns)
    rule = schema.tested_in_rule

    # Optional logical columns are used only when the source actually has
    # them, so the identity schema works on sources with or without flags.
    rows = iter(rows)
    first = next(rows, None)
    if first is not None:
        rows = itertools.chain([first], rows)
        for optional in ("block", "tested_in"):
            if optional in col and col[optional] not in first:
                del col[optional]
    has_block = "block" in col
    has_flag = "tested_in" in col
    if has_flag and rule is not None:
        raise InputError("schema maps a tested_in column and also provides a threshold rule")

    raw: dict[str, list] = {k: [] for k in ("unit", "cluster", "treatment", "cohort", "grade", "year", "outcome")}
    if has_block:
        raw["block"] = []
    if has_flag:
        raw["tested_in"] = []
    cov_raw: dict[str, list] = {c: [] for c in schema.covariates}
    score_raw: list[float] = []
    kept_row_numbers: list[int] = []
    dropped: list[tuple[int, str]] = []
    errors: list[str] = []
    n_read = 0

    def _need(record: Mapping[str, str], physical: str, rownum: int) -> str:
        if physical not in record or record[physical] is None:
            raise InputError(f"row {rownum}: missing column '{physical}'")
        return record[physical]

    try:
        for rownum, record in enumerate(rows, start=2):  # row 1 is the header
            n_read += 1
            try:
                out_text = _need(record, col["outcome"], rownum).strip()
                if out_text == "":
                    dropped.append((rownum, "missing outcome"))
                    continue
                raw["outcome"].append(float(out_text))
                raw["unit"].append(_need(record, col["unit"], rownum).strip())
                raw["cluster"].append(_need(record, col["cluster"], rownum).strip())
                raw["treatment"].append(int(_need(record, col["treatment"], rownum).strip()))
                raw["cohort"].append(int(_need(record, col["cohort"], rownum).strip()))
                raw["grade"].append(int(_need(record, col["grade"], rownum).strip()))
                raw["year"].append(int(_need(record, col["year"], rownum).strip()))
                if has_block:
                    raw["block"].append(_need(record, col["block"], rownum).strip())
                if has_flag:
                    raw["tested_in"].append(int(_need(record, col["tested_in"], rownum).strip()))
                for c in schema.covariates:
                    cov_raw[c].append(float(_need(record, c, rownum)))
                if rule is not None:
                    score_raw.append(float(_need(record, rule.score_column, rownum)))
                kept_row_numbers.append(rownum)
            except InputError:
                raise
            except (ValueError, TypeError) as exc:
                errors.append(f"row {rownum}: {exc}")
                if len(errors) >= _MAX_REPORTED_ROWS:
                    break
    finally:
        if own:
            fh.close()

    if errors:
        raise InputError("could not parse input: " + "; ".join(errors))
    if not raw["unit"]:
        raise InputError("no usable rows in input")

    unit_labels, unit = np.unique(np.asarray(raw["unit"]), return_inverse=True)
    cluster_labels, cluster = np.unique(np.asarray(raw["cluster"]), return_inverse=True)
    treatment = np.asarray(raw["treatment"], dtype=np.int64)
    cohort = np.asarray(raw["cohort"], dtype=np.int64)
    grade = np.asarray(raw["grade"], dtype=np.int64)
    year = np.asarray(raw["year"], dtype=np.int64)
    outcome = np.asarray(raw["outcome"], dtype=np.float64)
    block = block_labels = None
    if has_block:
        block_labels, block = np.unique(np.asarray(raw["block"]), return_inverse=True)

    tested_in = None
    derived = False
    if has_flag:
        tested_in = np.asarray(raw["tested_in"], dtype=np.int64)
    elif rule is not None:
        missing = sorted(set(grade.tolist()) - set(rule.cutoffs))
        if missing:
            raise InputError(f"threshold rule lacks cutoffs for grades {missing}")
        cut = np.asarray([rule.cutoffs[g] for g in grade.tolist()])
        below = np.asarray(score_raw) < cut
        tested_in = persist_flags(below, unit, year)
        derived = True

    _validate_arrays(
        unit=unit,
        cluster=cluster,
        treatment=treatment,
        year=year,
        outcome=outcome,
        tested_in=tested_in,
        block=block,
        row_numbers=np.asarray(kept_row_numbers),
    )

    panel = PanelDataset(
        unit=unit,
        cluster=cluster,
        treatment=treatment,
        cohort=cohort,
        grade=grade,
        year=year,
        outcome=outcome,
        tested_in=tested_in,
        block=block,
        covariates={c: np.asarray(v) for c, v in cov_raw.items()},
        unit_labels=unit_labels,
        cluster_labels=cluster_labels,
        block_labels=block_labels,
        validate=False,
    )
    panel.ingest_report = IngestReport(
        n_read=n_read,
        n_kept=panel.n_obs,
        dropped_rows=tuple(dropped),
        derived_tested_in=derived,
    )
    return panel
