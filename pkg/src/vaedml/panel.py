"""Firm-year panel container and design-matrix transformations.

A panel is a rectangular table of firm-year rows with a role attached to
every value column (outcome, treatment, control, ...). All transformations
here are pure: they return new tables and never mutate their inputs.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DomainError, DuplicateKeyError, ParseError, SchemaError

ROLES = {"outcome", "treatment", "control", "fixed_effect_key", "mediator", "auxiliary"}

# treatment-measure variants (ratio of challenger stakes to the largest stake)
TOP2TO10_OVER_TOP1 = "top2to10_over_top1"
TOP2TO5_OVER_TOP1 = "top2to5_over_top1"
SECOND_OVER_FIRST = "second_over_first"
TREATMENT_VARIANTS = {TOP2TO10_OVER_TOP1, TOP2TO5_OVER_TOP1, SECOND_OVER_FIRST}


@dataclass(frozen=True)
class PanelTable:
    """Firm-year rows plus a role map for the value columns.

    ``data`` holds one row per (firm, year); ``roles`` maps each value
    column to one of ``ROLES``. The firm and year columns are identifiers
    and are not listed in ``roles`` (the year column may additionally be
    used as a fixed-effect key).
    """

    data: pd.DataFrame
    roles: dict[str, str] = field(default_factory=dict)
    firm_col: str = "firm_id"
    year_col: str = "year"

    def __post_init__(self):
        for col in (self.firm_col, self.year_col):
            if col not in self.data.columns:
                raise SchemaError(f"panel is missing identifier column {col!r}")
        for col, role in self.roles.items():
            if role not in ROLES:
                raise SchemaError(f"unknown role {role!r} for column {col!r}")
            if col not in self.data.columns:
                raise SchemaError(f"role declared for absent column {col!r}")
        dup = self.data.duplicated(subset=[self.firm_col, self.year_col])
        if dup.any():
            keys = self.data.loc[dup, [self.firm_col, self.year_col]]
            offenders = [tuple(r) for r in keys.itertuples(index=False)][:10]
            raise DuplicateKeyError(f"repeated (firm, year) pairs: {offenders}")
        value_cols = [c for c in self.roles if c != self.firm_col]
        if value_cols and self.data[value_cols].isna().any().any():
            bad = [c for c in value_cols if self.data[c].isna().any()]
            raise SchemaError(f"missing values in columns {bad} after ingestion")

    def __len__(self):
        return len(self.data)

    def columns_by_role(self, role: str) -> list[str]:
        return [c for c, r in self.roles.items() if r == role]

    def single_column(self, role: str) -> str:
        cols = self.columns_by_role(role)
        if len(cols) != 1:
            raise SchemaError(f"expected exactly one {role} column, found {cols}")
        return cols[0]

    def is_fe_eligible(self, col: str) -> bool:
        """Fixed-effect keys plus the identifier columns can be dummied."""
        return self.roles.get(col) == "fixed_effect_key" or col in (self.firm_col, self.year_col)

    def with_data(self, data: pd.DataFrame) -> "PanelTable":
        return replace(self, data=data.reset_index(drop=True))

    def with_column(self, name: str, values, role: str) -> "PanelTable":
        data = self.data.copy()
        data[name] = np.asarray(values)
        roles = dict(self.roles)
        roles[name] = role
        return replace(self, data=data, roles=roles)


@dataclass(frozen=True)
class IngestReport:
    rows_read: int
    rows_dropped: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_dropped": self.rows_dropped,
            "warnings": list(self.warnings),
        }


def ingest_csv(path, schema: dict[str, str], firm_col: str = "firm_id",
               year_col: str = "year") -> tuple[PanelTable, IngestReport]:
    """Read a firm-year CSV into a validated PanelTable.

    ``schema`` maps value-column names to roles. Rows missing a required
    cell are dropped and counted; a cell that is present but non-numeric is
    a hard ParseError. Duplicate (firm, year) keys abort ingestion.
    """
    for col, role in schema.items():
        if role not in ROLES:
            raise SchemaError(f"unknown role {role!r} for column {col!r}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [firm_col, year_col] + [c for c in schema if c not in (firm_col, year_col)]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"CSV {path} is missing column(s) {missing}")
        rows, dropped = [], 0
        # columns carrying labels rather than numbers stay as strings
        label_cols = {c for c, r in schema.items() if r == "fixed_effect_key" or r == "auxiliary"}
        for lineno, raw in enumerate(reader, start=2):
            rec = {}
            skip = False
            for col in required:
                cell = (raw.get(col) or "").strip()
                if cell == "":
                    dropped += 1
                    skip = True
                    break
                if col == firm_col or col in label_cols:
                    rec[col] = cell
                elif col == year_col:
                    try:
                        rec[col] = int(float(cell))
                    except ValueError:
                        raise ParseError(f"non-numeric year {cell!r} at line {lineno}, column {col!r}")
                else:
                    try:
                        rec[col] = float(cell)
                    except ValueError:
                        raise ParseError(f"non-numeric cell {cell!r} at line {lineno}, column {col!r}")
            if not skip:
                rows.append(rec)
    data = pd.DataFrame(rows, columns=required)
    roles = {c: r for c, r in schema.items() if c not in (firm_col,)}
    table = PanelTable(data=data, roles=roles, firm_col=firm_col, year_col=year_col)
    report = IngestReport(rows_read=len(rows) + dropped, rows_dropped=dropped)
    return table, report


def _nearest_rank_bounds(values: np.ndarray, lower_pct: float, upper_pct: float):
    """Clamp bounds under the nearest-rank rule, applied symmetrically.

    Lower bound is the ceil(lower_pct*n)-th smallest value; the upper bound
    is the ceil((1-upper_pct)*n)-th largest. A rank of zero means no
    clamping on that side.
    """
    srt = np.sort(values)
    n = len(srt)
    # tolerance absorbs float error in products like (1 - 0.99) * n
    k_lo = math.ceil(lower_pct * n - 1e-9)
    k_hi = math.ceil((1.0 - upper_pct) * n - 1e-9)
    lo = srt[k_lo - 1] if k_lo >= 1 else -np.inf
    hi = srt[n - k_hi] if k_hi >= 1 else np.inf
    return lo, hi


def winsorize(table: PanelTable, lower_pct: float, upper_pct: float,
              columns: list[str] | None = None) -> PanelTable:
    """Clamp the named columns to their pooled empirical quantile bounds."""
    if not (0.0 <= lower_pct < upper_pct <= 1.0):
        raise DomainError(f"need 0 <= lower < upper <= 1, got ({lower_pct}, {upper_pct})")
    if columns is None:
        columns = [c for c, r in table.roles.items()
                   if r in ("outcome", "treatment", "control", "mediator")]
    data = table.data.copy()
    for col in columns:
        if col not in data.columns:
            raise SchemaError(f"winsorize: unknown column {col!r}")
        vals = data[col].to_numpy(dtype=float)
        lo, hi = _nearest_rank_bounds(vals, lower_pct, upper_pct)
        data[col] = np.clip(vals, lo, hi)
    return table.with_data(data)


def derive_treatment(shareholdings: np.ndarray, variant: str = TOP2TO10_OVER_TOP1) -> np.ndarray:
    """Ratio of challenger shareholders' combined stake to the largest stake.

    ``shareholdings`` is (n, 10): per firm-year, the top-10 stakes in
    descending order. The raw ratio is returned unclipped; ratios >= 1 only
    trigger a data-quality warning.
    """
    if variant not in TREATMENT_VARIANTS:
        raise DomainError(f"unknown treatment variant {variant!r}")
    stakes = np.atleast_2d(np.asarray(shareholdings, dtype=float))
    if stakes.shape[1] < 10:
        stakes = np.pad(stakes, ((0, 0), (0, 10 - stakes.shape[1])))
    if np.any(np.diff(stakes, axis=1) > 1e-12):
        raise DomainError("stakes must be ordered descending")
    top1 = stakes[:, 0]
    if np.any(top1 <= 0):
        raise DomainError("largest stake must be positive")
    if variant == TOP2TO10_OVER_TOP1:
        num = stakes[:, 1:10].sum(axis=1)
    elif variant == TOP2TO5_OVER_TOP1:
        num = stakes[:, 1:5].sum(axis=1)
    else:
        num = stakes[:, 1]
    ratio = num / top1
    n_out = int(np.sum(ratio >= 1.0))
    if n_out:
        warnings.warn(f"{n_out} treatment ratio(s) >= 1; check shareholding data", stacklevel=2)
    return ratio


@dataclass(frozen=True)
class DesignColumn:
    name: str
    origin: str      # source column
    kind: str        # "linear" | "quadratic" | "dummy"
    level: object = None


def _is_binary(values: np.ndarray) -> bool:
    u = np.unique(values)
    return len(u) <= 2 and np.all(np.isin(u, (0.0, 1.0)))


def expand_design(table: PanelTable, add_quadratics: bool = False,
                  fe_keys: list[str] | None = None,
                  controls: list[str] | None = None) -> tuple[np.ndarray, list[DesignColumn]]:
    """Build the nuisance-stage feature matrix.

    Continuous controls optionally gain squared terms (binary 0/1 controls
    never do); each fixed-effect key is one-hot encoded with the
    lexicographically smallest level dropped as the reference.
    """
    fe_keys = fe_keys or []
    if controls is None:
        controls = table.columns_by_role("control")
    for key in fe_keys:
        if key not in table.data.columns:
            raise SchemaError(f"expand_design: unknown fixed-effect key {key!r}")
        if not table.is_fe_eligible(key):
            raise SchemaError(f"column {key!r} does not have role fixed_effect_key")
    cols: list[np.ndarray] = []
    desc: list[DesignColumn] = []
    for c in controls:
        v = table.data[c].to_numpy(dtype=float)
        cols.append(v)
        desc.append(DesignColumn(name=c, origin=c, kind="linear"))
        if add_quadratics and not _is_binary(v):
            cols.append(v * v)
            desc.append(DesignColumn(name=f"{c}^2", origin=c, kind="quadratic"))
    for key in fe_keys:
        levels = sorted(table.data[key].unique())
        for lev in levels[1:]:  # lexicographically smallest level is the reference
            v = (table.data[key] == lev).to_numpy(dtype=float)
            cols.append(v)
            desc.append(DesignColumn(name=f"{key}={lev}", origin=key, kind="dummy", level=lev))
    if not cols:
        return np.empty((len(table), 0)), []
    return np.column_stack(cols), desc
