"""Cross-fitted partially-linear effect estimation and analysis runners.

The estimator residualizes the outcome and the treatment on machine-learned
conditional means via out-of-fold prediction, regresses residual on
residual, and reports a heteroskedasticity-robust standard error. On top of
it sit the robustness grid, subgroup splits, lag/cumulative variants, and
the two-way fixed-effects mediation regression.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DegenerateDataError, DomainError, SchemaError
from .learners import LearnerSpec, derive_seed, fit, kfold_oof_predict
from .panel import PanelTable, expand_design, winsorize


def normal_p_value(z: float) -> float:
    """Two-sided p-value under the standard normal."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def parse_split_ratio(ratio: str) -> int:
    """Map an a:b estimation/training split to the cross-fitting fold count.

    The estimation fold holds a/(a+b) of the sample, so K = (a+b)/a; a must
    divide a+b (1:4 -> 5 folds, 1:2 -> 3, 1:7 -> 8).
    """
    try:
        a_s, b_s = ratio.split(":")
        a, b = int(a_s), int(b_s)
    except ValueError:
        raise DomainError(f"split ratio must look like 'a:b', got {ratio!r}") from None
    if a <= 0 or b <= 0 or (a + b) % a != 0:
        raise DomainError(f"split ratio {ratio!r} does not yield an integer fold count")
    k = (a + b) // a
    if k < 2:
        raise DomainError(f"split ratio {ratio!r} yields fewer than 2 folds")
    return k


@dataclass(frozen=True)
class DmlConfig:
    outcome: str | None = None           # default: the column with role outcome
    treatment: str | None = None
    controls: tuple[str, ...] | None = None
    add_quadratics: bool = True
    fe_keys: tuple[str, ...] = ()
    split_ratio: str = "1:4"
    outcome_learner: LearnerSpec = field(default_factory=lambda: LearnerSpec("gbdt"))
    treatment_learner: LearnerSpec = field(default_factory=lambda: LearnerSpec("gbdt"))
    seed: int = 0
    repetitions: int = 5
    keep_residuals: bool = False

    @property
    def folds(self) -> int:
        return parse_split_ratio(self.split_ratio)

    @classmethod
    def from_dict(cls, raw: dict) -> "DmlConfig":
        kwargs = dict(raw)
        for key in ("outcome_learner", "treatment_learner"):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = LearnerSpec(**kwargs[key])
        if "learner" in kwargs:          # shorthand: one spec for both stages
            spec = kwargs.pop("learner")
            if isinstance(spec, dict):
                spec = LearnerSpec(**spec)
            kwargs.setdefault("outcome_learner", spec)
            kwargs.setdefault("treatment_learner", spec)
        for key in ("controls", "fe_keys"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class DmlEstimate:
    theta: float
    robust_se: float
    n: int
    n_folds: int
    fold_diagnostics: list[dict] = field(default_factory=list)
    residuals: tuple[np.ndarray, np.ndarray] | None = None
    label: str = ""

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.theta - 1.96 * self.robust_se, self.theta + 1.96 * self.robust_se)

    @property
    def p_value(self) -> float:
        if self.robust_se == 0:
            return 0.0 if self.theta != 0 else 1.0
        return normal_p_value(self.theta / self.robust_se)

    def to_row(self, label: str | None = None) -> dict:
        from .report import stars
        lo, hi = self.ci95
        return {"label": label if label is not None else self.label,
                "theta": self.theta, "se": self.robust_se,
                "stars": stars(self.p_value), "ci_low": lo, "ci_high": hi,
                "n": self.n, "folds": self.n_folds}


def _r2(actual: np.ndarray, predicted: np.ndarray) -> float:
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0:
        return float("nan")
    return 1.0 - float(np.sum((actual - predicted) ** 2)) / sst


def _final_stage(y_res: np.ndarray, d_res: np.ndarray, n: int, var_d: float):
    denom = float(np.sum(d_res * d_res))
    if var_d == 0.0 or denom <= 1e-12 * n * var_d:
        raise DegenerateDataError(
            "treatment residual variance is ~0; treatment is fully explained by controls")
    theta = float(np.sum(d_res * y_res)) / denom
    psi = d_res * (y_res - theta * d_res)
    se = math.sqrt(n / (n - 1) * float(np.sum(psi * psi))) / denom
    return theta, se


def estimate(table: PanelTable, config: DmlConfig) -> DmlEstimate:
    """Cross-fitted effect of the treatment column on the outcome column.

    Controls (plus optional quadratics and fixed-effect dummies) feed both
    nuisance stages; each stage's conditional mean is predicted out-of-fold
    so no row is scored by a model that saw it. The residual-on-residual
    slope is reported with an HC1 sandwich standard error. With
    repetitions > 1 the whole procedure re-runs on fresh fold splits and
    the median point/SE pair is reported.
    """
    outcome = config.outcome or table.single_column("outcome")
    treatment = config.treatment or table.single_column("treatment")
    for col in (outcome, treatment):
        if col not in table.data.columns:
            raise SchemaError(f"column {col!r} not in panel")
    controls = list(config.controls) if config.controls is not None else None
    X, _ = expand_design(table, add_quadratics=config.add_quadratics,
                         fe_keys=list(config.fe_keys), controls=controls)
    y = table.data[outcome].to_numpy(dtype=float)
    d = table.data[treatment].to_numpy(dtype=float)
    n, k = len(y), config.folds
    if n < 10 * k:
        raise DomainError(f"need at least {10 * k} rows for {k}-fold cross-fitting, have {n}")
    var_d = float(np.var(d))

    thetas, ses, diagnostics, kept_resid = [], [], [], None
    for rep in range(max(1, config.repetitions)):
        split_seed = derive_seed(config.seed, 5, rep)
        l_hat, assignment = kfold_oof_predict(config.outcome_learner, X, y, k, split_seed)
        m_hat, _ = kfold_oof_predict(config.treatment_learner, X, d, k, split_seed)
        y_res, d_res = y - l_hat, d - m_hat
        theta, se = _final_stage(y_res, d_res, n, var_d)
        thetas.append(theta)
        ses.append(se)
        for fold in range(k):
            rows = assignment == fold
            diagnostics.append({"rep": rep, "fold": fold, "n": int(rows.sum()),
                                "r2_outcome": _r2(y[rows], l_hat[rows]),
                                "r2_treatment": _r2(d[rows], m_hat[rows])})
        if rep == 0 and config.keep_residuals:
            kept_resid = (y_res, d_res)
    return DmlEstimate(theta=float(np.median(thetas)), robust_se=float(np.median(ses)),
                       n=n, n_folds=k, fold_diagnostics=diagnostics, residuals=kept_resid)


@dataclass(frozen=True)
class GridCell:
    label: str
    dimension: str
    estimate: DmlEstimate | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.estimate is None


def robustness_grid(table: PanelTable, base: DmlConfig, grid: dict) -> list[GridCell]:
    """One estimate per one-at-a-time deviation from the base config.

    grid keys: "learners" [(label, LearnerSpec)] swapping both nuisance
    stages, "split_ratios" ["1:2", ...], "winsorize" [(lo, hi)], and
    "treatment_columns" [name, ...]. Cells share the base seed so
    comparisons are paired; per-cell failures are flagged, not raised.
    """
    known = {"learners", "split_ratios", "winsorize", "treatment_columns"}
    unknown = set(grid) - known
    if unknown:
        raise DomainError(f"unknown grid dimension(s) {sorted(unknown)}")
    cells: list[tuple[str, str, PanelTable, DmlConfig]] = []
    for entry in grid.get("learners", []):
        label, spec = entry
        cfg = replace(base, outcome_learner=spec, treatment_learner=spec)
        cells.append((label, "learner", table, cfg))
    for ratio in grid.get("split_ratios", []):
        cells.append((f"split {ratio}", "split_ratio", table, replace(base, split_ratio=ratio)))
    for bounds in grid.get("winsorize", []):
        lo, hi = bounds if isinstance(bounds, (tuple, list)) else (0.01, 0.99)
        trimmed = winsorize(table, lo, hi)
        cells.append((f"winsorize {lo:g}/{hi:g}", "winsorize", trimmed, base))
    for col in grid.get("treatment_columns", []):
        cells.append((f"treatment {col}", "treatment", table, replace(base, treatment=col)))
    if not cells:
        raise DomainError("robustness grid is empty")
    out = []
    for label, dim, tab, cfg in cells:
        try:
            est = estimate(tab, cfg)
            out.append(GridCell(label=label, dimension=dim, estimate=est))
        except Exception as exc:  # cell failures must not abort the grid
            out.append(GridCell(label=label, dimension=dim, estimate=None, error=str(exc)))
    return out


def subgroup_estimates(table: PanelTable, config: DmlConfig, split_column: str,
                       groups: dict[str, list] | None = None) -> dict[str, DmlEstimate]:
    """Independent estimates per subgroup; undersized groups are skipped."""
    if split_column not in table.data.columns:
        raise SchemaError(f"split column {split_column!r} not in panel")
    values = table.data[split_column]
    if groups is None:
        groups = {str(v): [v] for v in sorted(values.unique())}
    min_rows = 10 * config.folds
    out: dict[str, DmlEstimate] = {}
    for label, members in groups.items():
        rows = values.isin(members)
        n = int(rows.sum())
        if n < min_rows:
            warnings.warn(f"subgroup {label!r} has {n} rows < {min_rows}; skipped",
                          stacklevel=2)
            continue
        sub = table.with_data(table.data.loc[rows])
        out[label] = estimate(sub, config)
    return out


def _lagged_treatment(df: pd.DataFrame, firm_col: str, year_col: str,
                      treatment: str, lag: int) -> pd.Series:
    """Treatment value of the same firm `lag` years earlier (NaN if absent)."""
    key = pd.MultiIndex.from_arrays([df[firm_col], df[year_col] - lag])
    lookup = pd.Series(df[treatment].to_numpy(),
                       index=pd.MultiIndex.from_arrays([df[firm_col], df[year_col]]))
    return pd.Series(lookup.reindex(key).to_numpy(), index=df.index)


def temporal_effects(table: PanelTable, config: DmlConfig, max_lag: int,
                     include_generated: bool = True) -> dict[str, DmlEstimate]:
    """Current, per-lag, and cumulative-window effect estimates.

    Lag k replaces the treatment with the firm's value k years earlier
    (rows without that history drop out); the cumulative variant uses the
    within-firm mean over the last max_lag+1 years, requiring the full
    window. Generated rows participate through their synthetic twin-firm
    year sequences unless include_generated is False.
    """
    if max_lag < 0:
        raise DomainError("max_lag must be nonnegative")
    df = table.data
    if not include_generated and "provenance" in df.columns:
        df = df[df["provenance"] == "real"]
    span = df[table.year_col].nunique()
    if max_lag >= span:
        raise DomainError(f"max_lag {max_lag} >= panel span of {span} year(s)")
    base_table = table.with_data(df)
    treatment = config.treatment or table.single_column("treatment")

    out = {"current": estimate(base_table, config)}
    if max_lag == 0:
        return out
    for lag in range(1, max_lag + 1):
        lagged = _lagged_treatment(df, table.firm_col, table.year_col, treatment, lag)
        keep = lagged.notna().to_numpy()
        sub = df.loc[keep].copy()
        sub[treatment] = lagged[keep].to_numpy()
        out[f"lag_{lag}"] = estimate(table.with_data(sub), config)
    window = [_lagged_treatment(df, table.firm_col, table.year_col, treatment, lag)
              for lag in range(0, max_lag + 1)]
    stacked = np.column_stack([w.to_numpy() for w in window])
    keep = ~np.isnan(stacked).any(axis=1)
    sub = df.loc[keep].copy()
    sub[treatment] = stacked[keep].mean(axis=1)
    out["cumulative"] = estimate(table.with_data(sub), config)
    return out


# ---------------------------------------------------------------------------
# mediation: two-way fixed-effects within regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MediationResult:
    coefficient: float
    robust_se: float
    r2: float
    constant: float
    n: int
    mediator: str = ""

    @property
    def p_value(self) -> float:
        if self.robust_se == 0:
            return 0.0 if self.coefficient != 0 else 1.0
        return normal_p_value(self.coefficient / self.robust_se)


def within_transform(values: np.ndarray, firm_index: np.ndarray, year_index: np.ndarray,
                     tol: float = 1e-12, max_sweeps: int = 200) -> np.ndarray:
    """Demean by firm and year alternately until both means vanish.

    Alternating projections handle unbalanced panels, where one pass of
    firm-then-year demeaning leaves residual means. The grand mean is added
    back afterwards by the caller.
    """
    v = values.astype(float).copy()
    n_firms = firm_index.max() + 1
    n_years = year_index.max() + 1
    firm_cnt = np.bincount(firm_index, minlength=n_firms)
    year_cnt = np.bincount(year_index, minlength=n_years)
    for _ in range(max_sweeps):
        fm = np.bincount(firm_index, weights=v, minlength=n_firms) / firm_cnt
        v -= fm[firm_index]
        ym = np.bincount(year_index, weights=v, minlength=n_years) / year_cnt
        v -= ym[year_index]
        if max(np.max(np.abs(fm)), np.max(np.abs(ym))) < tol:
            return v
    warnings.warn("within transform stopped at its sweep cap before full convergence",
                  stacklevel=2)
    return v


def mediation_regression(table: PanelTable, treatment: str, mediator: str,
                         controls: list[str] | None = None,
                         fe: tuple[str, str] = ("firm", "year")) -> MediationResult:
    """Two-way FE regression of the mediator on the treatment plus controls.

    Firm and year effects are absorbed by the within transformation (grand
    means added back); inference is an HC1 sandwich clustered at the firm
    level, matching how the effect rows are reported elsewhere.
    """
    df = table.data
    for col in (treatment, mediator):
        if col not in df.columns:
            raise SchemaError(f"column {col!r} not in panel")
    if controls is None:
        controls = table.columns_by_role("control")
    if df[table.firm_col].nunique() < 2 or df[table.year_col].nunique() < 2:
        raise DomainError("mediation needs at least 2 firms and 2 years")
    firm_index = pd.factorize(df[table.firm_col])[0]
    year_index = pd.factorize(df[table.year_col])[0]

    names = [treatment] + list(controls)
    raw = df[names].to_numpy(dtype=float)
    y_raw = df[mediator].to_numpy(dtype=float)
    Xw = np.column_stack([within_transform(raw[:, j], firm_index, year_index)
                          for j in range(raw.shape[1])])
    Xw += raw.mean(axis=0)
    yw = within_transform(y_raw, firm_index, year_index) + y_raw.mean()

    if np.var(Xw[:, 0]) < 1e-14 * max(np.var(raw[:, 0]), 1e-300):
        raise DegenerateDataError("treatment has no within-firm-year variation")
    n = len(yw)
    X1 = np.column_stack([np.ones(n), Xw])
    coef, *_ = np.linalg.lstsq(X1, yw, rcond=None)
    resid = yw - X1 @ coef
    bread = np.linalg.pinv(X1.T @ X1)
    n_params = X1.shape[1]
    meat = np.zeros((n_params, n_params))
    for g in np.unique(firm_index):
        rows = firm_index == g
        s = X1[rows].T @ resid[rows]
        meat += np.outer(s, s)
    n_groups = len(np.unique(firm_index))
    factor = (n_groups / (n_groups - 1)) * ((n - 1) / (n - n_params))
    cov = factor * bread @ meat @ bread
    sst = float(np.sum((yw - yw.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / sst if sst > 0 else float("nan")
    return MediationResult(coefficient=float(coef[1]),
                           robust_se=float(np.sqrt(cov[1, 1])),
                           r2=r2, constant=float(coef[0]), n=n, mediator=mediator)
