"""Synthetic firm-year panels with planted causal structure.

Every acceptance check runs against data from here: the generator plants a
known treatment effect (optionally per subgroup), nonlinear confounding,
firm/year effects, and mediator chains, and returns the ground truth needed
to compute infeasible residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DomainError
from .panel import PanelTable

INDUSTRY_CODES = ("B06", "B07", "B08", "B09", "B11", "C25", "C30", "C31", "C32", "C33")
UPSTREAM = {"B06", "B07", "B08", "B09", "B11"}
DOWNSTREAM = {"C33"}
REGIONS = ("east", "central", "west")

# sampling targets for the control columns (mean, sd, binary flag)
CONTROL_TARGETS = {
    "size": (23.6, 1.2, False),
    "leverage": (0.52, 0.15, False),
    "roa": (0.0375, 0.06, False),
    "indep_ratio": (0.372, 0.04, False),
    "growth": (0.16, 0.29, False),
    "top1_share": (0.42, 0.16, False),
    "state_owned": (0.666, None, True),
    "dual_role": (0.12, None, True),
}

CONTINUOUS_CONTROLS = [c for c, t in CONTROL_TARGETS.items() if not t[2]]
BINARY_CONTROLS = [c for c, t in CONTROL_TARGETS.items() if t[2]]

TREATMENT_LO, TREATMENT_HI = 0.0013, 1.0


@dataclass(frozen=True)
class DgpSpec:
    n_firms: int = 201
    n_years: int = 13
    start_year: int = 2010
    theta: float | dict[str, float] = -0.3
    theta_by: str | None = None          # grouping column when theta is a dict
    nuisance: str = "nonlinear"          # "linear" | "nonlinear"
    outcome_noise_sd: float = 0.15
    treatment_noise_sd: float = 0.25
    firm_effect_sd: float = 0.04
    year_effect_sd: float = 0.04
    confounding: float = 1.0
    dropout: float = 1.0 / 3.0           # fraction of rows masked out
    target_rows: int | None = None       # exact surviving row count, overrides dropout
    mediator_coeffs: dict[str, float] = field(default_factory=dict)
    mediator_t_target: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_firms * self.n_years < 50:
            raise DomainError("panel must have at least 50 potential rows")
        if self.outcome_noise_sd <= 0 or self.treatment_noise_sd <= 0:
            raise DomainError("noise SDs must be positive")
        if self.nuisance not in ("linear", "nonlinear"):
            raise DomainError(f"unknown nuisance shape {self.nuisance!r}")
        if isinstance(self.theta, dict) and self.theta_by is None:
            raise DomainError("per-group theta requires theta_by")
        if not (0.0 <= self.dropout < 1.0):
            raise DomainError("dropout must lie in [0, 1)")


def _nuisance_terms(z: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Treatment-side m(X) and outcome-side g(X) deviations on z-scored controls."""
    x1, x2, x3, x4, x5, x6 = (z[:, i] for i in range(6))
    if kind == "linear":
        m = 0.12 * x1 - 0.08 * x2 + 0.06 * x3
        g = 0.40 * x1 + 0.30 * x2 - 0.20 * x4
    else:
        m = 0.08 * np.sin(x1) + 0.035 * (x2 * x2 - 1.0) - 0.03 * x3 + 0.02 * x4 * x5
        g = 0.35 * np.cos(1.5 * x1) + 0.20 * (x2 * x2 - 1.0) + 0.15 * x3 + 0.10 * x4 * x6
    return m, g


def _draw_controls(rng: np.random.Generator, n: int) -> pd.DataFrame:
    cols = {}
    for name, (mean, sd, binary) in CONTROL_TARGETS.items():
        if binary:
            cols[name] = (rng.random(n) < mean).astype(float)
        else:
            cols[name] = rng.normal(mean, sd, size=n)
    cols["top1_share"] = np.clip(cols["top1_share"], 0.03, 0.9)
    return pd.DataFrame(cols)


def generate_panel(spec: DgpSpec) -> tuple[PanelTable, dict]:
    """Draw a panel with planted effect; bit-deterministic given spec.seed."""
    rng = np.random.default_rng((spec.seed, 20))
    n_pot = spec.n_firms * spec.n_years
    firm_ids = np.repeat([f"F{i:04d}" for i in range(spec.n_firms)], spec.n_years)
    years = np.tile(np.arange(spec.start_year, spec.start_year + spec.n_years), spec.n_firms)

    industry = np.repeat(rng.choice(INDUSTRY_CODES, size=spec.n_firms), spec.n_years)
    region = np.repeat(rng.choice(REGIONS, size=spec.n_firms, p=(0.48, 0.27, 0.25)),
                       spec.n_years)
    segment = np.array(["upstream" if c in UPSTREAM else
                        "downstream" if c in DOWNSTREAM else "midstream"
                        for c in industry])

    controls = _draw_controls(rng, n_pot)
    z = np.column_stack([
        (controls[c] - CONTROL_TARGETS[c][0]) / CONTROL_TARGETS[c][1]
        for c in CONTINUOUS_CONTROLS
    ])
    m_x, g_x = _nuisance_terms(z, spec.nuisance)
    m_x = spec.confounding * m_x
    g_x = spec.confounding * g_x

    firm_d = np.repeat(rng.normal(0.0, spec.firm_effect_sd, size=spec.n_firms), spec.n_years)
    firm_y = np.repeat(rng.normal(0.0, spec.firm_effect_sd, size=spec.n_firms), spec.n_years)
    year_y = np.tile(rng.normal(0.0, spec.year_effect_sd, size=spec.n_years), spec.n_firms)

    v = rng.normal(0.0, spec.treatment_noise_sd, size=n_pot)
    d_systematic = 0.50 + m_x + firm_d
    d = np.clip(d_systematic + v, TREATMENT_LO, TREATMENT_HI)

    if isinstance(spec.theta, dict):
        groups = {"region": region, "industry": industry, "segment": segment}[spec.theta_by]
        theta_row = np.array([spec.theta[g] for g in groups])
    else:
        theta_row = np.full(n_pot, float(spec.theta))
    u = rng.normal(0.0, spec.outcome_noise_sd, size=n_pot)
    y_systematic = g_x + firm_y + year_y
    y = theta_row * d + y_systematic + u

    frame = pd.DataFrame({"firm_id": firm_ids, "year": years, "gw": y, "balance": d})
    for c in controls.columns:
        frame[c] = controls[c].to_numpy()
    frame["industry"] = industry
    frame["region"] = region
    frame["segment"] = segment

    if spec.target_rows is not None:
        if not (0 < spec.target_rows <= n_pot):
            raise DomainError(f"target_rows must lie in (0, {n_pot}]")
        keep_n = spec.target_rows
    else:
        keep_n = n_pot - int(np.floor(spec.dropout * n_pot))
    keep = np.sort(rng.permutation(n_pot)[:keep_n])
    frame = frame.iloc[keep].reset_index(drop=True)

    roles = {"gw": "outcome", "balance": "treatment",
             "industry": "fixed_effect_key",
             "region": "auxiliary", "segment": "auxiliary"}
    for c in controls.columns:
        roles[c] = "control"
    table = PanelTable(data=frame, roles=roles)
    truth = {
        "theta": spec.theta,
        "theta_by": spec.theta_by,
        "m_x": m_x[keep],
        "g_x": g_x[keep],
        "d_systematic": d_systematic[keep],
        "y_systematic": y_systematic[keep],
        "theta_row": theta_row[keep],
    }
    return table, truth


MEDIATOR_COLUMNS = ("pressure", "stability", "media")


def generate_mediated(spec: DgpSpec) -> tuple[PanelTable, dict]:
    """Panel plus mediator columns following gamma * D + fixed effects + noise.

    Mediator noise is scaled from the realized within-variation of the
    treatment so the planted coefficient lands near the requested
    t-statistic at this sample size.
    """
    coeffs = dict(spec.mediator_coeffs)
    unknown = set(coeffs) - set(MEDIATOR_COLUMNS)
    if unknown:
        raise DomainError(f"unknown mediator name(s) {sorted(unknown)}")
    table, truth = generate_panel(spec)
    rng = np.random.default_rng((spec.seed, 21))
    df = table.data
    n = len(df)

    d = df["balance"].to_numpy()
    # within-(firm, year) variation of D drives the planted t-statistic
    d_within = d - df.groupby("firm_id")["balance"].transform("mean").to_numpy()
    d_within -= pd.Series(d_within).groupby(df["year"].to_numpy()).transform("mean").to_numpy()
    sd_w = max(float(np.std(d_within)), 1e-6)

    firms = df["firm_id"].to_numpy()
    years = df["year"].to_numpy()
    firm_index = pd.factorize(firms)[0]
    year_index = pd.factorize(years)[0]
    roles = dict(table.roles)
    data = df.copy()
    noise_sds = {}
    for name in MEDIATOR_COLUMNS:
        gamma = float(coeffs.get(name, 0.0))
        if gamma != 0.0:
            noise_sd = abs(gamma) * sd_w * np.sqrt(n) / spec.mediator_t_target
        else:
            noise_sd = 0.01
        fe_f = rng.normal(0.0, 2.0 * noise_sd, size=firm_index.max() + 1)
        fe_t = rng.normal(0.0, 2.0 * noise_sd, size=year_index.max() + 1)
        data[name] = (gamma * d + fe_f[firm_index] + fe_t[year_index]
                      + rng.normal(0.0, noise_sd, size=n))
        roles[name] = "mediator"
        noise_sds[name] = float(noise_sd)
    truth["mediator_coeffs"] = coeffs
    truth["mediator_noise_sds"] = noise_sds
    return PanelTable(data=data, roles=roles), truth
