"""Derived firm-year and city indices.

Covers the embellishment score built from disclosure text volume vs. a
substantive checklist, the three mediator measures (performance pressure,
executive-team stability, media-tone coefficient), and the entropy-weighted
TOPSIS pollution index for cities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, DomainError

# checklist geometry: 5 credibility binaries, 4 standalone binaries,
# negative-events count 0-3, 2 more binaries, 6 emission items 0-2,
# 5 treatment items 0-2 -> maximum total 36
N_CREDIBILITY = 5
N_EMISSION_ITEMS = 6
N_TREATMENT_ITEMS = 5
MAX_SCORE = 36


@dataclass(frozen=True)
class DisclosureRubric:
    """Item scores of the substantive-disclosure checklist."""

    credibility: tuple[int, ...] = (0,) * N_CREDIBILITY  # GRI, ISO14001, Big-4 audit, 3rd-party check, awards
    compliance: int = 0
    safety: int = 0
    negative_events: int = 0        # disclosed negative event types, 0..3
    welfare: int = 0
    emergency: int = 0
    three_simultaneities: int = 0
    cleaner_production: int = 0
    emissions: tuple[int, ...] = (0,) * N_EMISSION_ITEMS    # each 0 none / 1 qualitative / 2 quantitative
    treatment: tuple[int, ...] = (0,) * N_TREATMENT_ITEMS   # same 0/1/2 coding

    @classmethod
    def maximal(cls) -> "DisclosureRubric":
        return cls(credibility=(1,) * N_CREDIBILITY, compliance=1, safety=1,
                   negative_events=3, welfare=1, emergency=1, three_simultaneities=1,
                   cleaner_production=1, emissions=(2,) * N_EMISSION_ITEMS,
                   treatment=(2,) * N_TREATMENT_ITEMS)


def substantive_score(rubric: DisclosureRubric) -> int:
    """Sum the checklist items; result lies in [0, 36]."""
    def check(name, value, hi):
        if not (isinstance(value, (int, np.integer)) and 0 <= value <= hi):
            raise DomainError(f"rubric item {name!r} out of range [0, {hi}]: {value!r}")

    if len(rubric.credibility) != N_CREDIBILITY:
        raise DomainError(f"rubric needs {N_CREDIBILITY} credibility items")
    if len(rubric.emissions) != N_EMISSION_ITEMS:
        raise DomainError(f"rubric needs {N_EMISSION_ITEMS} emission items")
    if len(rubric.treatment) != N_TREATMENT_ITEMS:
        raise DomainError(f"rubric needs {N_TREATMENT_ITEMS} treatment items")
    for i, v in enumerate(rubric.credibility):
        check(f"credibility[{i}]", v, 1)
    for name in ("compliance", "safety", "welfare", "emergency",
                 "three_simultaneities", "cleaner_production"):
        check(name, getattr(rubric, name), 1)
    check("negative_events", rubric.negative_events, 3)
    for i, v in enumerate(rubric.emissions):
        check(f"emissions[{i}]", v, 2)
    for i, v in enumerate(rubric.treatment):
        check(f"treatment[{i}]", v, 2)
    return int(sum(rubric.credibility) + rubric.compliance + rubric.safety
               + rubric.negative_events + rubric.welfare + rubric.emergency
               + rubric.three_simultaneities + rubric.cleaner_production
               + sum(rubric.emissions) + sum(rubric.treatment))


@dataclass(frozen=True)
class DisclosureRecord:
    firm_id: str
    year: int
    keyword_hits: int
    total_tokens: int
    rubric: DisclosureRubric = field(default_factory=DisclosureRubric)

    def __post_init__(self):
        if self.total_tokens <= 0:
            raise DomainError(f"total_tokens must be positive, got {self.total_tokens}")
        if not (0 <= self.keyword_hits <= self.total_tokens):
            raise DomainError("keyword_hits must lie in [0, total_tokens]")

    @property
    def text_volume(self) -> float:
        return self.keyword_hits / self.total_tokens


@dataclass(frozen=True)
class GreenwashScore:
    firm_id: str
    year: int
    mws: float   # standardized textual volume
    mrs: float   # standardized substantive volume
    gw: float    # mws - mrs


def greenwash_index(records: list[DisclosureRecord]) -> list[GreenwashScore]:
    """Embellishment score: per-year z-scores of text volume minus substance.

    Both components are standardized within each year using the sample
    standard deviation (n-1); their difference is the score. Years with a
    single record or zero variance in either component are rejected.
    """
    by_year: dict[int, list[DisclosureRecord]] = {}
    for rec in records:
        by_year.setdefault(rec.year, []).append(rec)
    out: list[GreenwashScore] = []
    for year in sorted(by_year):
        group = by_year[year]
        if len(group) < 2:
            raise DegenerateDataError(f"year {year} has {len(group)} record(s); need >= 2")
        mw = np.array([r.text_volume for r in group], dtype=float)
        mr = np.array([float(substantive_score(r.rubric)) for r in group], dtype=float)
        sd_w, sd_r = mw.std(ddof=1), mr.std(ddof=1)
        if sd_w == 0.0 or sd_r == 0.0:
            raise DegenerateDataError(f"year {year} has zero variance in a disclosure component")
        mws = (mw - mw.mean()) / sd_w
        mrs = (mr - mr.mean()) / sd_r
        for rec, a, b in zip(group, mws, mrs):
            out.append(GreenwashScore(rec.firm_id, rec.year, float(a), float(b), float(a - b)))
    return out


def performance_pressure(forecast_mean: float, actual: float, assets: float) -> float:
    """Expectation gap scaled by assets: (forecast - actual) / assets.

    ``forecast_mean`` is the mean of all analyst forecasts for the
    firm-year. The one-period lag is applied by the caller when attaching
    the value to a panel.
    """
    if assets <= 0:
        raise DomainError(f"assets must be positive, got {assets}")
    return (forecast_mean - actual) / assets


def team_stability(m_t: int, m_t1: int, departures: int, arrivals: int) -> float:
    """Retention-weighted executive stability in (0, 1].

    Weighted mean of the retention rate of the year-t team and the
    incumbency rate of the year-t+1 team, with weights proportional to the
    two headcounts. Equals 1 exactly when nobody left and nobody arrived.
    """
    if m_t < 1 or m_t1 < 1:
        raise DomainError("headcounts must be >= 1")
    if not (0 <= departures <= m_t):
        raise DomainError(f"departures must lie in [0, {m_t}]")
    if not (0 <= arrivals <= m_t1):
        raise DomainError(f"arrivals must lie in [0, {m_t1}]")
    if departures == m_t and arrivals == m_t1:
        # no member persists across the two years; the retention measure
        # would leave its (0, 1] range, so refuse rather than return 0
        raise DomainError("complete two-sided turnover; stability is undefined")
    total = m_t + m_t1
    retained = (m_t - departures) / m_t
    incumbent = (m_t1 - arrivals) / m_t1
    return retained * (m_t / total) + incumbent * (m_t1 / total)


def team_stability_from_rosters(roster_t: set, roster_t1: set) -> float:
    """Stability from two adjacent-year member rosters (set differences)."""
    m_t, m_t1 = len(roster_t), len(roster_t1)
    departures = len(roster_t - roster_t1)
    arrivals = len(roster_t1 - roster_t)
    return team_stability(m_t, m_t1, departures, arrivals)


def jf_coefficient(positive: int, negative: int, total: int) -> float:
    """Janis-Fadner imbalance coefficient of report tone, in [-1, 1].

    (e^2 - e*c) / t^2 when positive coverage dominates, (e*c - c^2) / t^2
    when negative dominates, 0 on balance; e = positive count, c = negative
    count, t = total reports.
    """
    if total <= 0:
        raise DomainError(f"total report count must be positive, got {total}")
    if positive < 0 or negative < 0 or positive + negative > total:
        raise DomainError("need positive >= 0, negative >= 0, positive + negative <= total")
    e, c, t = float(positive), float(negative), float(total)
    if e > c:
        return (e * e - e * c) / (t * t)
    if e < c:
        return (e * c - c * c) / (t * t)
    return 0.0


@dataclass(frozen=True)
class MediatorRecord:
    """Per firm-year mediator bundle."""

    firm_id: str
    year: int
    pressure: float
    tsta: float
    jf: float

    def __post_init__(self):
        if not (0.0 < self.tsta <= 1.0):
            raise DomainError(f"tsta must lie in (0, 1], got {self.tsta}")
        if not (-1.0 <= self.jf <= 1.0):
            raise DomainError(f"jf must lie in [-1, 1], got {self.jf}")


def entropy_topsis(matrix) -> np.ndarray:
    """Entropy-weighted TOPSIS closeness per city; higher = more polluted.

    Columns are pollution volumes (larger is worse). Each column is min-max
    normalized, weighted by its information entropy, and cities are scored
    by closeness to the all-max ideal: d-/(d+ + d-). Constant columns get
    weight zero.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("need a 2-D matrix with at least two cities")
    if np.any(x < 0):
        raise DomainError("indicator values must be nonnegative")
    n, k = x.shape
    span = x.max(axis=0) - x.min(axis=0)
    live = span > 0
    if not live.any():
        raise DegenerateDataError("all indicator columns are constant")
    norm = np.zeros_like(x)
    norm[:, live] = (x[:, live] - x[:, live].min(axis=0)) / span[live]

    weights = np.zeros(k)
    colsum = norm[:, live].sum(axis=0)
    p = np.divide(norm[:, live], colsum, out=np.zeros_like(norm[:, live]), where=colsum > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)   # 0*ln 0 := 0
    e = -plogp.sum(axis=0) / math.log(n)
    weights[live] = (1.0 - e) / np.sum(1.0 - e)

    v = norm * weights
    best = v.max(axis=0)
    worst = v.min(axis=0)
    d_plus = np.sqrt(((v - best) ** 2).sum(axis=1))
    d_minus = np.sqrt(((v - worst) ** 2).sum(axis=1))
    return d_minus / (d_plus + d_minus)
