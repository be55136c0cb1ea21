"""Matching and weighting corroboration estimators on a binarized treatment."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegenerateDataError, DomainError
from .learners import _fit_logistic

PROPENSITY_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class BinarizedTreatment:
    rule: str              # "median_split" | "threshold"
    cut: float
    column: np.ndarray     # 0/1 per row


def binarize_treatment(values, rule: str = "median_split",
                       threshold: float | None = None) -> BinarizedTreatment:
    """0/1 arm assignment from a continuous treatment; both arms must be nonempty."""
    v = np.asarray(values, dtype=float)
    if rule == "median_split":
        cut = float(np.median(v))
    elif rule == "threshold":
        if threshold is None:
            raise DomainError("threshold rule needs an explicit cut value")
        cut = float(threshold)
    else:
        raise DomainError(f"unknown binarization rule {rule!r}")
    col = (v > cut).astype(float)
    if col.sum() == 0 or col.sum() == len(col):
        raise DegenerateDataError(f"binarization at {cut:g} leaves an empty arm")
    return BinarizedTreatment(rule=rule, cut=cut, column=col)


def propensity_fit(features, binary_treatment) -> np.ndarray:
    """Logistic propensities clipped to [0.01, 0.99].

    Separation shows up as Newton non-convergence; the fallback refits with
    ridge damping and warns.
    """
    X = np.asarray(features, dtype=float)
    d = np.asarray(binary_treatment, dtype=float)
    if not set(np.unique(d)) <= {0.0, 1.0}:
        raise DomainError("treatment must be 0/1")
    if d.sum() < 10 or (1 - d).sum() < 10:
        raise DomainError("each arm needs at least 10 rows")
    params = {"iterations": 100, "tol": 1e-8}
    try:
        state = _fit_logistic(X, d, params, seed=0)
        p = 1.0 / (1.0 + np.exp(-np.clip(X @ state["coef"] + state["intercept"], -30, 30)))
        # complete separation: the likelihood plateaus with every probability
        # pinned to its label instead of blowing the iteration cap
        separated = bool(np.all(np.abs(p - d) < 1e-3))
    except ConvergenceError:
        separated = True
    if separated:
        warnings.warn("propensity model separated; refit with ridge damping",
                      stacklevel=2)
        state = _fit_logistic(X, d, params, seed=0, ridge=1.0)
        p = 1.0 / (1.0 + np.exp(-np.clip(X @ state["coef"] + state["intercept"], -30, 30)))
    return np.clip(p, *PROPENSITY_CLIP)


@dataclass(frozen=True)
class EffectEstimate:
    effect: float
    se: float
    n: int
    method: str

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.effect - 1.96 * self.se, self.effect + 1.96 * self.se)


def psm_att(outcome, binary_treatment, propensities,
            caliper: float = 0.2) -> EffectEstimate:
    """Treated-unit effect by 1-nearest-neighbor propensity matching.

    Matching is with replacement on the propensity logit; the caliper is
    ``caliper`` times the logit's sample SD. Distance ties pick the lowest
    control row index. SE is the matched-pair variance estimator.
    """
    y = np.asarray(outcome, dtype=float)
    d = np.asarray(binary_treatment, dtype=float)
    p = np.asarray(propensities, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("propensities must lie strictly inside (0, 1)")
    if caliper < 0:
        raise DomainError("caliper must be nonnegative")
    logit = np.log(p / (1.0 - p))
    treated = np.flatnonzero(d == 1)
    control = np.flatnonzero(d == 0)
    if len(treated) == 0 or len(control) == 0:
        raise DegenerateDataError("matching needs both arms populated")
    max_dist = caliper * float(np.std(logit, ddof=1))
    dist = np.abs(logit[treated][:, None] - logit[control][None, :])
    nearest = np.argmin(dist, axis=1)                 # first minimum = lowest index
    best = dist[np.arange(len(treated)), nearest]
    ok = best <= max_dist
    if not ok.any():
        raise DomainError(f"no matches within caliper {caliper:g} "
                          f"(max distance {max_dist:.3g} on the logit scale)")
    diffs = y[treated[ok]] - y[control[nearest[ok]]]
    n_matched = int(ok.sum())
    se = float(np.std(diffs, ddof=1) / np.sqrt(n_matched)) if n_matched > 1 else float("nan")
    return EffectEstimate(effect=float(diffs.mean()), se=se, n=n_matched, method="psm_att")


def ipw_ate(outcome, binary_treatment, propensities) -> EffectEstimate:
    """Normalized (Hajek) inverse-probability-weighted mean difference.

    Weights are 1/p in the treated arm and 1/(1-p) in the control arm, each
    normalized to sum to one; the SE is the influence-function plug-in. A
    small effective sample size in either arm triggers a warning.
    """
    y = np.asarray(outcome, dtype=float)
    d = np.asarray(binary_treatment, dtype=float)
    p = np.asarray(propensities, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("propensities must lie strictly inside (0, 1)")
    n = len(y)
    w1 = d / p
    w0 = (1.0 - d) / (1.0 - p)
    for label, w in (("treated", w1[d == 1]), ("control", w0[d == 0])):
        ess = w.sum() ** 2 / np.sum(w * w) if w.size else 0.0
        if ess < 10:
            warnings.warn(f"IPW {label} arm has effective sample size {ess:.1f} < 10; "
                          "estimate may be unstable", stacklevel=2)
    mu1 = float(np.sum(w1 * y) / np.sum(w1))
    mu0 = float(np.sum(w0 * y) / np.sum(w0))
    psi = w1 * (y - mu1) / np.mean(w1) - w0 * (y - mu0) / np.mean(w0)
    se = float(np.sqrt(np.sum(psi * psi)) / n)
    return EffectEstimate(effect=mu1 - mu0, se=se, n=n, method="ipw_ate")
