import numpy as np
import pandas as pd
import pytest

from vaedml.dml import (DmlConfig, estimate, mediation_regression, parse_split_ratio,
                        robustness_grid, subgroup_estimates, temporal_effects,
                        within_transform)
from vaedml.errors import DegenerateDataError, DomainError
from vaedml.learners import LearnerSpec
from vaedml.panel import PanelTable
from vaedml.synth import DgpSpec, generate_panel

OLS = LearnerSpec("ols")


def ols_config(**kw):
    kw.setdefault("outcome_learner", OLS)
    kw.setdefault("treatment_learner", OLS)
    kw.setdefault("repetitions", 1)
    return DmlConfig(**kw)


@pytest.fixture(scope="module")
def linear_panel():
    spec = DgpSpec(seed=4, nuisance="linear", theta=-0.4, n_firms=60, n_years=6,
                   dropout=0.0, outcome_noise_sd=1e-8, treatment_noise_sd=0.2,
                   firm_effect_sd=1e-8, year_effect_sd=1e-8)
    table, truth = generate_panel(spec)
    return table, truth


@pytest.fixture(scope="module")
def noisy_panel():
    spec = DgpSpec(seed=5, nuisance="linear", theta=-0.4, n_firms=80, n_years=6,
                   dropout=0.0)
    table, _ = generate_panel(spec)
    return table


class TestSplitRatio:
    @pytest.mark.parametrize("ratio,k", [("1:4", 5), ("1:2", 3), ("1:7", 8), ("2:4", 3)])
    def test_standard_ratios(self, ratio, k):
        assert parse_split_ratio(ratio) == k

    @pytest.mark.parametrize("ratio", ["2:3", "0:4", "1:-1", "5", "a:b", "1:0"])
    def test_invalid(self, ratio):
        with pytest.raises(DomainError):
            parse_split_ratio(ratio)


class TestEstimate:
    def test_zero_noise_linear_exact(self, linear_panel):
        table, _ = linear_panel
        est = estimate(table, ols_config(add_quadratics=False, seed=1))
        assert est.theta == pytest.approx(-0.4, abs=1e-6)
        assert est.n == len(table)
        assert est.n_folds == 5

    def test_ci_definition(self, noisy_panel):
        est = estimate(noisy_panel, ols_config(seed=2))
        lo, hi = est.ci95
        assert lo == pytest.approx(est.theta - 1.96 * est.robust_se)
        assert hi == pytest.approx(est.theta + 1.96 * est.robust_se)
        assert est.robust_se > 0

    def test_orthogonality_of_final_residuals(self, noisy_panel):
        cfg = ols_config(seed=3, keep_residuals=True)
        est = estimate(noisy_panel, cfg)
        y_res, d_res = est.residuals
        e = y_res - est.theta * d_res
        scale = float(np.mean(np.abs(d_res))) or 1.0
        assert abs(np.sum(e * d_res)) <= 1e-8 * len(y_res) * scale

    def test_constant_shift_invariance_with_ols(self, noisy_panel):
        cfg = ols_config(seed=4)
        base = estimate(noisy_panel, cfg)
        for col, delta in (("gw", 5.0), ("balance", 2.0)):
            data = noisy_panel.data.copy()
            data[col] = data[col] + delta
            shifted = estimate(noisy_panel.with_data(data), cfg)
            assert shifted.theta == pytest.approx(base.theta, abs=1e-9)

    def test_degenerate_treatment(self):
        spec = DgpSpec(seed=6, nuisance="linear", theta=0.0, n_firms=40, n_years=4,
                       dropout=0.0)
        table, _ = generate_panel(spec)
        data = table.data.copy()
        data["balance"] = 0.31  # constant treatment
        with pytest.raises(DegenerateDataError):
            estimate(table.with_data(data), ols_config(seed=0))

    def test_min_rows_precondition(self, noisy_panel):
        small = noisy_panel.with_data(noisy_panel.data.iloc[:40])
        with pytest.raises(DomainError):
            estimate(small, ols_config(seed=0))

    def test_repetition_median_stabilizes(self, noisy_panel):
        est1 = estimate(noisy_panel, ols_config(seed=5, repetitions=1))
        est5 = estimate(noisy_panel, ols_config(seed=5, repetitions=5))
        assert abs(est5.theta - est1.theta) < 5 * est1.robust_se
        assert len(est5.fold_diagnostics) == 5 * est5.n_folds

    def test_fold_diagnostics_have_r2(self, noisy_panel):
        est = estimate(noisy_panel, ols_config(seed=6))
        d = est.fold_diagnostics[0]
        assert {"rep", "fold", "n", "r2_outcome", "r2_treatment"} <= set(d)

    def test_explicit_treatment_column(self, noisy_panel):
        data = noisy_panel.data.copy()
        rng = np.random.default_rng(0)
        data["balance_alt"] = np.clip(
            data["balance"] + 0.1 * rng.normal(size=len(data)), 0.001, 1.0)
        t2 = PanelTable(data=data, roles={**noisy_panel.roles, "balance_alt": "auxiliary"})
        est = estimate(t2, ols_config(seed=7, treatment="balance_alt"))
        assert np.isfinite(est.theta)


class TestRobustnessGrid:
    def test_singleton_learner_matches_base(self, noisy_panel):
        cfg = ols_config(seed=8)
        cells = robustness_grid(noisy_panel, cfg, {"learners": [("ols", OLS)]})
        base = estimate(noisy_panel, cfg)
        assert cells[0].estimate.theta == pytest.approx(base.theta)

    def test_winsorize_noop_when_no_outliers(self, linear_panel):
        table, _ = linear_panel
        cfg = ols_config(add_quadratics=False, seed=9)
        # bounds (0, 1) clamp nothing
        cells = robustness_grid(table, cfg, {"winsorize": [(0.0, 1.0)]})
        base = estimate(table, cfg)
        assert cells[0].estimate.theta == pytest.approx(base.theta, abs=1e-6)

    def test_failed_cell_flagged_not_raised(self, noisy_panel):
        cfg = ols_config(seed=10)
        cells = robustness_grid(noisy_panel, cfg,
                                {"treatment_columns": ["no_such_column"],
                                 "split_ratios": ["1:2"]})
        by_dim = {c.dimension: c for c in cells}
        assert by_dim["treatment"].failed and by_dim["treatment"].error
        assert not by_dim["split_ratio"].failed

    def test_empty_grid_rejected(self, noisy_panel):
        with pytest.raises(DomainError):
            robustness_grid(noisy_panel, ols_config(), {})

    def test_unknown_dimension_rejected(self, noisy_panel):
        with pytest.raises(DomainError):
            robustness_grid(noisy_panel, ols_config(), {"kernels": [1]})


class TestSubgroups:
    def test_heterogeneous_thetas_recovered(self):
        spec = DgpSpec(seed=11, nuisance="linear", theta={"east": -0.12, "central": -0.3,
                                                          "west": -0.54},
                       theta_by="region", n_firms=220, n_years=8, dropout=0.0,
                       outcome_noise_sd=0.08)
        table, _ = generate_panel(spec)
        ests = subgroup_estimates(table, ols_config(seed=12), "region")
        assert ests["west"].theta == pytest.approx(-0.54, abs=0.08)
        assert ests["east"].theta == pytest.approx(-0.12, abs=0.08)

    def test_small_group_skipped_with_warning(self, noisy_panel):
        groups = {"tiny": ["east"], "rest": ["central", "west"]}
        data = noisy_panel.data.copy()
        keep = (data["region"] != "east") | (data.index < data.index[10])
        table = noisy_panel.with_data(data[keep])
        with pytest.warns(UserWarning, match="skipped"):
            ests = subgroup_estimates(table, ols_config(seed=13), "region", groups)
        assert "tiny" not in ests and "rest" in ests

    def test_homogeneous_groups_overlap(self, noisy_panel):
        ests = subgroup_estimates(noisy_panel, ols_config(seed=14), "region")
        cis = [e.ci95 for e in ests.values()]
        lo = max(c[0] for c in cis)
        hi = min(c[1] for c in cis)
        assert lo <= hi  # same DGP in every region: intervals overlap


class TestTemporal:
    def make_lag_panel(self, lag_theta=-0.5, seed=15, n_firms=150, n_years=8):
        # outcome responds to LAST year's treatment only
        rng = np.random.default_rng(seed)
        rows = []
        for f in range(n_firms):
            d_hist = {}
            for yr in range(2010, 2010 + n_years):
                x = rng.normal()
                d = np.clip(0.5 + 0.2 * x + rng.normal(0, 0.2), 0.01, 1.0)
                d_hist[yr] = d
                y = x * 0.5 + rng.normal(0, 0.1)
                if yr - 1 in d_hist:
                    y += lag_theta * d_hist[yr - 1]
                rows.append({"firm_id": f"F{f:03d}", "year": yr, "gw": y,
                             "balance": d, "x": x})
        roles = {"gw": "outcome", "balance": "treatment", "x": "control"}
        return PanelTable(data=pd.DataFrame(rows), roles=roles)

    def test_lag_separation(self):
        table = self.make_lag_panel()
        out = temporal_effects(table, ols_config(seed=16, add_quadratics=False), max_lag=1)
        lag1 = out["lag_1"]
        cur = out["current"]
        assert lag1.p_value < 0.01
        assert lag1.theta == pytest.approx(-0.5, abs=0.1)
        assert cur.ci95[0] <= 0.0 <= cur.ci95[1]

    def test_max_lag_zero_equals_estimate(self, noisy_panel):
        cfg = ols_config(seed=17)
        out = temporal_effects(noisy_panel, cfg, max_lag=0)
        assert set(out) == {"current"}
        assert out["current"].theta == pytest.approx(estimate(noisy_panel, cfg).theta)

    def test_cumulative_uses_window_mean(self):
        table = self.make_lag_panel()
        out = temporal_effects(table, ols_config(seed=18, add_quadratics=False), max_lag=2)
        assert out["cumulative"].n < out["current"].n   # window rows only
        assert set(out) == {"current", "lag_1", "lag_2", "cumulative"}
        # white-noise treatment: averaging the window shrinks residual
        # treatment variance ~3x, so the cumulative SE must inflate
        assert out["cumulative"].robust_se > out["current"].robust_se

    def test_span_error(self, noisy_panel):
        with pytest.raises(DomainError):
            temporal_effects(noisy_panel, ols_config(seed=19), max_lag=99)

    def test_exclude_generated_rows(self):
        table = self.make_lag_panel(n_firms=120)
        data = table.data.copy()
        data["provenance"] = "real"
        fake = data.iloc[:50].copy()
        fake["firm_id"] = "cf::" + fake["firm_id"]
        fake["provenance"] = "generated"
        merged = PanelTable(data=pd.concat([data, fake], ignore_index=True),
                            roles={**table.roles, "provenance": "auxiliary"})
        with_gen = temporal_effects(merged, ols_config(seed=20, add_quadratics=False),
                                    max_lag=1)
        without = temporal_effects(merged, ols_config(seed=20, add_quadratics=False),
                                   max_lag=1, include_generated=False)
        assert without["current"].n == len(table)
        assert with_gen["current"].n == len(merged)


class TestWithinTransform:
    def test_annihilates_fixed_effects(self):
        rng = np.random.default_rng(21)
        n_f, n_y = 30, 6
        firm = np.repeat(np.arange(n_f), n_y)
        year = np.tile(np.arange(n_y), n_f)
        keep = rng.random(n_f * n_y) > 0.3    # unbalanced
        firm, year = firm[keep], year[keep]
        v = rng.normal(size=keep.sum()) + 2.0 * firm - 1.5 * year
        w = within_transform(v, firm, year)
        for idx in (firm, year):
            means = np.array([w[idx == g].mean() for g in np.unique(idx)])
            assert np.max(np.abs(means)) < 1e-8

    def test_mediation_recovers_planted_gamma(self):
        rng = np.random.default_rng(22)
        n_f, n_y = 120, 8
        rows = []
        fe_f = rng.normal(0, 1, n_f)
        fe_t = rng.normal(0, 1, n_y)
        gamma = -0.25
        for f in range(n_f):
            for t in range(n_y):
                d = rng.uniform(0.1, 1.0)
                med = gamma * d + fe_f[f] + fe_t[t] + rng.normal(0, 0.05)
                rows.append({"firm_id": f"F{f}", "year": 2010 + t,
                             "gw": rng.normal(), "balance": d, "med": med})
        table = PanelTable(data=pd.DataFrame(rows),
                           roles={"gw": "outcome", "balance": "treatment",
                                  "med": "mediator"})
        res = mediation_regression(table, "balance", "med", controls=[])
        assert res.coefficient == pytest.approx(gamma, abs=0.02)
        assert res.n == n_f * n_y

    def test_pure_fe_mediator_coefficient_zero(self):
        rng = np.random.default_rng(23)
        n_f, n_y = 60, 6
        rows = []
        fe_f = rng.normal(0, 1, n_f)
        for f in range(n_f):
            for t in range(n_y):
                rows.append({"firm_id": f"F{f}", "year": 2010 + t,
                             "gw": rng.normal(),
                             "balance": rng.uniform(0.1, 1.0),
                             "med": fe_f[f] + 0.5 * t})
        table = PanelTable(data=pd.DataFrame(rows),
                           roles={"gw": "outcome", "balance": "treatment",
                                  "med": "mediator"})
        res = mediation_regression(table, "balance", "med", controls=[])
        assert abs(res.coefficient) < 1e-8

    def test_independent_mediator_covers_zero(self):
        rng = np.random.default_rng(24)
        rows = []
        for f in range(80):
            for t in range(6):
                rows.append({"firm_id": f"F{f}", "year": 2010 + t,
                             "gw": rng.normal(), "balance": rng.uniform(0.1, 1.0),
                             "med": rng.normal()})
        table = PanelTable(data=pd.DataFrame(rows),
                           roles={"gw": "outcome", "balance": "treatment",
                                  "med": "mediator"})
        res = mediation_regression(table, "balance", "med", controls=[])
        lo = res.coefficient - 1.96 * res.robust_se
        hi = res.coefficient + 1.96 * res.robust_se
        assert lo <= 0.0 <= hi

    def test_no_within_variation_rejected(self):
        rows = []
        for f in range(20):
            for t in range(4):
                rows.append({"firm_id": f"F{f}", "year": 2010 + t,
                             "gw": 0.0, "balance": 0.1 * f,   # firm-constant treatment
                             "med": float(f + t)})
        table = PanelTable(data=pd.DataFrame(rows),
                           roles={"gw": "outcome", "balance": "treatment",
                                  "med": "mediator"})
        with pytest.raises(DegenerateDataError):
            mediation_regression(table, "balance", "med", controls=[])

    def test_needs_two_firms_and_years(self):
        rows = [{"firm_id": "A", "year": 2010 + t, "gw": 0.0, "balance": 0.1 * t,
                 "med": float(t)} for t in range(5)]
        table = PanelTable(data=pd.DataFrame(rows),
                           roles={"gw": "outcome", "balance": "treatment",
                                  "med": "mediator"})
        with pytest.raises(DomainError):
            mediation_regression(table, "balance", "med", controls=[])
