"""Backward regression solver: closed forms, diagnostics, error paths, refinement."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbsde import (
    BsdeSolver,
    TimeGrid,
    abs_terminal,
    conjugate_handle,
    doleans,
    fixture,
    linear_terminal,
    picard_refine,
    polynomial_basis,
    simulate,
    solve,
    solve_dual,
    tree_backward_induction,
)
from qbsde.exceptions import ConfigurationError, RegressionRankError
from qbsde.generators import GeneratorSpec

ZERO_GEN = GeneratorSpec(
    g1=lambda t, b, z: np.zeros(np.asarray(z).shape[:-1]),
    g2=None,
    alpha=lambda t, b: np.zeros(np.asarray(b).shape[:-1]),
    gamma=1.0,
    description="zero driver, Y is the terminal conditional expectation",
)

PURE = fixture("pure_quadratic").generator
BT = linear_terminal([1.0])


class TestZeroGenerator:
    def test_value_and_control(self, ens):
        sol = solve(ZERO_GEN, BT, ens)
        assert abs(sol.y0) <= 4.0 * sol.y0_se + 1e-3
        interior = sol.Z[:, 3:-3, 0]
        assert abs(interior.mean() + 1.0) <= 0.02
        np.testing.assert_array_equal(sol.Y[:, -1], BT(ens))


class TestPureQuadraticClosedForm:
    def test_initial_value(self, ens):
        sol = solve(PURE, BT, ens)
        assert sol.y0 == pytest.approx(-0.5, abs=0.02)

    def test_space_time_profile(self, ens):
        # Y_t = B_t - (T - t)/2 and Z = -1 solve the level-half driver
        sol = solve(PURE, BT, ens)
        nodes = ens.grid.nodes
        for k in range(ens.grid.n_steps + 1):
            want = ens.paths[:, k, 0] - 0.5 * (1.0 - nodes[k])
            gap = sol.Y[:, k] - want
            assert abs(gap.mean()) <= 0.02, k
        interior = sol.Z[:, 3:-3, 0]
        assert abs(interior.mean() + 1.0) <= 0.02
        assert interior.std() <= 0.2

    def test_one_step_mean_residuals(self, ens):
        sol = solve(PURE, BT, ens)
        dt = ens.grid.dt
        m = ens.n_paths
        for k in (0, 7, 14, ens.grid.n_steps - 1):
            g = np.asarray(
                PURE.total(float(ens.grid.nodes[k]), ens.paths[:, k, :], sol.Z[:, k, :])
            )
            stepped = sol.Y[:, k + 1] - g * dt[k]
            resid = sol.Y[:, k].mean() - stepped.mean()
            assert abs(resid) <= 4.0 * stepped.std() / math.sqrt(m) + 1e-8


class TestDiagnostics:
    def test_report_keys(self, ens_small):
        sol = solve(PURE, BT, ens_small)
        assert set(sol.residuals) == {
            "z_gap",
            "regression_rmse",
            "picard_sweeps",
            "clip_fraction",
            "rank_warnings",
            "truncation_warning",
        }
        for key in (
            "sup_abs_y",
            "sup_abs_y_p99",
            "z_l2_mean",
            "z_l2_p99",
            "y0_standard_error",
            "truncation_radii",
        ):
            assert key in sol.diagnostics
        assert not sol.residuals["truncation_warning"]
        assert sol.diagnostics["z_l2_mean"] == pytest.approx(1.0, abs=0.1)
        assert len(sol.z_coefficients) == ens_small.grid.n_steps
        assert len(sol.state_bounds) == ens_small.grid.n_steps

    def test_scheme_snapshot(self, ens_small):
        sol = solve(PURE, BT, ens_small, basis_degree=3, ridge=1e-8)
        assert sol.scheme["basis_degree"] == 3
        assert sol.scheme["ridge"] == 1e-8
        assert sol.scheme["state_winsor"] is None


class TestValidation:
    def test_missing_pieces(self, ens_small):
        with pytest.raises(ConfigurationError):
            BsdeSolver().fit(ens_small)
        with pytest.raises(ConfigurationError):
            BsdeSolver(generator=PURE).fit(ens_small)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"basis_degree": 0},
            {"picard_sweeps": 0},
            {"damping": 1.0},
            {"state_winsor": 0.7},
            {"state_winsor": 0.0},
            {"conditional_expectation": "nearest"},
            {"truncation_radius": -1.0},
        ],
    )
    def test_bad_scheme_values(self, ens_small, kwargs):
        with pytest.raises(ConfigurationError):
            solve(PURE, BT, ens_small, **kwargs)

    def test_tree_mode_needs_uniform_one_dimensional_walk(self):
        ens2 = simulate(TimeGrid.uniform(1.0, 4), dim=2, n_paths=64, seed=0)
        with pytest.raises(ConfigurationError):
            solve(PURE, linear_terminal([1.0, 0.0]), ens2, conditional_expectation="tree")

    def test_rank_deficiency_without_ridge(self):
        ens = simulate(TimeGrid.uniform(1.0, 4), dim=1, n_paths=4, seed=1)
        with pytest.raises(RegressionRankError):
            solve(PURE, BT, ens, ridge=0.0)

    def test_non_finite_terminal(self, ens_small):
        bad = dataclasses.replace(
            BT, functional=lambda paths, grid: np.full(paths.shape[0], np.nan)
        )
        with pytest.raises(ConfigurationError):
            solve(PURE, bad, ens_small)


class TestTruncation:
    def test_tiny_radius_flags(self, ens_small):
        sol = solve(PURE, BT, ens_small, truncation_radius=0.05)
        assert sol.residuals["truncation_warning"]
        assert sol.residuals["clip_fraction"] >= 0.99
        np.testing.assert_array_equal(sol.diagnostics["truncation_radii"], 0.05)

    def test_default_radius_is_loose(self, ens_small):
        sol = solve(PURE, BT, ens_small)
        assert sol.residuals["clip_fraction"] == 0.0
        assert np.all(sol.diagnostics["truncation_radii"] > 1.0)


class TestStateWinsor:
    def test_winsorized_solve_stays_close(self, ens):
        base = solve(PURE, BT, ens)
        wins = solve(PURE, BT, ens, state_winsor=0.01)
        assert abs(wins.y0 - base.y0) <= 0.02
        assert wins.scheme["state_winsor"] == 0.01


class TestConvergence:
    def test_no_systematic_error_growth(self):
        # regression bias wiggles with N at the 0.01 scale while the time
        # discretisation bias is negligible here, so the honest invariant is a
        # plateau: every error stays in the sampling band and refining the
        # grid eightfold does not end up worse than where it started
        errs = []
        ses = []
        for n in (10, 20, 40, 80):
            ens = simulate(TimeGrid.uniform(1.0, n), dim=1, n_paths=100_000, seed=2024)
            sol = solve(PURE, BT, ens)
            errs.append(abs(sol.y0 + 0.5))
            ses.append(max(sol.y0_se, 1e-4))
        assert max(errs) <= 0.02, (errs, ses)
        assert errs[-1] <= errs[0] + 3.0 * (ses[0] + ses[-1]), (errs, ses)


class TestPicardRefine:
    def test_refining_converged_solution_is_stable(self, ens_small):
        sol = solve(PURE, BT, ens_small)
        ref = picard_refine(sol, PURE, BT, ens_small, iterations=2)
        assert abs(ref.y0 - sol.y0) <= 1e-3 * (1.0 + abs(sol.y0))
        assert len(ref.residuals["refine_gaps"]) == 2
        assert len(ref.residuals["contraction_factors"]) == 1

    def test_zero_control_warm_start_recovers(self, ens_small):
        sol = solve(PURE, BT, ens_small)
        cold = dataclasses.replace(sol, Z=np.zeros_like(sol.Z))
        ref = picard_refine(cold, PURE, BT, ens_small, iterations=3)
        assert abs(ref.y0 - sol.y0) <= 1e-3 * (1.0 + abs(sol.y0))
        gaps = ref.residuals["refine_gaps"]
        assert gaps[-1] <= gaps[0]

    def test_iteration_floor(self, ens_small):
        sol = solve(PURE, BT, ens_small)
        with pytest.raises(ConfigurationError):
            picard_refine(sol, PURE, BT, ens_small, iterations=0)


class TestRegressionAgainstTree:
    def test_kinked_terminal_gap_shrinks(self):
        # binomial versus Gaussian driving noise differ most under the kink,
        # and the gap closes as the step count grows
        gen = fixture("example_iii").generator
        term = abs_terminal([1.0])
        diffs = {}
        for n in (10, 40):
            ens = simulate(TimeGrid.uniform(0.5, n), dim=1, n_paths=100_000, seed=7)
            sol = solve(gen, term, ens)
            tree = tree_backward_induction(gen, term, 0.5, n)
            diffs[n] = abs(sol.y0 - tree)
        assert diffs[40] <= 0.05
        assert diffs[40] <= diffs[10]


class TestSolveDual:
    def test_constant_controls_hit_value_curve(self, ens):
        # V(c) = c T + c^2 T / 2 for the level-one quadratic driver
        handle = conjugate_handle(PURE)
        for c, want in ((-1.0, -0.5), (0.0, 0.0), (1.0, 1.5)):
            ctrl = doleans(c, ens, label=f"c={c}")
            sol = solve_dual(PURE, handle, BT, ens, ctrl)
            assert sol.y0 == pytest.approx(want, abs=0.04), c
            assert sol.scheme["fast_path"]
            assert sol.scheme["dual"]

    def test_reweighting_route(self, ens):
        handle = conjugate_handle(PURE)
        ctrl = doleans(0.5, ens, label="half", markov=False)
        sol = solve_dual(PURE, handle, BT, ens, ctrl)
        assert sol.y0 == pytest.approx(0.625, abs=0.05)


class TestEstimatorSurface:
    def test_params_roundtrip(self):
        est = BsdeSolver(generator=PURE, terminal=BT, basis_degree=3)
        params = est.get_params(deep=False)
        assert params["basis_degree"] == 3
        clone = BsdeSolver(**params)
        assert clone.get_params(deep=False) == params

    def test_fit_sets_attributes(self, ens_small):
        est = BsdeSolver(generator=PURE, terminal=BT).fit(ens_small)
        assert est.Y_.shape == (ens_small.n_paths, ens_small.grid.n_steps + 1)
        assert est.Z_.shape == (ens_small.n_paths, ens_small.grid.n_steps, 1)
        assert est.y0_ == est.solution_.y0
        np.testing.assert_array_equal(est.predict(0), est.Y_[:, 0])

    def test_set_params(self, ens_small):
        est = BsdeSolver(generator=PURE, terminal=BT)
        est.set_params(basis_degree=2, ridge=1e-6)
        sol = est.fit(ens_small).solution_
        assert sol.scheme["basis_degree"] == 2
        assert sol.scheme["ridge"] == 1e-6


class TestPolynomialBasis:
    def test_one_dimensional_columns(self):
        x = np.linspace(-2, 2, 11)[:, None]
        b = polynomial_basis(x, 4, 2)
        assert b.shape == (11, 5)
        for j in range(5):
            np.testing.assert_allclose(b[:, j], x[:, 0] ** j, atol=1e-12)

    def test_two_dimensional_with_cross_terms(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((50, 2))
        b = polynomial_basis(x, 3, 2)
        assert b.shape == (50, 8)
        cols = [b[:, j] for j in range(8)]
        expected = [
            np.ones(50),
            x[:, 0],
            x[:, 1],
            x[:, 0] ** 2,
            x[:, 1] ** 2,
            x[:, 0] ** 3,
            x[:, 1] ** 3,
            x[:, 0] * x[:, 1],
        ]
        for want in expected:
            assert any(np.allclose(c, want, atol=1e-12) for c in cols)

    @given(st.integers(min_value=1, max_value=6))
    @settings(max_examples=12, deadline=None)
    def test_column_count_one_dim(self, degree):
        x = np.linspace(-1, 1, 7)[:, None]
        b = polynomial_basis(x, degree, 2)
        assert b.shape == (7, degree + 1)
        np.testing.assert_array_equal(b[:, 0], 1.0)
