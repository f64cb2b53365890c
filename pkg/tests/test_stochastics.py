"""Path simulation, terminal builders, measure changes, and moment estimators."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from qbsde import (
    MajorantFamily,
    TimeGrid,
    abs_terminal,
    as_control_map,
    class_D_diagnostic,
    critical_terminal,
    doleans,
    ensemble_digest,
    exp_moment,
    linear_terminal,
    load_ensemble,
    load_solution,
    relative_entropy,
    save_ensemble,
    save_solution,
    simulate,
    terminal_builder,
)
from qbsde.exceptions import ConfigurationError
from qbsde.stochastics import mean_and_se, survival_inverse, weighted_mean_se


class TestTimeGrid:
    def test_uniform(self):
        grid = TimeGrid.uniform(2.0, 4)
        np.testing.assert_allclose(grid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert grid.horizon == 2.0
        assert grid.n_steps == 4
        np.testing.assert_allclose(grid.dt, 0.5)

    def test_invalid_grids(self):
        with pytest.raises(ConfigurationError):
            TimeGrid.uniform(1.0, 0)
        with pytest.raises(ConfigurationError):
            TimeGrid(np.array([0.1, 0.5, 1.0]))
        with pytest.raises(ConfigurationError):
            TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))


class TestSimulate:
    def test_starts_at_zero(self, ens):
        np.testing.assert_array_equal(ens.paths[:, 0, :], 0.0)

    def test_increment_moments(self, ens):
        inc = ens.increments
        dt = ens.grid.dt[0]
        m = inc.shape[0] * inc.shape[1]
        mean = inc.mean()
        var = inc.var()
        assert abs(mean) <= 4.0 * math.sqrt(dt / m)
        assert abs(var - dt) <= 4.0 * dt * math.sqrt(2.0 / m)

    def test_two_dimensional_terminal(self):
        grid = TimeGrid.uniform(1.0, 10)
        ens = simulate(grid, dim=2, n_paths=40_000, seed=3)
        bt = ens.paths[:, -1, :]
        np.testing.assert_allclose(bt.var(axis=0), 1.0, atol=0.03)
        corr = np.corrcoef(bt.T)[0, 1]
        assert abs(corr) <= 4.0 / math.sqrt(bt.shape[0])

    def test_thread_count_does_not_change_paths(self):
        grid = TimeGrid.uniform(1.0, 8)
        base = simulate(grid, dim=1, n_paths=10_000, seed=9, threads=1)
        for threads in (2, 8):
            other = simulate(grid, dim=1, n_paths=10_000, seed=9, threads=threads)
            np.testing.assert_array_equal(base.paths, other.paths)
            assert ensemble_digest(other) == ensemble_digest(base)

    def test_seed_changes_paths(self, grid):
        a = simulate(grid, dim=1, n_paths=100, seed=1)
        b = simulate(grid, dim=1, n_paths=100, seed=2)
        assert not np.array_equal(a.paths, b.paths)

    def test_metadata(self, ens):
        assert ens.n_paths == 20_000
        assert ens.dim == 1
        assert ens.seed == 2024


class TestTerminals:
    def test_linear_matches_terminal_value_form(self, ens):
        spec = linear_terminal([2.0])
        xi = spec(ens)
        np.testing.assert_array_equal(
            xi, spec.of_terminal_value(ens.paths[:, -1, :], ens.grid.horizon)
        )
        np.testing.assert_allclose(xi, 2.0 * ens.paths[:, -1, 0])

    def test_abs_matches_terminal_value_form(self, ens):
        spec = abs_terminal([1.0])
        xi = spec(ens)
        np.testing.assert_array_equal(
            xi, spec.of_terminal_value(ens.paths[:, -1, :], ens.grid.horizon)
        )
        assert np.all(xi >= 0)

    def test_moment_orders(self):
        assert linear_terminal([1.0]).moment_order == np.inf
        assert abs_terminal([1.0]).moment_order == np.inf
        assert critical_terminal(1.0).moment_order == 1.0
        assert critical_terminal(0.5).moment_order == 0.5

    def test_survival_inverse_inverts(self):
        for u in (0.9, 0.5, 0.1, 0.01):
            x = float(survival_inverse(np.array([u]), 1.0)[0])
            assert math.exp(-x) / (1.0 + x) ** 2 == pytest.approx(u, rel=1e-9)

    def test_critical_borderline_moment(self, ens):
        # E[exp(gamma xi)] = 1 + gamma in closed form, but the estimator sits
        # below it at any finite M because the integrand has infinite variance
        xi = critical_terminal(1.0)(ens)
        rep = exp_moment(1.0, xi)
        assert 1.4 <= rep.estimate <= 2.6
        assert not rep.overflow

    def test_critical_tail_mass_contrast(self, grid):
        ens = simulate(grid, dim=1, n_paths=80_000, seed=13)
        xi = critical_terminal(1.0)(ens)
        above = exp_moment(1.5, xi)
        below = exp_moment(0.5, xi)
        assert above.tail_top1_mass >= 0.3
        assert below.tail_top1_mass < above.tail_top1_mass

    def test_interior_nodes_do_not_matter(self, ens_small):
        # all catalog terminals read the path only at T
        scrambled = ens_small.paths.copy()
        rng = np.random.default_rng(0)
        interior = rng.permutation(np.arange(1, scrambled.shape[1] - 1))
        scrambled[:, 1:-1, :] = scrambled[:, interior, :]
        twin = dataclasses.replace(ens_small, paths=scrambled)
        for spec in (linear_terminal([1.0]), abs_terminal([1.0]), critical_terminal(2.0)):
            np.testing.assert_array_equal(spec(ens_small), spec(twin))

    def test_builder_roundtrip(self, ens_small):
        spec = terminal_builder("abs", {"vector": [1.0]})
        np.testing.assert_array_equal(spec(ens_small), abs_terminal([1.0])(ens_small))
        with pytest.raises(ConfigurationError):
            terminal_builder("sinusoid", {})


class TestDoleans:
    def test_zero_control_is_unit_weight(self, ens_small):
        ctrl = doleans(0.0, ens_small)
        np.testing.assert_array_equal(ctrl.log_weights, 0.0)
        np.testing.assert_array_equal(ctrl.weights, 1.0)
        assert not ctrl.overflow.any()

    def test_constant_control_martingale(self, ens):
        ctrl = doleans(0.7, ens)
        w = ctrl.weights[:, -1]
        mean, se = mean_and_se(w)
        assert abs(mean - 1.0) <= 4.0 * se

    @given(st.floats(min_value=-2.0, max_value=2.0, allow_nan=False))
    @settings(max_examples=25, deadline=None)
    def test_terminal_log_weight_closed_form(self, q):
        grid = TimeGrid.uniform(1.0, 16)
        ens = simulate(grid, dim=1, n_paths=256, seed=42)
        ctrl = doleans(q, ens)
        want = q * ens.paths[:, -1, 0] - 0.5 * q * q * grid.horizon
        np.testing.assert_allclose(ctrl.terminal_log_weights, want, atol=1e-12)

    def test_shift_and_l2_accumulators(self, ens_small):
        q = 1.3
        ctrl = doleans(q, ens_small)
        nodes = ens_small.grid.nodes
        want = np.broadcast_to(q * nodes, ctrl.shift[:, :, 0].shape)
        np.testing.assert_allclose(ctrl.shift[:, :, 0], want, atol=1e-12)
        np.testing.assert_allclose(ctrl.terminal_l2(), q * q * nodes[-1], atol=1e-12)

    def test_reweighted_terminal_mean_is_shifted(self, ens):
        q = 0.8
        ctrl = doleans(q, ens)
        mean, se, ess = weighted_mean_se(ens.paths[:, -1, 0], ctrl.weights[:, -1])
        assert abs(mean - q * ens.grid.horizon) <= 4.0 * se
        assert ess > 0.1 * ens.n_paths

    def test_callable_control(self, ens_small):
        ctrl = doleans(lambda t, b: np.sin(b), ens_small, label="sin", markov=True)
        assert ctrl.label == "sin"
        assert np.all(np.isfinite(ctrl.log_weights))

    def test_markov_flag_is_recorded(self, ens_small):
        assert doleans(0.5, ens_small).markov
        assert not doleans(0.5, ens_small, markov=False).markov

    def test_as_control_map_broadcasts(self):
        qmap = as_control_map(np.array([2.0]))
        out = qmap(0.3, np.zeros((7, 1)))
        assert out.shape == (7, 1)
        np.testing.assert_array_equal(out, 2.0)


class TestEstimators:
    def test_mean_and_se(self):
        x = np.array([1.0, 3.0, 5.0, 7.0])
        mean, se = mean_and_se(x)
        assert mean == pytest.approx(4.0)
        assert se == pytest.approx(x.std(ddof=1) / 2.0)

    def test_uniform_weights_reduce_to_plain_mean(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(500)
        mean, se, ess = weighted_mean_se(x, np.ones_like(x))
        assert mean == pytest.approx(x.mean(), abs=1e-12)
        assert ess == pytest.approx(500.0)


class TestRelativeEntropy:
    def test_zero_control(self, ens_small):
        rep = relative_entropy(doleans(0.0, ens_small), ens_small)
        assert rep.primal == pytest.approx(0.0, abs=1e-14)
        assert rep.dual == pytest.approx(0.0, abs=1e-14)
        assert rep.ess == pytest.approx(ens_small.n_paths)
        assert rep.n_overflow == 0

    def test_constant_control(self, ens):
        # H(Q|P) = T q^2 / 2; the dual side is deterministic for constant q
        rep = relative_entropy(doleans(1.0, ens), ens)
        assert rep.dual == pytest.approx(0.5, abs=1e-12)
        assert rep.dual_se == pytest.approx(0.0, abs=1e-12)
        assert abs(rep.primal - 0.5) <= 4.0 * rep.primal_se + 1e-3

    def test_deterministic_ramp_matches_discrete_sum(self, ens):
        ctrl = doleans(lambda t, b: np.full(b.shape[:-1] + (1,), t), ens, label="ramp")
        rep = relative_entropy(ctrl, ens)
        nodes = ens.grid.nodes
        exact = 0.5 * float(np.sum(nodes[:-1] ** 2 * np.diff(nodes)))
        assert rep.dual == pytest.approx(exact, abs=1e-12)
        assert abs(rep.primal - rep.dual) <= 4.0 * rep.primal_se


class TestExpMoment:
    def test_degenerate_samples(self):
        rep = exp_moment(1.0, np.zeros(100))
        assert rep.estimate == 1.0
        assert rep.standard_error == 0.0
        assert not rep.overflow

    def test_gaussian_closed_form(self, ens):
        rep = exp_moment(1.0, ens.paths[:, -1, 0])
        assert abs(rep.estimate - math.exp(0.5)) <= 4.0 * rep.standard_error

    def test_folded_gaussian_closed_form(self, ens):
        # E[e^{|B_1|}] = 2 e^{1/2} Phi(1)
        want = 2.0 * math.exp(0.5) * float(ndtr(1.0))
        rep = exp_moment(1.0, np.abs(ens.paths[:, -1, 0]))
        assert abs(rep.estimate - want) <= 4.0 * rep.standard_error

    def test_overflow_flag(self):
        rep = exp_moment(1.0, np.array([800.0, 1.0]))
        assert rep.overflow
        assert rep.estimate == np.inf

    def test_requires_positive_order(self):
        with pytest.raises(ConfigurationError):
            exp_moment(0.0, np.ones(3))
        with pytest.raises(ConfigurationError):
            exp_moment(1.0, np.array([]))


class TestClassDDiagnostic:
    def setup_method(self):
        self.fam = MajorantFamily(lambda x: 1.0 + x, gamma=1.0)

    def test_zero_values(self, ens_small):
        values = np.zeros_like(ens_small.paths[:, :, 0])
        rep = class_D_diagnostic(self.fam, values, ens_small.grid)
        assert rep.passed
        assert rep.details["sup_estimate"] == pytest.approx(0.0, abs=1e-14)

    def test_absolute_brownian_motion(self, ens):
        values = np.abs(ens.paths[:, :, 0])
        rep = class_D_diagnostic(self.fam, values, ens.grid, levels=(1.0, 2.0))
        assert rep.passed
        assert 2.5 <= rep.details["sup_estimate"] <= 4.5
        assert rep.details["sup_standard_error"] > 0
        assert rep.details["worst_tail_top1_mass"] <= 0.5
        n_stops = ens.grid.n_steps + 1 + 2
        assert rep.samples_used == ens.n_paths * n_stops

    def test_heavy_values_flagged(self, ens):
        values = np.exp(2.0 * ens.paths[:, :, 0] ** 2)
        rep = class_D_diagnostic(self.fam, values, ens.grid)
        assert not rep.passed
        assert rep.witnesses

    def test_budget_enforced(self, ens_small):
        values = np.abs(ens_small.paths[:, :, 0])
        rep = class_D_diagnostic(self.fam, values, ens_small.grid, budget=1e-3)
        assert not rep.passed

    def test_shape_validation(self, ens_small):
        with pytest.raises(ConfigurationError):
            class_D_diagnostic(self.fam, np.zeros((10, 3)), ens_small.grid)


class TestSaveLoad:
    def test_ensemble_roundtrip(self, tmp_path, ens_small):
        target = str(tmp_path / "paths.bin")
        digest = save_ensemble(target, ens_small)
        assert digest == ensemble_digest(ens_small)
        back = load_ensemble(target)
        np.testing.assert_array_equal(back.paths, ens_small.paths)
        np.testing.assert_array_equal(back.grid.nodes, ens_small.grid.nodes)
        assert back.seed == ens_small.seed
        assert back.rng_scheme == ens_small.rng_scheme
        assert ensemble_digest(back) == digest

    def test_solution_roundtrip(self, tmp_path, ens_small):
        m = ens_small.n_paths
        n = ens_small.grid.n_steps
        rng = np.random.default_rng(6)
        y = rng.standard_normal((m, n + 1))
        z = rng.standard_normal((m, n, 1))
        target = str(tmp_path / "solution.bin")
        save_solution(target, ens_small, y, z)
        back_ens, back_y, back_z = load_solution(target)
        np.testing.assert_array_equal(back_ens.paths, ens_small.paths)
        np.testing.assert_array_equal(back_y, y)
        np.testing.assert_array_equal(back_z, z)

    def test_solution_shape_validation(self, tmp_path, ens_small):
        m = ens_small.n_paths
        with pytest.raises(ConfigurationError):
            save_solution(
                str(tmp_path / "bad.bin"),
                ens_small,
                np.zeros((m, 3)),
                np.zeros((m, ens_small.grid.n_steps, 1)),
            )
