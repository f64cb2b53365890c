"""Backward least-squares Monte Carlo solver for the quadratic BSDE and its
controlled dual, under the sign convention dY = g dt - Z.dB.

The estimator follows the fit/attributes idiom: construct with scheme
parameters, call fit(ensemble), then read Y_, Z_, y0_, solution_.  Regression
is polynomial-in-state least squares with a small ridge; the tree mode swaps
regression for exact group conditional expectations on an exhaustively
enumerated sign walk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from zlib import crc32

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .conjugate import ConjugateHandle, transform
from .exceptions import (
    ConfigurationError,
    PicardDivergenceError,
    RegressionRankError,
)
from .generators import GeneratorSpec
from .stochastics import (
    ControlProcess,
    PathEnsemble,
    TerminalSpec,
    simulate,
)
from .validation import check_int, check_positive

__all__ = [
    "BsdeSolution",
    "BsdeSolver",
    "polynomial_basis",
    "solve",
    "solve_dual",
    "picard_refine",
]


# ---------------------------------------------------------------------------
# regression plumbing


def polynomial_basis(states: np.ndarray, degree: int, cross_degree: int = 2) -> np.ndarray:
    """Design matrix: 1, per-coordinate powers up to degree, pairwise products
    when cross_degree >= 2."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    m, d = states.shape
    cols = [np.ones(m)]
    for j in range(d):
        b = states[:, j]
        p = b.copy()
        for _ in range(degree):
            cols.append(p.copy())
            p = p * b
    if cross_degree >= 2 and d > 1:
        for i in range(d):
            for j in range(i + 1, d):
                cols.append(states[:, i] * states[:, j])
    return np.column_stack(cols)


class _StepRegression:
    """Ridge least squares at one time step, with column scaling for
    conditioning and coefficients reported in the raw feature space."""

    def __init__(self, features: np.ndarray, ridge: float):
        self.scale = np.maximum(features.std(axis=0), 1e-12)
        self.scale[0] = 1.0
        self.x = features / self.scale
        gram = self.x.T @ self.x
        eigs = np.linalg.eigvalsh(gram)
        self.rank_deficient = bool(eigs[0] < 1e-12 * max(eigs[-1], 1.0))
        if self.rank_deficient and ridge <= 0.0:
            raise RegressionRankError(
                f"regression basis is rank deficient (eig ratio {eigs[0]:.2e}/{eigs[-1]:.2e}) "
                "and ridge is disabled"
            )
        self.gram = gram + ridge * np.eye(gram.shape[0])

    def fit(self, targets: np.ndarray) -> np.ndarray:
        """Raw-space coefficients for one or more target columns."""
        rhs = self.x.T @ targets
        coef = np.linalg.solve(self.gram, rhs)
        if coef.ndim == 1:
            return coef / self.scale
        return coef / self.scale[:, None]

    def fitted(self, targets: np.ndarray) -> np.ndarray:
        coef = np.linalg.solve(self.gram, self.x.T @ targets)
        out = self.x @ coef
        # a conditional expectation never leaves the range of its targets;
        # values outside are edge-of-support extrapolation artifacts
        return np.clip(out, targets.min(axis=0), targets.max(axis=0))


class _TreeRegression:
    """Exact conditional expectations by grouping paths on walk nodes.

    Group means use math.fsum so they are correctly rounded; combined with
    integer-scaled node values this reproduces recombining-tree induction to
    rounding level.
    """

    def __init__(self, keys: np.ndarray):
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        boundaries = np.flatnonzero(np.diff(sorted_keys)) + 1
        self.order = order
        self.slices = np.concatenate([[0], boundaries, [keys.size]])
        self.inverse = np.empty(keys.size, dtype=np.int64)
        for gi in range(self.slices.size - 1):
            self.inverse[order[self.slices[gi] : self.slices[gi + 1]]] = gi
        self.rank_deficient = False

    def _group_means(self, values: np.ndarray) -> np.ndarray:
        ordered = values[self.order]
        out = np.empty(self.slices.size - 1)
        for gi in range(out.size):
            lo, hi = self.slices[gi], self.slices[gi + 1]
            out[gi] = math.fsum(ordered[lo:hi]) / (hi - lo)
        return out

    def fit(self, targets: np.ndarray) -> None:
        return None

    def fitted(self, targets: np.ndarray) -> np.ndarray:
        if targets.ndim == 1:
            return self._group_means(targets)[self.inverse]
        return np.column_stack(
            [self._group_means(targets[:, j])[self.inverse] for j in range(targets.shape[1])]
        )


def _clip_rows(z: np.ndarray, radius: float) -> tuple[np.ndarray, int]:
    norms = np.linalg.norm(z, axis=-1)
    over = norms > radius
    n_over = int(np.sum(over))
    if n_over == 0:
        return z, 0
    factor = np.where(over, radius / np.maximum(norms, 1e-300), 1.0)
    return z * factor[..., None], n_over


# ---------------------------------------------------------------------------
# solution container


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Solved (Y, Z) with the scheme snapshot and per-step diagnostics.

    z_coefficients maps the raw polynomial basis at step k to the fitted Z
    field (None in tree mode); state_bounds are the per-step coordinate
    ranges the fit saw, used to keep later evaluations inside the data.
    """

    Y: np.ndarray
    Z: np.ndarray
    scheme: dict
    residuals: dict
    y0: float
    y0_se: float
    z_coefficients: list | None
    state_bounds: list | None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# estimator


class BsdeSolver(BaseEstimator):
    """Backward LSMC solver configured like an estimator: fit(ensemble) sets
    Y_, Z_, y0_, solution_.

    conditional_expectation "regression" uses the polynomial basis;
    "tree" expects a d=1 exhaustive sign-walk ensemble (rademacher_ensemble)
    and computes exact group conditional expectations.
    """

    def __init__(
        self,
        generator: GeneratorSpec | None = None,
        terminal: TerminalSpec | None = None,
        basis_degree: int = 4,
        cross_degree: int = 2,
        ridge: float = 1e-10,
        truncation_radius: float | None = None,
        picard_sweeps: int = 2,
        picard_tol: float = 1e-10,
        damping: float = 0.0,
        implicit_z: bool = True,
        state_winsor: float | None = None,
        conditional_expectation: str = "regression",
    ):
        self.generator = generator
        self.terminal = terminal
        self.basis_degree = basis_degree
        self.cross_degree = cross_degree
        self.ridge = ridge
        self.truncation_radius = truncation_radius
        self.picard_sweeps = picard_sweeps
        self.picard_tol = picard_tol
        self.damping = damping
        self.implicit_z = implicit_z
        self.state_winsor = state_winsor
        self.conditional_expectation = conditional_expectation

    # -- validation -----------------------------------------------------

    def _validate(self, ens: PathEnsemble):
        if self.generator is None or self.terminal is None:
            raise ConfigurationError("solver needs both a generator and a terminal")
        if not isinstance(ens, PathEnsemble):
            raise ConfigurationError(f"fit expects a PathEnsemble, got {type(ens).__name__}")
        check_int("basis_degree", self.basis_degree, minimum=1)
        check_int("cross_degree", self.cross_degree, minimum=0)
        check_positive("ridge", self.ridge, allow_zero=True)
        check_int("picard_sweeps", self.picard_sweeps, minimum=1)
        check_positive("picard_tol", self.picard_tol)
        if not (0.0 <= self.damping < 1.0):
            raise ConfigurationError(f"damping must lie in [0, 1), got {self.damping}")
        if self.truncation_radius is not None:
            check_positive("truncation_radius", self.truncation_radius)
        if self.state_winsor is not None and not (0.0 < self.state_winsor < 0.5):
            raise ConfigurationError(
                f"state_winsor must be a quantile in (0, 0.5), got {self.state_winsor}"
            )
        if self.conditional_expectation not in ("regression", "tree"):
            raise ConfigurationError(
                f"conditional_expectation must be 'regression' or 'tree', "
                f"got {self.conditional_expectation!r}"
            )
        if self.conditional_expectation == "tree":
            if ens.dim != 1:
                raise ConfigurationError("tree conditional expectations need d = 1")
            dt = ens.grid.dt
            if np.max(dt) - np.min(dt) > 1e-12:
                raise ConfigurationError("tree conditional expectations need a uniform grid")

    def _radius_heuristic(self, xi: np.ndarray, ens: PathEnsemble) -> np.ndarray:
        """Per-step clip radius sqrt(2 (|Y|_inf + int alpha)/(gamma dt))."""
        if self.truncation_radius is not None:
            return np.full(ens.grid.n_steps, float(self.truncation_radius))
        gen = self.generator
        alpha_sum = np.zeros(ens.n_paths)
        for k in range(ens.grid.n_steps):
            a = np.asarray(gen.alpha(float(ens.grid.nodes[k]), ens.paths[:, k, :]), dtype=float)
            alpha_sum += np.broadcast_to(a, (ens.n_paths,)) * ens.grid.dt[k]
        base = float(np.quantile(np.abs(xi), 0.999)) + float(np.quantile(alpha_sum, 0.999)) + 1.0
        return np.sqrt(2.0 * base / (gen.gamma * ens.grid.dt))

    # -- core backward pass ---------------------------------------------

    def _backward_pass(
        self,
        ens: PathEnsemble,
        xi: np.ndarray,
        radii: np.ndarray,
        warm_z: np.ndarray | None = None,
    ):
        gen = self.generator
        paths = ens.paths
        m, n_nodes, d = paths.shape
        n_steps = n_nodes - 1
        dt = ens.grid.dt
        nodes = ens.grid.nodes
        tree = self.conditional_expectation == "tree"
        step_width = np.sqrt(dt[0]) if tree else None

        y = np.empty((m, n_nodes))
        y[:, n_steps] = xi
        z_out = np.zeros((m, n_steps, d))
        z_gaps = np.zeros(n_steps)
        sweeps_used = np.zeros(n_steps, dtype=int)
        rmse = np.zeros(n_steps)
        clip_events = 0
        clip_total = 0
        rank_warnings = 0
        z_coefs: list = [None] * n_steps
        bounds: list = [None] * n_steps

        for k in range(n_steps - 1, -1, -1):
            b_k = paths[:, k, :]
            t_k = float(nodes[k])
            if tree:
                keys = np.rint(paths[:, k, 0] / step_width).astype(np.int64)
                reg = _TreeRegression(keys)
                next_keys = np.rint(paths[:, k + 1, 0] / step_width).astype(np.int64)
                db = ((next_keys - keys).astype(float) * step_width)[:, None]
                winsor_box = None
            else:
                if self.state_winsor is not None and k > 0:
                    # cap the leverage of edge states on high-degree bases
                    winsor_box = (
                        np.quantile(b_k, self.state_winsor, axis=0),
                        np.quantile(b_k, 1.0 - self.state_winsor, axis=0),
                    )
                    b_basis = np.clip(b_k, winsor_box[0], winsor_box[1])
                else:
                    winsor_box = None
                    b_basis = b_k
                reg = _StepRegression(
                    polynomial_basis(b_basis, self.basis_degree, self.cross_degree), self.ridge
                )
                db = paths[:, k + 1, :] - b_k
            if reg.rank_deficient:
                rank_warnings += 1

            y_next = y[:, k + 1]
            ce_y = reg.fitted(y_next)
            if tree:
                # exact group means need no variance reduction
                z_base = y_next
            else:
                # control variate: the fitted part is measurable at t_k, so
                # regressing the residual times dB keeps the estimand while
                # cutting the 1/dt noise amplification by a factor of order dt
                z_base = y_next - ce_y
            targets = z_base[:, None] * db
            fitted = reg.fitted(targets)
            z = -fitted / dt[k]
            z, n_clip = _clip_rows(z, radii[k])
            clip_total += m
            clip_events += n_clip

            gap = np.inf
            if warm_z is not None:
                z_prev = warm_z[:, k, :]
                z_prev, nc = _clip_rows(z_prev, radii[k])
                clip_events += nc
                clip_total += m
                z = z_prev

            if self.implicit_z:
                for sweep in range(self.picard_sweeps):
                    g_val = np.asarray(gen.total(t_k, b_k, z), dtype=float)
                    corrected = (z_base - g_val * dt[k])[:, None] * db
                    fitted = reg.fitted(corrected)
                    z_new = -fitted / dt[k]
                    z_new, n_clip = _clip_rows(z_new, radii[k])
                    clip_total += m
                    clip_events += n_clip
                    if self.damping > 0.0:
                        z_new = (1.0 - self.damping) * z_new + self.damping * z
                    gap = float(np.max(np.linalg.norm(z_new - z, axis=-1)))
                    z = z_new
                    sweeps_used[k] = sweep + 1
                    if gap <= self.picard_tol * (1.0 + float(np.max(np.abs(y_next)))):
                        break
            z_gaps[k] = 0.0 if not self.implicit_z else gap

            g_val = np.asarray(gen.total(t_k, b_k, z), dtype=float)
            y[:, k] = ce_y - g_val * dt[k]
            z_out[:, k, :] = z
            rmse[k] = float(np.sqrt(np.mean((y_next - ce_y) ** 2)))
            if not tree:
                final_coef = reg.fit(
                    (z_base - g_val * dt[k])[:, None] * db if self.implicit_z else targets
                )
                z_coefs[k] = -np.atleast_2d(final_coef) / dt[k]
                if winsor_box is not None:
                    bounds[k] = winsor_box
                else:
                    bounds[k] = (
                        np.quantile(b_k, 0.001, axis=0),
                        np.quantile(b_k, 0.999, axis=0),
                    )

        residuals = {
            "z_gap": z_gaps,
            "regression_rmse": rmse,
            "picard_sweeps": sweeps_used,
            "clip_fraction": clip_events / max(clip_total, 1),
            "rank_warnings": rank_warnings,
            "truncation_warning": clip_events / max(clip_total, 1) > 0.10,
        }
        return y, z_out, residuals, z_coefs, bounds

    # -- public API ------------------------------------------------------

    def fit(self, ensemble: PathEnsemble, warm_z: np.ndarray | None = None) -> "BsdeSolver":
        self._validate(ensemble)
        xi = self.terminal(ensemble)
        if xi.shape != (ensemble.n_paths,):
            raise ConfigurationError(
                f"terminal produced shape {xi.shape}, expected ({ensemble.n_paths},)"
            )
        if not np.all(np.isfinite(xi)):
            raise ConfigurationError("terminal values are not finite on this ensemble")
        radii = self._radius_heuristic(xi, ensemble)
        y, z, residuals, z_coefs, bounds = self._backward_pass(ensemble, xi, radii, warm_z)

        dt = ensemble.grid.dt
        y0 = float(np.mean(y[:, 0]))
        y0_se = float(np.std(y[:, 1]) / np.sqrt(ensemble.n_paths)) if ensemble.grid.n_steps else 0.0
        z_sq = np.sum(np.sum(z * z, axis=2) * dt[None, :], axis=1)
        diagnostics = {
            "sup_abs_y": float(np.max(np.abs(y))),
            "sup_abs_y_p99": float(np.quantile(np.max(np.abs(y), axis=1), 0.99)),
            "z_l2_mean": float(np.mean(np.sqrt(z_sq))),
            "z_l2_p99": float(np.quantile(np.sqrt(z_sq), 0.99)),
            "y0_standard_error": y0_se,
            "truncation_radii": radii,
        }
        self.Y_ = y
        self.Z_ = z
        self.y0_ = y0
        self.residuals_ = residuals
        self.solution_ = BsdeSolution(
            Y=y,
            Z=z,
            scheme=self.get_params(deep=False),
            residuals=residuals,
            y0=y0,
            y0_se=y0_se,
            z_coefficients=None if self.conditional_expectation == "tree" else z_coefs,
            state_bounds=None if self.conditional_expectation == "tree" else bounds,
            diagnostics=diagnostics,
        )
        return self

    def predict(self, node: int = 0) -> np.ndarray:
        """Per-path Y values at a grid node of the fitted solution."""
        check_is_fitted(self, "Y_")
        return self.Y_[:, node]


def solve(
    gen: GeneratorSpec,
    terminal: TerminalSpec,
    ens: PathEnsemble,
    **scheme,
) -> BsdeSolution:
    """One-call wrapper around BsdeSolver(...).fit(ens)."""
    solver = BsdeSolver(generator=gen, terminal=terminal, **scheme)
    return solver.fit(ens).solution_


# ---------------------------------------------------------------------------
# dual solves


def _control_tag(label: str) -> int:
    return crc32(label.encode("utf-8"))


def solve_dual(
    gen: GeneratorSpec,
    handle: ConjugateHandle,
    terminal: TerminalSpec,
    ens: PathEnsemble,
    ctrl: ControlProcess,
    threads: int = 1,
    **scheme,
) -> BsdeSolution:
    """Solve the controlled BSDE Y^q = xi + int (f1(q) - g2(Z)) ds + int Z dB^q.

    For a Markov control the dynamics are re-simulated: fresh Q-Brownian
    increments drive the controlled state B_{k+1} = B_k + q dt + dB^q, and the
    coefficients read the controlled state.  When g2 vanishes the whole value
    is a conditional expectation and no Z regression is needed.  Non-Markov
    controls fall back to likelihood reweighting on the original ensemble.
    """
    if ctrl.markov:
        tag = _control_tag(ctrl.label)
        child_seed = int(np.random.SeedSequence([ens.seed, tag]).generate_state(1)[0])
        fresh = simulate(ens.grid, ens.dim, ens.n_paths, seed=child_seed, threads=threads)
        m, n_nodes, d = fresh.paths.shape
        state = np.empty_like(fresh.paths)
        state[:, 0, :] = 0.0
        dt = ens.grid.dt
        q_vals = np.empty((m, n_nodes - 1, d))
        for k in range(n_nodes - 1):
            qk = np.asarray(ctrl.q(float(ens.grid.nodes[k]), state[:, k, :]), dtype=float)
            qk = np.broadcast_to(qk, (m, d))
            q_vals[:, k, :] = qk
            state[:, k + 1, :] = (
                state[:, k, :] + qk * dt[k] + (fresh.paths[:, k + 1, :] - fresh.paths[:, k, :])
            )
        controlled = PathEnsemble(grid=ens.grid, paths=state, seed=child_seed,
                                  rng_scheme=ens.rng_scheme + "+drift")
        return _solve_dual_on(
            gen, handle, terminal, controlled, fresh.increments, q_vals, weights=None, **scheme
        )

    # reweighting fallback: Q-expectations via terminal likelihood ratios
    m, n_nodes, d = ens.paths.shape
    q_vals = np.empty((m, n_nodes - 1, d))
    shifted_inc = np.empty((m, n_nodes - 1, d))
    dt = ens.grid.dt
    for k in range(n_nodes - 1):
        qk = np.asarray(ctrl.q(float(ens.grid.nodes[k]), ens.paths[:, k, :]), dtype=float)
        q_vals[:, k, :] = np.broadcast_to(qk, (m, d))
        shifted_inc[:, k, :] = ens.paths[:, k + 1, :] - ens.paths[:, k, :] - q_vals[:, k, :] * dt[k]
    log_w = ctrl.terminal_log_weights[:, None] - ctrl.log_weights
    weights = np.exp(np.minimum(log_w, 700.0))
    return _solve_dual_on(gen, handle, terminal, ens, shifted_inc, q_vals, weights=weights, **scheme)


def _solve_dual_on(
    gen: GeneratorSpec,
    handle: ConjugateHandle,
    terminal: TerminalSpec,
    ens: PathEnsemble,
    q_brownian_inc: np.ndarray,
    q_vals: np.ndarray,
    weights: np.ndarray | None,
    **scheme,
) -> BsdeSolution:
    """Backward pass for the dual problem on given controlled dynamics."""
    params = dict(
        basis_degree=scheme.get("basis_degree", 4),
        cross_degree=scheme.get("cross_degree", 2),
        ridge=scheme.get("ridge", 1e-10),
        picard_sweeps=scheme.get("picard_sweeps", 2),
        picard_tol=scheme.get("picard_tol", 1e-10),
        damping=scheme.get("damping", 0.0),
        implicit_z=scheme.get("implicit_z", True),
        truncation_radius=scheme.get("truncation_radius"),
    )
    paths = ens.paths
    m, n_nodes, d = paths.shape
    n_steps = n_nodes - 1
    dt = ens.grid.dt
    nodes = ens.grid.nodes
    xi = np.asarray(terminal.functional(paths, ens.grid), dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ConfigurationError("terminal values are not finite on the controlled ensemble")

    f1 = np.empty((m, n_steps))
    for k in range(n_steps):
        if handle.analytic_form is None:
            # numeric transform works one state row at a time
            for i in range(m):
                f1[i, k] = float(
                    transform(handle, float(nodes[k]), paths[i, k, :], q_vals[i, k, :])
                )
        else:
            val = np.asarray(
                transform(handle, float(nodes[k]), paths[:, k, :], q_vals[:, k, :]), dtype=float
            )
            f1[:, k] = np.broadcast_to(val, (m,))
    if not np.all(np.isfinite(f1)):
        raise ConfigurationError("f1 evaluation diverged along a controlled path")

    y = np.empty((m, n_nodes))
    y[:, n_steps] = xi
    z_out = np.zeros((m, n_steps, d))
    rmse = np.zeros(n_steps)
    fast = gen.g2 is None

    if fast:
        # Y_k = E^Q[ xi + sum_{j>=k} f1_j dt | state_k ]; regression only on Y
        running = xi.copy()
        for k in range(n_steps - 1, -1, -1):
            running = running + f1[:, k] * dt[k]
            reg = _make_reg(paths[:, k, :], params, weights, k)
            fitted = reg.fitted(running)
            y[:, k] = fitted
            rmse[k] = float(np.sqrt(np.mean((running - fitted) ** 2)))
        w0 = weights[:, 0] if weights is not None else None
        y0 = float(np.average(running, weights=w0)) if w0 is not None else float(np.mean(running))
        y[:, 0] = y0
        y0_se = _weighted_se(running, w0)
    else:
        gamma = gen.gamma
        radius = scheme.get("truncation_radius")
        base = float(np.quantile(np.abs(xi), 0.999)) + float(np.quantile(np.abs(f1).sum(axis=1) * dt[0], 0.999)) + 1.0
        radii = (
            np.full(n_steps, float(radius))
            if radius is not None
            else np.sqrt(2.0 * base / (gamma * dt))
        )
        for k in range(n_steps - 1, -1, -1):
            b_k = paths[:, k, :]
            t_k = float(nodes[k])
            reg = _make_reg(b_k, params, weights, k)
            db = q_brownian_inc[:, k, :]
            y_next = y[:, k + 1]
            ce_y = reg.fitted(y_next)
            z_base = y_next - ce_y
            fitted = reg.fitted(z_base[:, None] * db)
            z = -fitted / dt[k]
            z, _ = _clip_rows(z, radii[k])
            for _ in range(params["picard_sweeps"] if params["implicit_z"] else 0):
                driver = np.asarray(gen.perturbation(t_k, b_k, z), dtype=float) - f1[:, k]
                corrected = (z_base - driver * dt[k])[:, None] * db
                z_new = -reg.fitted(corrected) / dt[k]
                z_new, _ = _clip_rows(z_new, radii[k])
                gap = float(np.max(np.linalg.norm(z_new - z, axis=-1)))
                z = z_new
                if gap <= params["picard_tol"] * (1.0 + float(np.max(np.abs(y_next)))):
                    break
            driver = np.asarray(gen.perturbation(t_k, b_k, z), dtype=float) - f1[:, k]
            y[:, k] = ce_y - driver * dt[k]
            z_out[:, k, :] = z
            rmse[k] = float(np.sqrt(np.mean((y_next - ce_y) ** 2)))
        y0 = float(np.mean(y[:, 0])) if weights is None else float(
            np.average(y[:, 0], weights=weights[:, 0])
        )
        y0_se = _weighted_se(y[:, 1], None if weights is None else weights[:, 1])

    residuals = {"regression_rmse": rmse, "fast_path": fast}
    return BsdeSolution(
        Y=y,
        Z=z_out,
        scheme={**params, "dual": True, "fast_path": fast},
        residuals=residuals,
        y0=y0,
        y0_se=y0_se,
        z_coefficients=None,
        state_bounds=None,
        diagnostics={"f1_mean": float(np.mean(f1)), "weighted": weights is not None},
    )


def _make_reg(states, params, weights, step):
    feats = polynomial_basis(states, params["basis_degree"], params["cross_degree"])
    if weights is not None:
        w = np.sqrt(weights[:, step] if weights.ndim == 2 else weights)
        feats = feats * w[:, None]

        class _W:
            rank_deficient = False

            def __init__(self, x, ridge):
                self._reg = _StepRegression(x, ridge)
                self._w = w

            def fitted(self, targets):
                t = targets * (self._w[:, None] if targets.ndim == 2 else self._w)
                out = self._reg.fitted(t)
                return out / (self._w[:, None] if out.ndim == 2 else self._w)

        return _W(feats, params["ridge"])
    return _StepRegression(feats, params["ridge"])


def _weighted_se(x: np.ndarray, weights: np.ndarray | None) -> float:
    if weights is None:
        return float(np.std(x) / np.sqrt(x.size))
    mean = float(np.average(x, weights=weights))
    resid = weights * (x - mean)
    return float(np.sqrt(np.sum(resid * resid)) / max(np.sum(weights), 1e-300))


# ---------------------------------------------------------------------------
# warm-started refinement


def picard_refine(
    solution: BsdeSolution,
    gen: GeneratorSpec,
    terminal: TerminalSpec,
    ens: PathEnsemble,
    iterations: int = 3,
) -> BsdeSolution:
    """Re-run the backward pass warm-starting each step's Z from the previous
    solution; raises if the inter-pass gap grows three times in a row."""
    check_int("iterations", iterations, minimum=1)
    params = {
        k: v
        for k, v in solution.scheme.items()
        if k
        in (
            "basis_degree",
            "cross_degree",
            "ridge",
            "truncation_radius",
            "picard_sweeps",
            "picard_tol",
            "damping",
            "implicit_z",
            "state_winsor",
            "conditional_expectation",
        )
    }
    current = solution
    gaps = []
    grow = 0
    for _ in range(iterations):
        solver = BsdeSolver(generator=gen, terminal=terminal, **params)
        refined = solver.fit(ens, warm_z=current.Z).solution_
        gap = float(np.max(np.abs(refined.Y - current.Y)))
        gaps.append(gap)
        if len(gaps) >= 2 and gap > gaps[-2]:
            grow += 1
            if grow >= 3:
                raise PicardDivergenceError(
                    f"refinement gap grew three passes in a row, last gap {gap:.3e}"
                )
        else:
            grow = 0
        current = refined
        if gap <= solution.scheme.get("picard_tol", 1e-10) * (1.0 + abs(current.y0)):
            break
    contraction = [
        gaps[i + 1] / gaps[i] if gaps[i] > 0 else 0.0 for i in range(len(gaps) - 1)
    ]
    residuals = dict(current.residuals)
    residuals["refine_gaps"] = gaps
    residuals["contraction_factors"] = contraction
    return BsdeSolution(
        Y=current.Y,
        Z=current.Z,
        scheme=current.scheme,
        residuals=residuals,
        y0=current.y0,
        y0_se=current.y0_se,
        z_coefficients=current.z_coefficients,
        state_bounds=current.state_bounds,
        diagnostics=current.diagnostics,
    )
