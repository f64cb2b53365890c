"""Convex conjugates of g1, subgradients, and the K/Psi/Phi/Lambda majorants.

The conjugate f1(t, b, q) = sup_z (q.z - g1(t, b, z)) is exact for registered
families and a certified numeric search otherwise.  Subgradients use the
radial limit from below at kinks so downstream control extraction is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize, minimize_scalar
from scipy.special import xlogy

from .exceptions import (
    ConfigurationError,
    NonConvexityError,
    TransformDivergenceError,
)
from .generators import (
    CheckReport,
    GeneratorSpec,
    Probe,
    Witness,
    fd_gradient,
    radial_slope_below,
)
from .validation import check_positive

__all__ = [
    "SearchConfig",
    "ConjugateHandle",
    "conjugate_handle",
    "transform",
    "transform_with_argmax",
    "subgradient",
    "subgradient_field",
    "conjugate_lower_bound_check",
    "fenchel_inequality_check",
    "fenchel_young_check",
    "MajorantFamily",
    "lambda_superlinearity_check",
]

_ANALYTIC_FAMILIES = ("quadratic", "quadratic_minus_norm", "gtilde")


@dataclass(frozen=True)
class SearchConfig:
    initial_radius: float = 4.0
    expansion: float = 2.0
    tol: float = 1e-9
    max_iter: int = 40


@dataclass(frozen=True, eq=False)
class ConjugateHandle:
    """Evaluation handle for f1: analytic when the family is registered,
    expanding certified search otherwise."""

    source: GeneratorSpec
    analytic_form: str | None
    search: SearchConfig = field(default_factory=SearchConfig)


def conjugate_handle(gen: GeneratorSpec, search: SearchConfig | None = None) -> ConjugateHandle:
    analytic = gen.family if gen.family in _ANALYTIC_FAMILIES else None
    return ConjugateHandle(source=gen, analytic_form=analytic, search=search or SearchConfig())


# ---------------------------------------------------------------------------
# transform


def _analytic_f1(handle: ConjugateHandle, t: float, b: np.ndarray, q: np.ndarray):
    gen = handle.source
    q = np.asarray(q, dtype=float)
    r = np.linalg.norm(q, axis=-1)
    params = gen.family_params
    offset = params.get("offset")
    off = np.asarray(offset(t, b), dtype=float) if offset is not None else 0.0

    if handle.analytic_form == "quadratic":
        coef = np.asarray(params["coef"](t, b), dtype=float)
        if np.any(coef <= 0):
            raise TransformDivergenceError(
                "quadratic family with nonpositive coefficient has no finite conjugate off q=0"
            )
        return r * r / (4.0 * coef) - off

    if handle.analytic_form == "quadratic_minus_norm":
        return 0.5 * (r + 1.0) ** 2 - off

    if handle.analytic_form == "gtilde":
        m = np.floor(0.5 * (r + 1.0))
        return m * r - m * m - off

    raise ConfigurationError(f"no analytic conjugate for {handle.analytic_form!r}")


def _analytic_argmax(handle: ConjugateHandle, t: float, b: np.ndarray, q: np.ndarray):
    gen = handle.source
    q = np.asarray(q, dtype=float)
    r = np.linalg.norm(q, axis=-1, keepdims=True)
    qhat = np.where(r > 0, q / np.maximum(r, 1e-300), 0.0)
    if handle.analytic_form == "quadratic":
        coef = float(np.asarray(gen.family_params["coef"](t, b), dtype=float).ravel()[0])
        return q / (2.0 * coef)
    if handle.analytic_form == "quadratic_minus_norm":
        return (r + 1.0) * qhat
    if handle.analytic_form == "gtilde":
        m = np.floor(0.5 * (r + 1.0))
        return m * qhat
    raise ConfigurationError(f"no analytic argmax for {handle.analytic_form!r}")


def _numeric_transform(handle: ConjugateHandle, t: float, b: np.ndarray, qvec: np.ndarray):
    """Expanding search for sup_z q.z - g1(z) with a stopping certificate.

    With a declared gamma_bar the certificate is the exact quadratic envelope
    bound; otherwise a sampled-direction slope bound is used, which certifies
    the probed rays only.
    """
    gen = handle.source
    sc = handle.search
    d = qvec.size
    qn = float(np.linalg.norm(qvec))
    qhat = qvec / qn if qn > 0 else np.eye(d)[0]
    rng = np.random.default_rng(0)
    dirs = [qhat, -qhat]
    for _ in range(min(2 * d, 8)):
        v = rng.standard_normal(d)
        dirs.append(v / np.linalg.norm(v))

    def objective(zrows):
        zrows = np.atleast_2d(zrows)
        return zrows @ qvec - np.asarray(gen.g1(t, b[None, :], zrows), dtype=float)

    def g1_of(zrows):
        return np.asarray(gen.g1(t, b[None, :], np.atleast_2d(zrows)), dtype=float)

    radius = sc.initial_radius
    best_val = float(objective(np.zeros((1, d)))[0])
    best_z = np.zeros(d)
    alpha_here = float(np.asarray(gen.alpha(t, b[None, :]), dtype=float).ravel()[0])
    for _ in range(sc.max_iter):
        rr = np.linspace(0.0, radius, 161)[1:]
        for e in dirs:
            zs = rr[:, None] * e[None, :]
            vals = objective(zs)
            i = int(np.argmax(vals))
            if vals[i] > best_val:
                best_val, best_z = float(vals[i]), zs[i]
            # midpoint convexity spot check on the scanned ray
            g = g1_of(zs)
            mid = g1_of(0.5 * (zs[:-2] + zs[2:]))
            slack = 1e-9 * (1.0 + np.abs(g[:-2]) + np.abs(g[2:]))
            if np.any(mid > 0.5 * (g[:-2] + g[2:]) + slack):
                j = int(np.argmax(mid - 0.5 * (g[:-2] + g[2:])))
                raise NonConvexityError(
                    f"midpoint convexity violated along ray {e} near |z|={rr[j + 1]:.3g}"
                )
        if gen.gamma_bar is not None:
            gb = gen.gamma_bar
            r_star = qn / gb
            tail = (
                qn * r_star - 0.5 * gb * r_star**2 + alpha_here
                if r_star > radius
                else qn * radius - 0.5 * gb * radius**2 + alpha_here
            )
            if tail <= best_val + sc.tol:
                break
        else:
            half = 0.5 * radius
            slopes = [
                float((g1_of(radius * e) - g1_of(half * e)).ravel()[0]) / half for e in dirs
            ]
            if min(slopes) >= qn + 1e-6:
                break
        radius *= sc.expansion
    else:
        raise TransformDivergenceError(
            f"conjugate search not certifiable within radius {radius:.3g} at q={qvec}"
        )

    # refine: radial line search along the best direction, then a full polish
    bn = np.linalg.norm(best_z)
    e = best_z / bn if bn > 0 else qhat
    res = minimize_scalar(
        lambda r: -float(objective(r * e[None, :])[0]),
        bounds=(0.0, radius),
        method="bounded",
        options={"xatol": sc.tol},
    )
    if -res.fun > best_val:
        best_val, best_z = -float(res.fun), float(res.x) * e
    res = minimize(
        lambda zz: -float(objective(zz[None, :])[0]),
        best_z,
        method="Nelder-Mead",
        options={"xatol": sc.tol, "fatol": sc.tol, "maxiter": 400},
    )
    if -res.fun > best_val:
        best_val, best_z = -float(res.fun), np.asarray(res.x)
    return best_val, best_z


def transform(handle: ConjugateHandle, t: float, state: np.ndarray, q: np.ndarray):
    """f1(t, state, q); vectorised over leading axes of q for analytic forms."""
    state = np.asarray(state, dtype=float)
    q = np.asarray(q, dtype=float)
    if handle.analytic_form is not None:
        return _analytic_f1(handle, t, state, q)
    single = q.ndim == 1
    rows = np.atleast_2d(q)
    state_row = np.atleast_2d(state)[0]
    out = np.array([_numeric_transform(handle, t, state_row, row)[0] for row in rows])
    return float(out[0]) if single else out.reshape(q.shape[:-1])


def transform_with_argmax(handle: ConjugateHandle, t: float, state: np.ndarray, q: np.ndarray):
    """(f1 value, maximizer z*) at a single q."""
    state = np.asarray(state, dtype=float)
    q = np.asarray(q, dtype=float)
    if handle.analytic_form is not None:
        val = _analytic_f1(handle, t, state, q)
        zstar = _analytic_argmax(handle, t, state, q)
        return val, zstar
    return _numeric_transform(handle, t, np.atleast_2d(state)[0], q)


# ---------------------------------------------------------------------------
# subgradients


def subgradient(
    gen: GeneratorSpec,
    t: float,
    state: np.ndarray,
    z: np.ndarray,
    n_probe: int = 64,
    seed: int = 0,
    tol: float = 1e-8,
) -> np.ndarray:
    """A subgradient of g1 at z, spot-verified against random probe points.

    At kinks the representative is the radial limit from below.  If the
    inequality fails on a probe the function raises, which is also how the
    empty-subdifferential region of the quadratic_minus_norm family surfaces.
    """
    state = np.asarray(state, dtype=float)
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    if gen.family is not None:
        # scale before squaring: |z| near 1e-160 squares into the subnormal
        # range and the naive norm then misstates the direction z / |z|
        m = float(np.max(np.abs(z)))
        r = m * float(np.linalg.norm(z / m)) if m > 0 else 0.0
        slope, _ = radial_slope_below(gen, t, state[None, :], np.array([r]))
        slope = float(np.asarray(slope).ravel()[0])
        u = slope * (z / m) / (r / m) if r > 0 else np.zeros(d)
    else:
        u = fd_gradient(gen.g1, t, state[None, :], z[None, :])[0]

    rng = np.random.default_rng(seed)
    scale = 1.0 + float(np.linalg.norm(z))
    probes = np.vstack(
        [
            rng.standard_normal((n_probe, d)) * scale,
            z[None, :] * np.linspace(0.0, 2.0, 9)[:, None],
        ]
    )
    g_z = float(np.asarray(gen.g1(t, state[None, :], z[None, :])).ravel()[0])
    g_p = np.asarray(gen.g1(t, state[None, :], probes), dtype=float)
    gap = g_p - g_z - (probes - z) @ u
    slack = tol * (1.0 + np.abs(g_p) + abs(g_z))
    if np.any(gap < -slack):
        i = int(np.argmin(gap))
        raise NonConvexityError(
            f"subgradient inequality fails at z={z.tolist()} against probe "
            f"{probes[i].tolist()} (gap {gap[i]:.3e}); the subdifferential may be empty here"
        )
    return u


def subgradient_field(gen: GeneratorSpec, t: float, states: np.ndarray, z: np.ndarray):
    """Vectorised subgradient representatives over (M, d) rows plus a mask
    marking rows where the subdifferential is genuinely nonempty."""
    states = np.asarray(states, dtype=float)
    z = np.asarray(z, dtype=float)
    if gen.family is not None:
        r = np.linalg.norm(z, axis=-1)
        slope, valid = radial_slope_below(gen, t, states, r)
        slope = np.broadcast_to(np.asarray(slope, dtype=float), r.shape)
        u = np.where(r[..., None] > 0, slope[..., None] * z / np.maximum(r, 1e-300)[..., None], 0.0)
        return u, np.broadcast_to(valid, r.shape)
    u = fd_gradient(gen.g1, t, states, z)
    return u, np.ones(z.shape[:-1], dtype=bool)


# ---------------------------------------------------------------------------
# inequality checks


def conjugate_lower_bound_check(
    handle: ConjugateHandle,
    probe: Probe | None = None,
    dim: int = 1,
    rtol: float = 1e-9,
    atol: float = 1e-9,
) -> CheckReport:
    """Verify f1(t, b, q) >= -alpha(t, b) + |q|^2/(2 gamma) on sampled q."""
    gen = handle.source
    probe = probe or Probe()
    rng = np.random.default_rng(probe.seed)
    states = probe.state_rows(dim, rng)
    qs = probe.z_ball(dim, rng)
    r2 = np.sum(qs * qs, axis=-1)

    witnesses: list[Witness] = []
    samples = 0
    all_ok = True
    min_margin = np.inf
    tight = None
    for t in probe.times:
        for b_row in states:
            brow = b_row[None, :]
            lhs = np.broadcast_to(
                np.asarray(transform(handle, t, brow, qs), dtype=float), r2.shape
            )
            rhs = np.broadcast_to(
                -np.asarray(gen.alpha(t, brow), dtype=float) + r2 / (2.0 * gen.gamma), r2.shape
            )
            samples += lhs.size
            margins = lhs - rhs
            min_margin = min(min_margin, float(np.min(margins)))
            bad = lhs < rhs - (atol + rtol * np.maximum(np.abs(lhs), np.abs(rhs)))
            if np.any(bad):
                all_ok = False
                for i in np.nonzero(bad)[0][np.argsort(margins[np.nonzero(bad)[0]])][:4]:
                    witnesses.append(
                        Witness(
                            "conjugate_lower_bound",
                            {"t": float(t), "b": b_row.tolist(), "q": qs[i].tolist()},
                            float(lhs[i]),
                            float(rhs[i]),
                            True,
                        )
                    )
            else:
                i = int(np.argmin(margins))
                cand = Witness(
                    "conjugate_lower_bound",
                    {"t": float(t), "b": b_row.tolist(), "q": qs[i].tolist()},
                    float(lhs[i]),
                    float(rhs[i]),
                    False,
                )
                if tight is None or (cand.lhs - cand.rhs) < (tight.lhs - tight.rhs):
                    tight = cand
    if all_ok and tight is not None:
        witnesses = [tight]
    return CheckReport(
        passed=all_ok,
        witnesses=witnesses[:16],
        samples_used=samples,
        sampling_radius=probe.radius,
        details={"min_margin": min_margin},
    )


def fenchel_inequality_check(x, y, p: float = 1.0, slack: float = 1e-10):
    """Evaluate xy <= e^{px} + (y/p)(ln y - ln p - 1) and report both sides.

    Equality holds exactly on the locus y = p e^{px}.
    """
    p = check_positive("p", p)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ConfigurationError("Fenchel inequality needs y > 0")
    lhs = x * y
    rhs = np.exp(p * x) + (y / p) * (np.log(y) - np.log(p) - 1.0)
    holds = lhs <= rhs + slack * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    if lhs.ndim == 0:
        return float(lhs), float(rhs), bool(holds)
    return lhs, rhs, holds


def fenchel_young_check(
    handle: ConjugateHandle,
    t: float = 0.0,
    state: np.ndarray | None = None,
    n_pairs: int = 10_000,
    radius: float = 8.0,
    dim: int = 1,
    seed: int = 0,
    slack: float = 1e-10,
    equality_tol: float = 1e-6,
) -> CheckReport:
    """f1(q) + g1(z) >= q.z on random pairs, equality at the search maximizer."""
    gen = handle.source
    state = np.zeros(dim) if state is None else np.asarray(state, dtype=float)
    rng = np.random.default_rng(seed)
    qs = rng.uniform(-radius, radius, size=(n_pairs, dim))
    zs = rng.uniform(-radius, radius, size=(n_pairs, dim))
    f1 = np.asarray(transform(handle, t, state[None, :], qs), dtype=float)
    g1 = np.asarray(gen.g1(t, state[None, :], zs), dtype=float)
    lhs = np.sum(qs * zs, axis=1)
    rhs = f1 + g1
    bad = lhs > rhs + slack * np.maximum(1.0, np.abs(rhs))
    witnesses = []
    for i in np.nonzero(bad)[0][:8]:
        witnesses.append(
            Witness(
                "fenchel_young",
                {"t": float(t), "q": qs[i].tolist(), "z": zs[i].tolist()},
                float(lhs[i]),
                float(rhs[i]),
                True,
            )
        )

    # equality at maximizers for a subsample
    eq_gap = 0.0
    for q in qs[:: max(1, n_pairs // 64)]:
        val, zstar = transform_with_argmax(handle, t, state[None, :], q)
        val = float(np.asarray(val).ravel()[0])
        zstar = np.asarray(zstar, dtype=float).reshape(dim)
        g_star = float(np.asarray(gen.g1(t, state[None, :], zstar[None, :])).ravel()[0])
        eq_gap = max(eq_gap, abs(val + g_star - float(q @ zstar)))
    passed = not np.any(bad) and eq_gap <= equality_tol
    if passed:
        i = int(np.argmin(rhs - lhs))
        witnesses = [
            Witness(
                "fenchel_young",
                {"t": float(t), "q": qs[i].tolist(), "z": zs[i].tolist()},
                float(lhs[i]),
                float(rhs[i]),
                False,
            )
        ]
    return CheckReport(
        passed=passed,
        witnesses=witnesses,
        samples_used=n_pairs,
        sampling_radius=radius,
        details={"violations": int(np.sum(bad)), "max_equality_gap": eq_gap},
    )


# ---------------------------------------------------------------------------
# majorant family


class MajorantFamily:
    """Monotone tables for K, Psi and the convex machinery Phi, Lambda.

    k must be strictly increasing with k(0) = gamma.  K and Psi integrate on
    [0, x_max] by adaptive quadrature (abs tol 1e-10) accumulated over a knot
    grid; Phi' inverts Psi' by bracketed Newton; Phi comes from the exact
    conjugacy identity Phi(x) = x Phi'(x) - Psi(Phi'(x)).
    """

    def __init__(
        self,
        k: Callable[[np.ndarray], np.ndarray],
        gamma: float,
        x_max: float = 60.0,
        n_knots: int = 241,
        quad_tol: float = 1e-10,
    ):
        self.gamma = check_positive("gamma", gamma)
        self.k = k
        self.x_max = check_positive("x_max", x_max)
        k0 = float(np.asarray(k(0.0)).ravel()[0])
        if abs(k0 - self.gamma) > 1e-10:
            raise ConfigurationError(f"k(0) must equal gamma={self.gamma}, got {k0}")
        sample = np.asarray(k(np.linspace(0.0, x_max, 257)), dtype=float)
        if np.any(np.diff(sample) <= 0):
            raise ConfigurationError("k must be strictly increasing on [0, x_max]")

        knots = np.linspace(0.0, x_max, n_knots)
        g = self.gamma

        def k_scalar(t):
            return float(np.asarray(k(t)).ravel()[0])

        k_cum = np.zeros(n_knots)
        psi_cum = np.zeros(n_knots)
        for i in range(n_knots - 1):
            a_, b_ = knots[i], knots[i + 1]
            k_cum[i + 1] = k_cum[i] + quad(
                lambda t: k_scalar(t) * np.exp(g * t), a_, b_, epsabs=quad_tol, limit=200
            )[0]
            psi_cum[i + 1] = psi_cum[i] + quad(
                lambda t: k_scalar(t) * np.expm1(g * t), a_, b_, epsabs=quad_tol, limit=200
            )[0]
        self._knots = knots
        self._K = PchipInterpolator(knots, k_cum)
        self._Psi = PchipInterpolator(knots, psi_cum)
        self._K_max = float(k_cum[-1])

    def K(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ConfigurationError("K is defined on x >= 0")
        if np.any(x > self.x_max):
            raise ConfigurationError(
                f"K table covers [0, {self.x_max}]; use log_K for larger arguments"
            )
        return self._K(x)

    def log_K(self, x):
        """log K(x), with a flagged upper surrogate beyond the table range.

        Beyond x_max the tail integral is bounded by k(x) e^{gamma x}/gamma
        for increasing k, which keeps the diagnostic finite in log space.
        """
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, -np.inf)
        inside = x <= self.x_max
        with np.errstate(divide="ignore"):
            out = np.where(inside, np.log(np.maximum(self._K(np.minimum(x, self.x_max)), 0.0)), out)
        if np.any(~inside):
            xo = np.where(inside, self.x_max, x)
            kx = np.asarray(self.k(xo), dtype=float)
            tail = np.log(np.maximum(kx, 1e-300) / self.gamma) + self.gamma * xo
            out = np.where(~inside, np.logaddexp(np.log(max(self._K_max, 1e-300)), tail), out)
        return out

    def Psi(self, x):
        x = np.asarray(x, dtype=float)
        if np.any((x < 0) | (x > self.x_max)):
            raise ConfigurationError(f"Psi table covers [0, {self.x_max}]")
        return self._Psi(x)

    def Psi_prime(self, y):
        y = np.asarray(y, dtype=float)
        return np.asarray(self.k(y), dtype=float) * np.expm1(self.gamma * y)

    def Phi_prime(self, x):
        """Inverse of Psi_prime by bracketed Newton; exact to ~1e-12."""
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ConfigurationError("Phi_prime is defined on x >= 0")
        shape = x.shape
        x = np.atleast_1d(x).astype(float)
        hi = np.ones_like(x)
        for _ in range(200):
            need = self.Psi_prime(hi) < x
            if not np.any(need):
                break
            hi = np.where(need, 2.0 * hi, hi)
        lo = np.zeros_like(x)
        y = 0.5 * (lo + hi)
        for _ in range(80):
            h = self.Psi_prime(y) - x
            lo = np.where(h < 0, y, lo)
            hi = np.where(h < 0, hi, y)
            step_h = 1e-7 * (1.0 + y)
            dpsi = (self.Psi_prime(y + step_h) - self.Psi_prime(y - step_h)) / (2.0 * step_h)
            y_new = y - h / np.maximum(dpsi, 1e-300)
            bad = (y_new < lo) | (y_new > hi) | ~np.isfinite(y_new)
            y = np.where(bad, 0.5 * (lo + hi), y_new)
            if np.all(np.abs(h) <= 1e-12 * (1.0 + x)):
                break
        return y.reshape(shape) if shape else float(y[0])

    def Phi(self, x):
        """Convex conjugate of Psi via Phi(x) = x Phi'(x) - Psi(Phi'(x))."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(self.Phi_prime(x))
        return x * y - self.Psi(y)

    def Lambda(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ConfigurationError("Lambda is defined on x >= 0")
        return xlogy(x, x) / self.gamma - self.Phi(x)

    def roundtrip_error(self, grid) -> float:
        grid = np.asarray(grid, dtype=float)
        return float(np.max(np.abs(self.Psi_prime(self.Phi_prime(grid)) - grid)))


def lambda_superlinearity_check(
    fam: MajorantFamily,
    grid,
    growth_factor: float = 5.0,
) -> CheckReport:
    """Lambda(x)/x strictly increasing on the grid, Lambda'' > 0, and the last
    ratio at least growth_factor times the first."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0) or np.any(grid <= 0):
        raise ConfigurationError("grid must be strictly increasing and positive")
    lam = np.asarray(fam.Lambda(grid), dtype=float)
    ratio = lam / grid

    witnesses = []
    passed = True
    bad_ratio = np.diff(ratio) <= 0
    for i in np.nonzero(bad_ratio)[0][:8]:
        passed = False
        witnesses.append(
            Witness(
                "lambda_ratio",
                {"x": float(grid[i]), "x_next": float(grid[i + 1])},
                float(ratio[i + 1]),
                float(ratio[i]),
                True,
            )
        )

    h = 1e-5 * (1.0 + grid)
    phi_pp = (fam.Phi_prime(grid + h) - fam.Phi_prime(np.maximum(grid - h, 0.0))) / (2.0 * h)
    lam_pp = 1.0 / (fam.gamma * grid) - phi_pp
    for i in np.nonzero(lam_pp <= 0)[0][:8]:
        passed = False
        witnesses.append(
            Witness("lambda_convexity", {"x": float(grid[i])}, float(lam_pp[i]), 0.0, True)
        )

    growth_ok = ratio[-1] >= growth_factor * ratio[0]
    if not growth_ok:
        passed = False
        witnesses.append(
            Witness(
                "lambda_growth",
                {"x_first": float(grid[0]), "x_last": float(grid[-1]), "factor": growth_factor},
                float(ratio[-1]),
                float(growth_factor * ratio[0]),
                True,
            )
        )
    if passed:
        witnesses = [
            Witness(
                "lambda_growth",
                {"x_first": float(grid[0]), "x_last": float(grid[-1]), "factor": growth_factor},
                float(ratio[-1]),
                float(growth_factor * ratio[0]),
                False,
            )
        ]
    return CheckReport(
        passed=passed,
        witnesses=witnesses,
        samples_used=grid.size,
        sampling_radius=float(grid[-1]),
        details={
            "ratio_first": float(ratio[0]),
            "ratio_last": float(ratio[-1]),
            "min_second_derivative": float(np.min(lam_pp)),
        },
    )
