"""Generator specifications, assumption checkers, and the fixture catalog.

A generator g(t, b, z) = g1(t, b, z) + g2(t, b, z) splits into a convex part
g1 with at most quadratic growth in z and a uniformly continuous perturbation
g2 controlled by a modulus phi.  All callables are vectorised: t is a scalar,
b (the Brownian state) and z carry a trailing dimension d and broadcast
against each other, and the result drops the trailing dimension.

Checkers sample inequalities on a Probe and return a CheckReport whose
witnesses can be re-evaluated exactly from their recorded inputs.  A pass is
always relative to the probed resolution; a fail carries a certified
counterexample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import xlogy

from .exceptions import ConfigurationError
from .validation import check_finite_values, check_positive

__all__ = [
    "GeneratorSpec",
    "Probe",
    "Witness",
    "CheckReport",
    "gtilde",
    "gtilde_slope_below",
    "check_quadratic_growth",
    "check_strictly_quadratic",
    "check_strong_convexity",
    "check_uniform_continuity",
    "reevaluate_witness",
    "Fixture",
    "fixture",
    "FIXTURE_NAMES",
]

RTOL = 1e-9
ATOL = 1e-9
_MAX_WITNESSES = 8


# ---------------------------------------------------------------------------
# piecewise-linear majorant of |z|^2


def gtilde(z: np.ndarray) -> np.ndarray:
    """Piecewise-linear radial function (2k-1)|z| - k(k-1) on k-1 <= |z| < k.

    Sandwiched between |z|^2 and 1 + |z|^2, with equality to |z|^2 exactly at
    integer radii.
    """
    r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
    k = np.floor(r) + 1.0
    return (2.0 * k - 1.0) * r - k * (k - 1.0)


def gtilde_radial(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    k = np.floor(r) + 1.0
    return (2.0 * k - 1.0) * r - k * (k - 1.0)


def gtilde_slope_below(r: np.ndarray) -> np.ndarray:
    """Left limit of the radial slope; the kink convention used everywhere."""
    r = np.asarray(r, dtype=float)
    return np.where(r > 0.0, 2.0 * np.ceil(r) - 1.0, 0.0)


# ---------------------------------------------------------------------------
# generator specification


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Split generator g = g1 + g2 with its declared constants.

    g2 is None when the perturbation is identically zero.  family names a
    registered analytic form of g1 ("quadratic", "quadratic_minus_norm",
    "gtilde") used for closed-form conjugates and subgradients;
    family_params carries the coef/offset maps for it.
    """

    g1: Callable[..., np.ndarray]
    g2: Callable[..., np.ndarray] | None
    alpha: Callable[..., np.ndarray]
    gamma: float
    gamma_bar: float | None = None
    strong_convexity: tuple[float, float] | None = None
    modulus: Callable[[np.ndarray], np.ndarray] | None = None
    modulus_bounds: tuple[float, float, float] = (0.0, 0.0, 1.0)
    family: str | None = None
    family_params: Mapping[str, Callable] = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        check_positive("gamma", self.gamma)
        if self.gamma_bar is not None:
            gb = check_positive("gamma_bar", self.gamma_bar)
            if gb > self.gamma + 1e-12:
                raise ConfigurationError(
                    f"gamma_bar must lie in (0, gamma], got {gb} > gamma={self.gamma}"
                )
        if self.strong_convexity is not None:
            eps, c = self.strong_convexity
            check_positive("strong_convexity eps", eps)
            check_positive("strong_convexity c", c, allow_zero=True)
        a, b, theta = self.modulus_bounds
        check_positive("modulus bound a", a, allow_zero=True)
        check_positive("modulus bound b", b, allow_zero=True)
        if not (0.0 <= theta <= 1.0):
            raise ConfigurationError(f"modulus exponent theta must be in [0, 1], got {theta}")
        if self.modulus is not None:
            u = np.linspace(0.0, 3.0, 31)
            phi = np.asarray(self.modulus(u), dtype=float)
            check_finite_values("modulus", phi)
            if abs(float(phi[0])) > 1e-12:
                raise ConfigurationError(f"modulus(0) must be 0, got {phi[0]}")
            if np.any(np.diff(phi) < -1e-12):
                raise ConfigurationError("modulus must be nondecreasing")

    def total(self, t: float, b: np.ndarray, z: np.ndarray) -> np.ndarray:
        """g1 + g2 at (t, b, z)."""
        out = np.asarray(self.g1(t, b, z), dtype=float)
        if self.g2 is not None:
            out = out + self.g2(t, b, z)
        return out

    def perturbation(self, t: float, b: np.ndarray, z: np.ndarray) -> np.ndarray:
        if self.g2 is None:
            z = np.asarray(z, dtype=float)
            b = np.asarray(b, dtype=float)
            shape = np.broadcast_shapes(z.shape[:-1], b.shape[:-1])
            return np.zeros(shape)
        return np.asarray(self.g2(t, b, z), dtype=float)


# Registered analytic families.  The radial profile h with g1 = h(|z|) + offset
# (coef-scaled for "quadratic") is the single source of truth for evaluation,
# slopes, and the closed-form conjugates in the conjugate module.


def _family_g1(family: str, params: Mapping[str, Callable]) -> Callable:
    offset = params.get("offset")

    if family == "quadratic":
        coef = params["coef"]

        def g1(t, b, z):
            r2 = np.sum(np.square(np.asarray(z, dtype=float)), axis=-1)
            out = coef(t, b) * r2
            return out + offset(t, b) if offset is not None else out

        return g1

    if family == "quadratic_minus_norm":

        def g1(t, b, z):
            r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
            out = 0.5 * r * r - r
            if offset is not None:
                out = out + offset(t, b)
            return out

        return g1

    if family == "gtilde":

        def g1(t, b, z):
            out = gtilde(z)
            if offset is not None:
                out = out + offset(t, b)
            return out

        return g1

    raise ConfigurationError(f"unknown generator family {family!r}")


def radial_slope_below(gen: GeneratorSpec, t: float, b: np.ndarray, r: np.ndarray):
    """Radial derivative of g1 (left limit at kinks) and a validity mask.

    The mask is False where the subdifferential of g1 is empty, which happens
    only for the quadratic_minus_norm family on |z| < 1; there the returned
    slope is still the radial-limit representative used for control
    extraction.
    """
    r = np.asarray(r, dtype=float)
    if gen.family == "quadratic":
        coef = gen.family_params["coef"](t, b)
        return 2.0 * coef * r, np.ones(np.shape(coef * r), dtype=bool)
    if gen.family == "quadratic_minus_norm":
        return r - 1.0, r >= 1.0
    if gen.family == "gtilde":
        return gtilde_slope_below(r), np.ones(r.shape, dtype=bool)
    raise ConfigurationError(f"no registered radial slope for family {gen.family!r}")


def fd_gradient(g1: Callable, t: float, b: np.ndarray, z: np.ndarray, h: float | None = None):
    """Central finite-difference gradient of g1 in z, one row per z row."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, d = z.shape
    out = np.empty((n, d))
    for j in range(d):
        step = h if h is not None else 1e-6 * (1.0 + np.abs(z[:, j]))
        zp = z.copy()
        zm = z.copy()
        zp[:, j] = zp[:, j] + step
        zm[:, j] = zm[:, j] - step
        out[:, j] = (np.asarray(g1(t, b, zp)) - np.asarray(g1(t, b, zm))) / (2.0 * step)
    return out


# ---------------------------------------------------------------------------
# probes and reports


@dataclass(frozen=True)
class Probe:
    """Sampling plan for the inequality checkers.

    radius bounds the z ball; directions/radial/random control the z point
    set; times and states (explicit rows, z-state always added) locate the
    coefficient evaluations.  antipodal adds cross-origin pairs to the
    strong-convexity pair set, which the default leaves out: the default pair
    geometry is colinear same-ray, the resolution at which candidate checks
    are quoted.
    """

    radius: float = 10.0
    n_directions: int = 6
    n_radial: int = 21
    n_random: int = 128
    times: Sequence[float] = (0.0, 0.35, 0.7, 1.0)
    states: np.ndarray | None = None
    n_states: int = 4
    state_scale: float = 1.0
    pair_jitter: float = 0.05
    antipodal: bool = False
    seed: int = 0

    def state_rows(self, dim: int, rng: np.random.Generator) -> np.ndarray:
        if self.states is not None:
            rows = np.atleast_2d(np.asarray(self.states, dtype=float))
            if rows.shape[1] != dim:
                raise ConfigurationError(
                    f"probe states have dim {rows.shape[1]}, expected {dim}"
                )
            return rows
        rows = rng.standard_normal((self.n_states, dim)) * self.state_scale
        rows[0] = 0.0  # the origin state is always probed; B_0 = 0
        return rows

    def directions(self, dim: int, rng: np.random.Generator) -> np.ndarray:
        if dim == 1:
            return np.array([[1.0], [-1.0]])
        dirs = rng.standard_normal((max(self.n_directions - 1, 1), dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        e1 = np.zeros((1, dim))
        e1[0, 0] = 1.0
        return np.vstack([e1, dirs])

    def z_ball(self, dim: int, rng: np.random.Generator) -> np.ndarray:
        dirs = self.directions(dim, rng)
        radii = np.linspace(0.0, self.radius, self.n_radial)[1:]
        pts = (dirs[:, None, :] * radii[None, :, None]).reshape(-1, dim)
        if self.n_random:
            raw = rng.standard_normal((self.n_random, dim))
            raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-300)
            rr = self.radius * rng.random(self.n_random) ** (1.0 / dim)
            pts = np.vstack([pts, raw * rr[:, None]])
        return np.vstack([np.zeros((1, dim)), pts])


@dataclass
class Witness:
    """One recorded inequality sample; inputs are plain JSON-able values."""

    kind: str
    inputs: dict
    lhs: float
    rhs: float
    violation: bool


@dataclass
class CheckReport:
    passed: bool
    witnesses: list[Witness]
    samples_used: int
    sampling_radius: float
    details: dict = field(default_factory=dict)


def _tol(lhs: np.ndarray, rhs: np.ndarray, rtol: float, atol: float) -> np.ndarray:
    return atol + rtol * np.maximum(np.abs(lhs), np.abs(rhs))


def _collect(kind, inputs_fn, lhs, rhs, bad, lower_bound=False, cap=_MAX_WITNESSES):
    """Build witnesses for the worst offenders, or the tightest sample if none.

    margin is rhs - lhs for upper bounds and lhs - rhs for lower bounds, so
    positive always means satisfied and the most negative entry is the worst.
    """
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    margin = (lhs - rhs) if lower_bound else (rhs - lhs)
    out = []
    idx = np.nonzero(bad)[0]
    if idx.size:
        for i in idx[np.argsort(margin[idx])][:cap]:
            out.append(Witness(kind, inputs_fn(int(i)), float(lhs[i]), float(rhs[i]), True))
    else:
        i = int(np.argmin(margin))
        out.append(Witness(kind, inputs_fn(i), float(lhs[i]), float(rhs[i]), False))
    return out


# ---------------------------------------------------------------------------
# checkers


def check_quadratic_growth(
    gen: GeneratorSpec,
    probe: Probe | None = None,
    dim: int = 1,
    include_perturbation: bool = False,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> CheckReport:
    """Sample |g1| <= alpha + (gamma/2)|z|^2 over the probe.

    The bound is checked on the convex part; with include_perturbation the
    composite |g1 + g2| <= alpha + a|z|^theta + b + (gamma/2)|z|^2 is checked
    instead, the adjusted envelope that the split implies for the sum.
    """
    probe = probe or Probe()
    rng = np.random.default_rng(probe.seed)
    states = probe.state_rows(dim, rng)
    zs = probe.z_ball(dim, rng)
    r2 = np.sum(zs * zs, axis=-1)
    a_mod, b_mod, theta = gen.modulus_bounds

    witnesses: list[Witness] = []
    worst_ratio = 0.0
    samples = 0
    all_ok = True
    tight_w = None
    tight_margin = np.inf
    for t in probe.times:
        for b_row in states:
            brow = b_row[None, :]
            if include_perturbation:
                lhs = np.abs(gen.total(t, brow, zs))
                rhs = gen.alpha(t, brow) + a_mod * np.sqrt(r2) ** theta + b_mod + 0.5 * gen.gamma * r2
            else:
                lhs = np.abs(np.asarray(gen.g1(t, brow, zs), dtype=float))
                rhs = gen.alpha(t, brow) + 0.5 * gen.gamma * r2
            lhs = check_finite_values("g1", np.broadcast_to(lhs, r2.shape), at=(t, b_row))
            rhs = np.broadcast_to(np.asarray(rhs, dtype=float), r2.shape)
            samples += lhs.size
            worst_ratio = max(worst_ratio, float(np.max(lhs / np.maximum(rhs, 1e-300))))
            bad = lhs > rhs + _tol(lhs, rhs, rtol, atol)

            def inputs(i, t=t, b_row=b_row):
                return {
                    "t": float(t),
                    "b": b_row.tolist(),
                    "z": zs[i].tolist(),
                    "include_perturbation": include_perturbation,
                }

            ws = _collect("quadratic_growth", inputs, lhs, rhs, bad)
            if np.any(bad):
                all_ok = False
                witnesses.extend(w for w in ws if w.violation)
            else:
                margin = ws[0].rhs - ws[0].lhs
                if margin < tight_margin:
                    tight_margin, tight_w = margin, ws[0]
    if all_ok and tight_w is not None:
        witnesses = [tight_w]
    return CheckReport(
        passed=all_ok,
        witnesses=witnesses[: 2 * _MAX_WITNESSES],
        samples_used=samples,
        sampling_radius=probe.radius,
        details={"max_slack_ratio": worst_ratio},
    )


def check_strictly_quadratic(
    gen: GeneratorSpec,
    probe: Probe | None = None,
    dim: int = 1,
    include_perturbation: bool = False,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> CheckReport:
    """Sample g1 >= (gamma_bar/2)|z|^2 - alpha over the probe."""
    if gen.gamma_bar is None:
        raise ConfigurationError("generator declares no gamma_bar; strictly quadratic check needs one")
    probe = probe or Probe()
    rng = np.random.default_rng(probe.seed)
    states = probe.state_rows(dim, rng)
    zs = probe.z_ball(dim, rng)
    r2 = np.sum(zs * zs, axis=-1)
    a_mod, b_mod, theta = gen.modulus_bounds

    witnesses: list[Witness] = []
    min_margin = np.inf
    samples = 0
    all_ok = True
    tight_w = None
    for t in probe.times:
        for b_row in states:
            brow = b_row[None, :]
            if include_perturbation:
                lhs = gen.total(t, brow, zs)
                rhs = 0.5 * gen.gamma_bar * r2 - gen.alpha(t, brow) - a_mod * np.sqrt(r2) ** theta - b_mod
            else:
                lhs = np.asarray(gen.g1(t, brow, zs), dtype=float)
                rhs = 0.5 * gen.gamma_bar * r2 - gen.alpha(t, brow)
            lhs = check_finite_values("g1", np.broadcast_to(lhs, r2.shape), at=(t, b_row))
            rhs = np.broadcast_to(np.asarray(rhs, dtype=float), r2.shape)
            samples += lhs.size
            min_margin = min(min_margin, float(np.min(lhs - rhs)))
            bad = lhs < rhs - _tol(lhs, rhs, rtol, atol)

            def inputs(i, t=t, b_row=b_row):
                return {
                    "t": float(t),
                    "b": b_row.tolist(),
                    "z": zs[i].tolist(),
                    "include_perturbation": include_perturbation,
                }

            ws = _collect("strictly_quadratic", inputs, lhs, rhs, bad, lower_bound=True)
            if np.any(bad):
                all_ok = False
                witnesses.extend(w for w in ws if w.violation)
            else:
                margin = ws[0].lhs - ws[0].rhs
                if tight_w is None or margin < (tight_w.lhs - tight_w.rhs):
                    tight_w = ws[0]
    if all_ok and tight_w is not None:
        witnesses = [tight_w]
    return CheckReport(
        passed=all_ok,
        witnesses=witnesses[: 2 * _MAX_WITNESSES],
        samples_used=samples,
        sampling_radius=probe.radius,
        details={"min_margin": min_margin},
    )


def _convexity_pairs(probe: Probe, dim: int, rng: np.random.Generator):
    """Anchor/probe z pairs: colinear same-ray, jittered, optionally antipodal."""
    dirs = probe.directions(dim, rng)
    radii = np.linspace(0.0, probe.radius, probe.n_radial)
    pairs = []
    for e in dirs:
        za = radii[:, None] * e[None, :]
        for i in range(len(radii)):
            zp = za.copy()
            pairs.append((np.repeat(za[i][None, :], len(radii), axis=0), zp))
            if probe.pair_jitter > 0 and dim > 1:
                perp = rng.standard_normal(dim)
                perp -= perp @ e * e
                n = np.linalg.norm(perp)
                if n > 1e-12:
                    perp = perp / n * probe.pair_jitter
                    pairs.append((np.repeat(za[i][None, :], len(radii), axis=0), zp + perp))
            if probe.antipodal:
                pairs.append((np.repeat(za[i][None, :], len(radii), axis=0), -zp))
    anchors = np.vstack([p[0] for p in pairs])
    probes_ = np.vstack([p[1] for p in pairs])
    return anchors, probes_


def check_strong_convexity(
    gen: GeneratorSpec,
    candidate: tuple[float, float] | None = None,
    probe: Probe | None = None,
    dim: int = 1,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> CheckReport:
    """Sample the Bregman bound g1(z) - g1(z') - u(z-z') >= (eps/2)|z-z'|^2 - c.

    u is the subgradient representative of g1 at the anchor z'; anchors where
    the subdifferential is empty (known for registered families) are skipped.
    Refutation only: a fail is a certified counterexample, a pass says no
    violation was found at this pair geometry.
    """
    candidate = candidate or gen.strong_convexity
    if candidate is None:
        raise ConfigurationError("no strong-convexity candidate (eps, c) supplied or declared")
    eps, c = candidate
    check_positive("candidate eps", eps)
    check_positive("candidate c", c, allow_zero=True)
    probe = probe or Probe()
    rng = np.random.default_rng(probe.seed)
    states = probe.state_rows(dim, rng)
    anchors, probes_ = _convexity_pairs(probe, dim, rng)

    witnesses: list[Witness] = []
    min_margin = np.inf
    samples = 0
    skipped = 0
    all_ok = True
    tight_w = None
    for t in probe.times:
        for b_row in states:
            brow = b_row[None, :]
            ra = np.linalg.norm(anchors, axis=-1)
            if gen.family is not None:
                slope, valid = radial_slope_below(gen, t, brow, ra)
                slope = np.broadcast_to(np.asarray(slope, dtype=float), ra.shape)
                with np.errstate(invalid="ignore", divide="ignore"):
                    u = np.where(ra[:, None] > 0, slope[:, None] * anchors / np.maximum(ra, 1e-300)[:, None], 0.0)
                valid = np.broadcast_to(valid, ra.shape)
            else:
                u = fd_gradient(gen.g1, t, brow, anchors)
                valid = np.ones(len(anchors), dtype=bool)
            skipped += int(np.sum(~valid))
            g_a = np.asarray(gen.g1(t, brow, anchors), dtype=float)
            g_p = np.asarray(gen.g1(t, brow, probes_), dtype=float)
            diff = probes_ - anchors
            lhs = g_p - g_a - np.sum(u * diff, axis=-1)
            rhs = 0.5 * eps * np.sum(diff * diff, axis=-1) - c
            lhs = np.where(valid, lhs, rhs)  # skipped anchors never violate
            samples += int(np.sum(valid))
            min_margin = min(min_margin, float(np.min(lhs - rhs)))
            bad = lhs < rhs - _tol(lhs, rhs, rtol, atol)

            def inputs(i, t=t, b_row=b_row, u=u):
                return {
                    "t": float(t),
                    "b": b_row.tolist(),
                    "z": probes_[i].tolist(),
                    "z_anchor": anchors[i].tolist(),
                    "u": u[i].tolist(),
                    "eps": float(eps),
                    "c": float(c),
                }

            ws = _collect("strong_convexity", inputs, lhs, rhs, bad, lower_bound=True)
            if np.any(bad):
                all_ok = False
                witnesses.extend(w for w in ws if w.violation)
            else:
                if tight_w is None or (ws[0].lhs - ws[0].rhs) < (tight_w.lhs - tight_w.rhs):
                    tight_w = ws[0]
    if all_ok and tight_w is not None:
        witnesses = [tight_w]
    return CheckReport(
        passed=all_ok,
        witnesses=witnesses[: 2 * _MAX_WITNESSES],
        samples_used=samples,
        sampling_radius=probe.radius,
        details={"min_margin": min_margin, "anchors_skipped": skipped},
    )


def check_uniform_continuity(
    gen: GeneratorSpec,
    probe: Probe | None = None,
    dim: int = 1,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> CheckReport:
    """Sample |g2(z1) - g2(z2)| <= phi(|z1 - z2|), phi(x) <= a x^theta + b,
    and g2(., 0) = 0."""
    probe = probe or Probe()
    rng = np.random.default_rng(probe.seed)
    a_mod, b_mod, theta = gen.modulus_bounds
    if gen.g2 is None:
        return CheckReport(True, [], 0, probe.radius, details={"trivial": 1.0})
    if gen.modulus is None:
        raise ConfigurationError("generator has a g2 part but no modulus")

    states = probe.state_rows(dim, rng)
    zs = probe.z_ball(dim, rng)
    n = len(zs)
    i1 = rng.integers(0, n, size=4 * n)
    i2 = rng.integers(0, n, size=4 * n)
    z1 = np.vstack([zs[i1], zs])
    z2 = np.vstack([zs[i2], zs + rng.standard_normal(zs.shape) * 1e-3])

    witnesses: list[Witness] = []
    samples = 0
    all_ok = True
    max_pair_excess = -np.inf
    for t in probe.times:
        for b_row in states:
            brow = b_row[None, :]
            gap = np.linalg.norm(z1 - z2, axis=-1)
            lhs = np.abs(
                np.asarray(gen.g2(t, brow, z1), dtype=float)
                - np.asarray(gen.g2(t, brow, z2), dtype=float)
            )
            rhs = np.asarray(gen.modulus(gap), dtype=float)
            check_finite_values("g2", lhs, at=(t, b_row))
            samples += lhs.size
            max_pair_excess = max(max_pair_excess, float(np.max(lhs - rhs)))
            bad = lhs > rhs + _tol(lhs, rhs, rtol, atol)

            def inputs(i, t=t, b_row=b_row):
                return {"t": float(t), "b": b_row.tolist(), "z1": z1[i].tolist(), "z2": z2[i].tolist()}

            if np.any(bad):
                all_ok = False
                witnesses.extend(w for w in _collect("uniform_continuity_pair", inputs, lhs, rhs, bad) if w.violation)

    # modulus envelope phi(x) <= a x^theta + b on a grid through small x
    xg = np.concatenate([np.linspace(0.0, 1.0, 101), np.linspace(1.0, 2 * probe.radius, 80)])
    phi = np.asarray(gen.modulus(xg), dtype=float)
    env = a_mod * xg**theta + b_mod
    bad_env = phi > env + _tol(phi, env, rtol, atol)
    samples += xg.size
    if np.any(bad_env):
        all_ok = False
        for i in np.nonzero(bad_env)[0][:_MAX_WITNESSES]:
            witnesses.append(
                Witness("modulus_envelope", {"x": float(xg[i])}, float(phi[i]), float(env[i]), True)
            )

    # normalisation g2(., 0) = 0
    z0 = np.zeros((1, dim))
    max_zero = 0.0
    for t in probe.times:
        for b_row in states:
            v = float(np.asarray(gen.g2(t, b_row[None, :], z0), dtype=float).ravel()[0])
            samples += 1
            max_zero = max(max_zero, abs(v))
            if abs(v) > atol:
                all_ok = False
                witnesses.append(
                    Witness("modulus_zero", {"t": float(t), "b": b_row.tolist()}, abs(v), 0.0, True)
                )
    if all_ok:
        witnesses = witnesses[:1] if witnesses else [
            Witness("uniform_continuity_pair", {"t": float(probe.times[0]), "b": states[0].tolist(),
                                                "z1": z1[0].tolist(), "z2": z2[0].tolist()},
                    float(np.abs(gen.g2(probe.times[0], states[0][None, :], z1[:1])
                                 - gen.g2(probe.times[0], states[0][None, :], z2[:1]))[0]),
                    float(np.asarray(gen.modulus(np.linalg.norm(z1[0] - z2[0])))), False)
        ]
    return CheckReport(
        passed=all_ok,
        witnesses=witnesses[: 3 * _MAX_WITNESSES],
        samples_used=samples,
        sampling_radius=probe.radius,
        details={"max_pair_excess": max_pair_excess, "max_abs_at_zero": max_zero},
    )


def reevaluate_witness(gen: GeneratorSpec, witness: Witness) -> tuple[float, float]:
    """Recompute (lhs, rhs) for a checker witness from its recorded inputs."""
    ins = witness.inputs
    if witness.kind == "quadratic_growth":
        t, b, z = ins["t"], np.asarray(ins["b"])[None, :], np.asarray(ins["z"])[None, :]
        r2 = float(np.sum(np.square(z)))
        a_mod, b_mod, theta = gen.modulus_bounds
        if ins.get("include_perturbation"):
            lhs = float(np.abs(gen.total(t, b, z)).ravel()[0])
            rhs = float(np.asarray(gen.alpha(t, b)).ravel()[0]) + a_mod * r2 ** (theta / 2) + b_mod + 0.5 * gen.gamma * r2
        else:
            lhs = float(np.abs(np.asarray(gen.g1(t, b, z))).ravel()[0])
            rhs = float(np.asarray(gen.alpha(t, b)).ravel()[0]) + 0.5 * gen.gamma * r2
        return lhs, rhs
    if witness.kind == "strictly_quadratic":
        t, b, z = ins["t"], np.asarray(ins["b"])[None, :], np.asarray(ins["z"])[None, :]
        r2 = float(np.sum(np.square(z)))
        a_mod, b_mod, theta = gen.modulus_bounds
        if ins.get("include_perturbation"):
            lhs = float(np.asarray(gen.total(t, b, z)).ravel()[0])
            rhs = 0.5 * gen.gamma_bar * r2 - float(np.asarray(gen.alpha(t, b)).ravel()[0]) - a_mod * r2 ** (theta / 2) - b_mod
        else:
            lhs = float(np.asarray(gen.g1(t, b, z)).ravel()[0])
            rhs = 0.5 * gen.gamma_bar * r2 - float(np.asarray(gen.alpha(t, b)).ravel()[0])
        return lhs, rhs
    if witness.kind == "strong_convexity":
        t, b = ins["t"], np.asarray(ins["b"])[None, :]
        z = np.asarray(ins["z"])[None, :]
        za = np.asarray(ins["z_anchor"])[None, :]
        u = np.asarray(ins["u"])
        lhs = float(np.asarray(gen.g1(t, b, z)).ravel()[0]) - float(np.asarray(gen.g1(t, b, za)).ravel()[0]) - float(u @ (z - za).ravel())
        rhs = 0.5 * ins["eps"] * float(np.sum(np.square(z - za))) - ins["c"]
        return lhs, rhs
    if witness.kind == "uniform_continuity_pair":
        t, b = ins["t"], np.asarray(ins["b"])[None, :]
        z1 = np.asarray(ins["z1"])[None, :]
        z2 = np.asarray(ins["z2"])[None, :]
        lhs = float(np.abs(np.asarray(gen.g2(t, b, z1)) - np.asarray(gen.g2(t, b, z2))).ravel()[0])
        rhs = float(np.asarray(gen.modulus(np.linalg.norm(z1 - z2))).ravel()[0])
        return lhs, rhs
    if witness.kind == "modulus_envelope":
        a_mod, b_mod, theta = gen.modulus_bounds
        x = ins["x"]
        return float(np.asarray(gen.modulus(x)).ravel()[0]), a_mod * x**theta + b_mod
    if witness.kind == "modulus_zero":
        t, b = ins["t"], np.asarray(ins["b"])[None, :]
        dim = b.shape[1]
        return float(np.abs(np.asarray(gen.g2(t, b, np.zeros((1, dim))))).ravel()[0]), 0.0
    raise ConfigurationError(f"cannot re-evaluate witness kind {witness.kind!r}")


# ---------------------------------------------------------------------------
# fixture catalog


@dataclass(frozen=True, eq=False)
class Fixture:
    """A named generator with its recommended terminal and declared labels.

    assumptions lists the checker sections the generator is declared to pass
    (A1 growth, A2 strictly quadratic, A3 strong-convexity candidate, B
    modulus); regimes tags which suites apply ("duality", "z_moments",
    "crosscheck_only", "critical").
    """

    name: str
    generator: GeneratorSpec
    terminal: object
    assumptions: tuple[str, ...]
    regimes: tuple[str, ...]


FIXTURE_NAMES = (
    "pure_quadratic",
    "gtilde",
    "example_i",
    "example_ii",
    "example_iii",
    "example_iv",
)


def _const_alpha(value: float) -> Callable:
    def alpha(t, b):
        b = np.asarray(b, dtype=float)
        return np.full(b.shape[:-1], float(value))

    return alpha


def _norm_state(t, b):
    return np.linalg.norm(np.asarray(b, dtype=float), axis=-1)


def _sqrt_norm_state(t, b):
    return np.sqrt(np.linalg.norm(np.asarray(b, dtype=float), axis=-1))


def fixture(name: str, gamma: float = 1.0, radius: float = 0.1) -> Fixture:
    """Build a catalog fixture by name.

    gamma parameterises pure_quadratic; radius is the small cutoff of the
    example_iv perturbation and must lie in (0, 1/e] so its modulus is
    nondecreasing.
    """
    from .stochastics import abs_terminal, critical_terminal, linear_terminal

    if name == "pure_quadratic":
        g = check_positive("gamma", gamma)
        coef = (lambda t, b: 0.5 * g)
        gen = GeneratorSpec(
            g1=_family_g1("quadratic", {"coef": coef}),
            g2=None,
            alpha=_const_alpha(0.0),
            gamma=g,
            gamma_bar=g,
            strong_convexity=(g, 0.0),
            modulus=None,
            modulus_bounds=(0.0, 0.0, 1.0),
            family="quadratic",
            family_params={"coef": coef},
            description=f"(gamma/2)|z|^2 with gamma={g}",
        )
        return Fixture(name, gen, linear_terminal([1.0]), ("A1", "A2", "A3", "B"), ("duality",))

    if name == "gtilde":
        gen = GeneratorSpec(
            g1=_family_g1("gtilde", {}),
            g2=None,
            alpha=_const_alpha(1.0),
            gamma=2.0,
            gamma_bar=2.0,
            strong_convexity=None,
            modulus=None,
            modulus_bounds=(0.0, 0.0, 1.0),
            family="gtilde",
            family_params={},
            description="piecewise-linear majorant of |z|^2",
        )
        return Fixture(name, gen, abs_terminal([1.0]), ("A1", "A2", "B"), ("duality",))

    if name == "example_i":
        coef = (lambda t, b: 1.0 + np.sin(t))

        def bump(t, b, z):
            r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
            return np.where(r <= 1.0, r**0.25, 1.0) + np.zeros(np.asarray(b, dtype=float).shape[:-1])

        def phi_bump(u):
            u = np.asarray(u, dtype=float)
            return np.where(u <= 1.0, np.maximum(u, 0.0) ** 0.25, 1.0)

        gen = GeneratorSpec(
            g1=_family_g1("quadratic", {"coef": coef, "offset": _norm_state}),
            g2=bump,
            alpha=_norm_state,
            gamma=4.0,
            gamma_bar=None,
            strong_convexity=None,
            modulus=phi_bump,
            modulus_bounds=(0.0, 1.0, 1.0),
            family="quadratic",
            family_params={"coef": coef, "offset": _norm_state},
            description="|B_t| + (1+sin t)|z|^2 plus a bounded bump",
        )
        return Fixture(name, gen, abs_terminal([1.0]), ("A1", "B"), ("duality",))

    if name == "example_ii":

        def g2_sqrt(t, b, z):
            r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
            return -np.sqrt(r) + np.zeros(np.asarray(b, dtype=float).shape[:-1])

        def alpha_ii(t, b):
            return _sqrt_norm_state(t, b) + 1.0

        gen = GeneratorSpec(
            g1=_family_g1("gtilde", {"offset": _sqrt_norm_state}),
            g2=g2_sqrt,
            alpha=alpha_ii,
            gamma=2.0,
            gamma_bar=2.0,
            strong_convexity=None,
            modulus=lambda u: np.sqrt(np.maximum(np.asarray(u, dtype=float), 0.0)),
            modulus_bounds=(1.0, 1.0, 0.5),
            family="gtilde",
            family_params={"offset": _sqrt_norm_state},
            description="sqrt|B_t| + gtilde(z) minus sqrt|z|",
        )
        return Fixture(name, gen, abs_terminal([1.0]), ("A1", "A2", "B"), ("duality", "z_moments"))

    if name == "example_iii":
        coef = (lambda t, b: 0.5)

        def g2_iii(t, b, z):
            r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
            return np.where(r <= 1.0, r ** (2.0 / 3.0), r) + np.zeros(np.asarray(b, dtype=float).shape[:-1])

        def phi_iii(u):
            u = np.asarray(u, dtype=float)
            return np.where(u <= 1.0, np.maximum(u, 0.0) ** (2.0 / 3.0), u)

        gen = GeneratorSpec(
            g1=_family_g1("quadratic", {"coef": coef}),
            g2=g2_iii,
            alpha=_const_alpha(0.0),
            gamma=1.0,
            gamma_bar=None,
            strong_convexity=(1.0, 0.0),
            modulus=phi_iii,
            modulus_bounds=(1.0, 1.0, 1.0),
            family="quadratic",
            family_params={"coef": coef},
            description="0.5|z|^2 plus a linearly growing perturbation",
        )
        return Fixture(name, gen, abs_terminal([1.0]), ("A1", "A3", "B"), ("crosscheck_only",))

    if name == "example_iv":
        eps_r = float(radius)
        if not (0.0 < eps_r <= np.exp(-1.0)):
            raise ConfigurationError(
                f"example_iv radius must lie in (0, 1/e] so the modulus is nondecreasing, got {eps_r}"
            )
        floor_val = float(eps_r * np.log(eps_r))  # negative

        def g2_iv(t, b, z):
            r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
            return np.where(r <= eps_r, xlogy(r, r), floor_val) + np.zeros(np.asarray(b, dtype=float).shape[:-1])

        def phi_iv(u):
            u = np.asarray(u, dtype=float)
            return np.where(u <= eps_r, -xlogy(u, u), -floor_val)

        gen = GeneratorSpec(
            g1=_family_g1("quadratic_minus_norm", {}),
            g2=g2_iv,
            alpha=_const_alpha(1.0),
            gamma=1.0,
            gamma_bar=None,
            strong_convexity=(1.0, 1.0),
            modulus=phi_iv,
            modulus_bounds=(0.0, 2.0, 1.0),
            family="quadratic_minus_norm",
            family_params={},
            description=f"0.5|z|^2 - |z| plus a log-notch perturbation (radius {eps_r})",
        )
        return Fixture(name, gen, critical_terminal(1.0), ("A1", "A3", "B"), ("duality", "critical"))

    raise ConfigurationError(f"unknown fixture {name!r}; valid names: {FIXTURE_NAMES}")
