"""Brownian ensembles, terminal builders, measure changes, and estimators.

Everything here is deterministic given (seed, grid, M, d): path generation is
keyed per fixed-size block with a counter-based generator, so worker count
never changes the bits, and estimator reductions use numpy's pairwise sums.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .exceptions import ConfigurationError
from .generators import CheckReport, Witness
from .validation import check_int, check_positive, check_vector

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "simulate",
    "TerminalSpec",
    "terminal_builder",
    "linear_terminal",
    "abs_terminal",
    "critical_terminal",
    "ControlProcess",
    "doleans",
    "EntropyReport",
    "relative_entropy",
    "ExpMomentReport",
    "exp_moment",
    "class_D_diagnostic",
    "mean_and_se",
    "weighted_mean_se",
    "save_ensemble",
    "load_ensemble",
    "save_solution",
    "load_solution",
    "ensemble_digest",
]

RNG_SCHEME = "philox-block4096"
_BLOCK = 4096
_LOG_OVERFLOW = 700.0  # exp beyond this is inf in float64


# ---------------------------------------------------------------------------
# grids and ensembles


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing nodes 0 = t_0 < ... < t_N = T."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigurationError("grid needs at least two nodes")
        if abs(nodes[0]) > 0.0:
            raise ConfigurationError(f"first grid node must be 0, got {nodes[0]}")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigurationError("grid nodes must be strictly increasing")

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        horizon = check_positive("horizon", horizon)
        n_steps = check_int("n_steps", n_steps, minimum=1)
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """M Brownian paths on a grid; paths has shape (M, N+1, d), B_0 = 0."""

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    rng_scheme: str = RNG_SCHEME

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.paths, axis=1)


def _fill_block(paths, lo, hi, seed, block_index, sqrt_dt, dim):
    rng = np.random.Generator(np.random.Philox(key=[seed, block_index]))
    dw = rng.standard_normal((hi - lo, sqrt_dt.size, dim))
    dw *= sqrt_dt[None, :, None]
    np.cumsum(dw, axis=1, out=paths[lo:hi, 1:, :])


def simulate(
    grid: TimeGrid,
    dim: int,
    n_paths: int,
    seed: int = 0,
    threads: int = 1,
    block_size: int = _BLOCK,
) -> PathEnsemble:
    """Sample a Brownian ensemble; bit-identical for any thread count.

    Each block of block_size paths draws from its own counter-based stream
    keyed by (seed, block index), so assembly order cannot matter.
    """
    dim = check_int("dim", dim, minimum=1)
    n_paths = check_int("n_paths", n_paths, minimum=1)
    seed = check_int("seed", seed, minimum=0)
    threads = check_int("threads", threads, minimum=1)
    block_size = check_int("block_size", block_size, minimum=1)

    sqrt_dt = np.sqrt(grid.dt)
    paths = np.zeros((n_paths, grid.n_steps + 1, dim))
    blocks = [(i, min(i + block_size, n_paths)) for i in range(0, n_paths, block_size)]
    if threads == 1:
        for bi, (lo, hi) in enumerate(blocks):
            _fill_block(paths, lo, hi, seed, bi, sqrt_dt, dim)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_fill_block, paths, lo, hi, seed, bi, sqrt_dt, dim)
                for bi, (lo, hi) in enumerate(blocks)
            ]
            for f in futures:
                f.result()
    return PathEnsemble(grid=grid, paths=paths, seed=seed)


# ---------------------------------------------------------------------------
# terminal conditions


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    """Terminal functional xi of the path, with its declared exponential
    moment order: exp(p xi+) is integrable for p < moment_order."""

    name: str
    functional: Callable[[np.ndarray, TimeGrid], np.ndarray]
    moment_order: float
    description: str = ""
    of_terminal_value: Callable[[np.ndarray, float], np.ndarray] | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, ens: PathEnsemble) -> np.ndarray:
        return np.asarray(self.functional(ens.paths, ens.grid), dtype=float)


def linear_terminal(vector: Sequence[float]) -> TerminalSpec:
    v = check_vector("terminal vector", vector)

    def functional(paths, grid):
        return paths[:, -1, :] @ v

    def of_value(b_terminal, horizon):
        return np.asarray(b_terminal, dtype=float) @ v

    return TerminalSpec(
        name="linear",
        functional=functional,
        moment_order=np.inf,
        description=f"v . B_T with v={v.tolist()}",
        of_terminal_value=of_value,
        params={"vector": v.tolist()},
    )


def abs_terminal(vector: Sequence[float]) -> TerminalSpec:
    v = check_vector("terminal vector", vector)

    def functional(paths, grid):
        return np.abs(paths[:, -1, :] @ v)

    def of_value(b_terminal, horizon):
        return np.abs(np.asarray(b_terminal, dtype=float) @ v)

    return TerminalSpec(
        name="abs",
        functional=functional,
        moment_order=np.inf,
        description=f"|v . B_T| with v={v.tolist()}",
        of_terminal_value=of_value,
        params={"vector": v.tolist()},
    )


def survival_inverse(u: np.ndarray, gamma: float) -> np.ndarray:
    """Solve e^{-gamma x}/(1+x)^2 = u on [0, inf) for u in (0, 1].

    log of the survival function is strictly decreasing, so a bracketed
    Newton iteration converges for every entry; the bracket comes from the
    envelope e^{-(gamma+2)x} <= S(x) <= e^{-gamma x}.
    """
    gamma = check_positive("gamma", gamma)
    u = np.clip(np.asarray(u, dtype=float), 1e-300, 1.0)
    neg_log_u = -np.log(u)
    lo = neg_log_u / (gamma + 2.0)
    hi = neg_log_u / gamma
    x = 0.5 * (lo + hi)
    for _ in range(64):
        h = neg_log_u - gamma * x - 2.0 * np.log1p(x)
        lo = np.where(h > 0, x, lo)
        hi = np.where(h > 0, hi, x)
        step = h / (-gamma - 2.0 / (1.0 + x))
        x_new = x - step
        out_of_bracket = (x_new < lo) | (x_new > hi) | ~np.isfinite(x_new)
        x = np.where(out_of_bracket, 0.5 * (lo + hi), x_new)
        if np.all(np.abs(h) < 1e-14):
            break
    return x


def critical_terminal(gamma: float) -> TerminalSpec:
    """xi = F^{-1}(Phi_N(B_T^1/sqrt(T))) with survival 1 - F = e^{-gamma x}/(1+x)^2.

    e^{gamma xi} is integrable (mean 1 + gamma) while e^{p xi} is not for any
    p > gamma, which makes this the borderline terminal for the declared
    gamma.
    """
    g = check_positive("gamma", gamma)

    def functional(paths, grid):
        w = paths[:, -1, 0] / np.sqrt(grid.horizon)
        return survival_inverse(ndtr(-w), g)

    def of_value(b_terminal, horizon):
        b_terminal = np.asarray(b_terminal, dtype=float)
        w = b_terminal[..., 0] / np.sqrt(horizon)
        return survival_inverse(ndtr(-w), g)

    return TerminalSpec(
        name="critical",
        functional=functional,
        moment_order=g,
        description=f"borderline-integrable terminal at gamma={g}",
        of_terminal_value=of_value,
        params={"gamma": g},
    )


def terminal_builder(kind: str, params: dict | None = None) -> TerminalSpec:
    params = dict(params or {})
    if kind == "linear":
        return linear_terminal(params.get("vector", [1.0]))
    if kind == "abs":
        return abs_terminal(params.get("vector", [1.0]))
    if kind == "critical":
        return critical_terminal(params.get("gamma", 1.0))
    raise ConfigurationError(f"unknown terminal kind {kind!r}; use linear, abs, or critical")


# ---------------------------------------------------------------------------
# measure changes


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """A control q with its exponential-martingale weights on an ensemble.

    log_weights[k] accumulates sum q.dB - 0.5|q|^2 dt up to node k with
    left-endpoint evaluation; shift accumulates the drift integral of q; l2
    accumulates |q|^2 dt.  overflow marks paths whose weight exceeds float
    range at some node; estimators drop them and report the count.
    """

    label: str
    q: Callable[[float, np.ndarray], np.ndarray]
    log_weights: np.ndarray
    shift: np.ndarray
    l2: np.ndarray
    markov: bool = True

    @property
    def weights(self) -> np.ndarray:
        return np.exp(np.minimum(self.log_weights, _LOG_OVERFLOW))

    @property
    def overflow(self) -> np.ndarray:
        return np.any(self.log_weights > _LOG_OVERFLOW, axis=1)

    @property
    def terminal_log_weights(self) -> np.ndarray:
        return self.log_weights[:, -1]

    def terminal_l2(self) -> np.ndarray:
        return self.l2[:, -1]


def as_control_map(q) -> Callable[[float, np.ndarray], np.ndarray]:
    """Lift a constant (scalar or vector) to a control map (t, b) -> (..., d)."""
    if callable(q):
        return q
    vec = np.atleast_1d(np.asarray(q, dtype=float))

    def control(t, b):
        b = np.asarray(b, dtype=float)
        return np.broadcast_to(vec, b.shape[:-1] + (vec.size,))

    return control


def doleans(q, ens: PathEnsemble, label: str = "q", markov: bool = True) -> ControlProcess:
    """Accumulate the exponential-martingale weights of a control on ens."""
    qmap = as_control_map(q)
    paths = ens.paths
    m, n_nodes, d = paths.shape
    dt = ens.grid.dt
    log_w = np.zeros((m, n_nodes))
    shift = np.zeros((m, n_nodes, d))
    l2 = np.zeros((m, n_nodes))
    for k in range(n_nodes - 1):
        qk = np.asarray(qmap(float(ens.grid.nodes[k]), paths[:, k, :]), dtype=float)
        qk = np.broadcast_to(qk, (m, d))
        if not np.all(np.isfinite(qk)):
            raise ConfigurationError(f"control {label!r} is non-finite at step {k}")
        db = paths[:, k + 1, :] - paths[:, k, :]
        q2 = np.sum(qk * qk, axis=1)
        log_w[:, k + 1] = log_w[:, k] + np.sum(qk * db, axis=1) - 0.5 * q2 * dt[k]
        shift[:, k + 1, :] = shift[:, k, :] + qk * dt[k]
        l2[:, k + 1] = l2[:, k] + q2 * dt[k]
    return ControlProcess(label=label, q=qmap, log_weights=log_w, shift=shift, l2=l2, markov=markov)


# ---------------------------------------------------------------------------
# estimators


def mean_and_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        return np.nan, np.nan
    se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else np.inf
    return float(np.mean(x)), se


def weighted_mean_se(x: np.ndarray, w: np.ndarray) -> tuple[float, float, float]:
    """Self-normalised weighted mean with delta-method standard error and ESS."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    n = x.size
    sw = float(np.sum(w))
    if sw <= 0 or n == 0:
        return np.nan, np.nan, 0.0
    est = float(np.sum(w * x) / sw)
    resid = w * (x - est)
    se = float(np.sqrt(np.sum(resid * resid)) / sw)
    ess = sw * sw / float(np.sum(w * w))
    return est, se, ess


@dataclass
class EntropyReport:
    """Primal E[M ln M] vs dual 0.5 E^Q[int |q|^2 ds] estimates."""

    primal: float
    primal_se: float
    dual: float
    dual_se: float
    ess: float
    n_overflow: int

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.primal_se, self.dual_se))


def relative_entropy(ctrl: ControlProcess, ens: PathEnsemble) -> EntropyReport:
    keep = ~ctrl.overflow
    n_over = int(np.sum(~keep))
    log_wt = ctrl.terminal_log_weights[keep]
    wt = np.exp(log_wt)
    primal, primal_se = mean_and_se(wt * log_wt)
    dual, dual_se, ess = weighted_mean_se(0.5 * ctrl.terminal_l2()[keep], wt)
    return EntropyReport(primal, primal_se, dual, dual_se, ess, n_over)


@dataclass
class ExpMomentReport:
    estimate: float
    log_estimate: float
    standard_error: float
    tail_top1_mass: float
    overflow: bool


def exp_moment(p: float, samples: np.ndarray) -> ExpMomentReport:
    """Estimate E[e^{pX}] by log-sum-exp with a tail-heaviness diagnostic.

    tail_top1_mass is the fraction of the estimate carried by the largest 1%
    of the e^{pX} values; values near 1 mean the estimate is a tail artifact.
    """
    p = check_positive("p", p)
    x = p * np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ConfigurationError("exp_moment needs at least one sample")
    log_m1 = float(logsumexp(x) - np.log(n))
    log_m2 = float(logsumexp(2.0 * x) - np.log(n))
    overflow = log_m1 > _LOG_OVERFLOW or log_m2 > 2.0 * _LOG_OVERFLOW
    estimate = float(np.exp(log_m1)) if log_m1 <= _LOG_OVERFLOW else np.inf
    if not overflow:
        var = max(np.exp(log_m2) - np.exp(2.0 * log_m1), 0.0)
        se = float(np.sqrt(var / n))
    else:
        se = np.inf
    n_top = max(1, n // 100)
    top = np.partition(x, n - n_top)[n - n_top :]
    tail = float(np.exp(logsumexp(top) - logsumexp(x)))
    return ExpMomentReport(estimate, log_m1, se, tail, overflow)


def class_D_diagnostic(
    fam,
    values: np.ndarray,
    grid: TimeGrid,
    levels: Sequence[float] = (),
    budget: float | None = None,
    tail_threshold: float = 0.5,
) -> CheckReport:
    """Estimate sup over a finite stopping family of E[K(X_tau^+)].

    The family is every grid node plus the first hitting time of each level
    (capped at T).  This is a surrogate for the class-(D) criterion, not a
    proof: the report says whether the sup stays under the budget and whether
    any estimate is dominated by its top-1% tail.  fam must provide a
    vectorised log_K.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != grid.n_steps + 1:
        raise ConfigurationError(
            f"values must have shape (M, {grid.n_steps + 1}), got {values.shape}"
        )
    m, n_nodes = values.shape
    stops: list[tuple[str, np.ndarray]] = [
        (f"t={grid.nodes[k]:g}", values[:, k]) for k in range(n_nodes)
    ]
    for level in levels:
        hit = values >= float(level)
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), n_nodes - 1)
        stops.append((f"level={level:g}", values[np.arange(m), first]))

    witnesses = []
    sup_est = -np.inf
    sup_se = 0.0
    worst_tail = 0.0
    passed = True
    for label, x in stops:
        log_k = np.asarray(fam.log_K(np.maximum(x, 0.0)), dtype=float)
        log_est = float(logsumexp(log_k) - np.log(m))
        est = float(np.exp(log_est)) if log_est <= _LOG_OVERFLOW else np.inf
        log_m2 = float(logsumexp(2.0 * log_k) - np.log(m))
        se = (
            float(np.sqrt(max(np.exp(log_m2) - est * est, 0.0) / m))
            if log_m2 <= _LOG_OVERFLOW
            else np.inf
        )
        n_top = max(1, m // 100)
        top = np.partition(log_k, m - n_top)[m - n_top :]
        log_total = float(logsumexp(log_k))
        # K(X) identically 0 at a stop (e.g. the t = 0 node) carries no mass
        tail = float(np.exp(logsumexp(top) - log_total)) if np.isfinite(log_total) else 0.0
        worst_tail = max(worst_tail, tail)
        if est > sup_est:
            sup_est, sup_se = est, se
        bad = (budget is not None and est > budget) or not np.isfinite(est) or tail > tail_threshold
        if bad:
            passed = False
            witnesses.append(
                Witness(
                    "class_d_stop",
                    {"stop": label, "tail_top1_mass": tail},
                    est,
                    budget if budget is not None else np.inf,
                    True,
                )
            )
    if passed:
        witnesses = [
            Witness("class_d_stop", {"stop": "sup", "tail_top1_mass": worst_tail}, sup_est,
                    budget if budget is not None else np.inf, False)
        ]
    return CheckReport(
        passed=passed,
        witnesses=witnesses[:12],
        samples_used=m * len(stops),
        sampling_radius=float(np.max(np.abs(values))),
        details={
            "sup_estimate": sup_est,
            "sup_standard_error": sup_se,
            "worst_tail_top1_mass": worst_tail,
            "surrogate": 1.0,
        },
    )


# ---------------------------------------------------------------------------
# binary interchange

_HEADER_DTYPE = np.dtype("<u8")
_VALUE_DTYPE = np.dtype("<f8")


def _ensemble_blocks(ens: PathEnsemble) -> list[np.ndarray]:
    header = np.array(
        [ens.n_paths, ens.grid.n_steps, ens.dim, ens.seed], dtype=_HEADER_DTYPE
    )
    return [header, ens.grid.nodes.astype(_VALUE_DTYPE), np.ascontiguousarray(ens.paths, dtype=_VALUE_DTYPE)]


def ensemble_digest(ens: PathEnsemble) -> str:
    h = hashlib.sha256()
    for block in _ensemble_blocks(ens):
        h.update(block.tobytes())
    return h.hexdigest()


def _write_sidecar(path: str, meta: dict) -> None:
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_ensemble(path: str, ens: PathEnsemble) -> str:
    """Write header (M, N, d, seed as u64), grid nodes, then row-major paths."""
    with open(path, "wb") as fh:
        for block in _ensemble_blocks(ens):
            fh.write(block.tobytes())
    digest = ensemble_digest(ens)
    _write_sidecar(
        path,
        {
            "kind": "ensemble",
            "M": ens.n_paths,
            "N": ens.grid.n_steps,
            "d": ens.dim,
            "seed": ens.seed,
            "rng_scheme": ens.rng_scheme,
            "sha256": digest,
        },
    )
    return digest


def _read_ensemble_from(fh) -> PathEnsemble:
    header = np.frombuffer(fh.read(4 * 8), dtype=_HEADER_DTYPE)
    if header.size != 4:
        raise ConfigurationError("truncated ensemble header")
    m, n, d, seed = (int(v) for v in header)
    nodes = np.frombuffer(fh.read((n + 1) * 8), dtype=_VALUE_DTYPE).copy()
    body = np.frombuffer(fh.read(m * (n + 1) * d * 8), dtype=_VALUE_DTYPE)
    if body.size != m * (n + 1) * d:
        raise ConfigurationError("truncated ensemble body")
    paths = body.reshape(m, n + 1, d).copy()
    return PathEnsemble(grid=TimeGrid(nodes), paths=paths, seed=seed)


def load_ensemble(path: str) -> PathEnsemble:
    with open(path, "rb") as fh:
        ens = _read_ensemble_from(fh)
    sidecar = path + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            meta = json.load(fh)
        scheme = meta.get("rng_scheme", RNG_SCHEME)
        object.__setattr__(ens, "rng_scheme", scheme)
    return ens


def save_solution(path: str, ens: PathEnsemble, y: np.ndarray, z: np.ndarray) -> str:
    """Ensemble layout followed by the Y block (M x (N+1)) and Z block (M x N x d)."""
    y = np.ascontiguousarray(y, dtype=_VALUE_DTYPE)
    z = np.ascontiguousarray(z, dtype=_VALUE_DTYPE)
    if y.shape != (ens.n_paths, ens.grid.n_steps + 1):
        raise ConfigurationError(f"Y block has shape {y.shape}, expected (M, N+1)")
    if z.shape != (ens.n_paths, ens.grid.n_steps, ens.dim):
        raise ConfigurationError(f"Z block has shape {z.shape}, expected (M, N, d)")
    with open(path, "wb") as fh:
        for block in _ensemble_blocks(ens):
            fh.write(block.tobytes())
        fh.write(y.tobytes())
        fh.write(z.tobytes())
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    digest = h.hexdigest()
    _write_sidecar(
        path,
        {
            "kind": "solution",
            "M": ens.n_paths,
            "N": ens.grid.n_steps,
            "d": ens.dim,
            "seed": ens.seed,
            "rng_scheme": ens.rng_scheme,
            "blocks": ["header", "nodes", "paths", "Y", "Z"],
            "sha256": digest,
        },
    )
    return digest


def load_solution(path: str) -> tuple[PathEnsemble, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        ens = _read_ensemble_from(fh)
        m, n, d = ens.n_paths, ens.grid.n_steps, ens.dim
        y = np.frombuffer(fh.read(m * (n + 1) * 8), dtype=_VALUE_DTYPE).reshape(m, n + 1).copy()
        z = np.frombuffer(fh.read(m * n * d * 8), dtype=_VALUE_DTYPE)
        if z.size != m * n * d:
            raise ConfigurationError("truncated solution Z block")
        z = z.reshape(m, n, d).copy()
    return ens, y, z
