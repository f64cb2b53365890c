"""Rademacher-walk machinery: an exhaustive sign-path ensemble and an exact
recombining backward induction used as an oracle for the regression solver.

The walk takes steps of +-sqrt(dt) on a uniform grid, so after k steps the
state is m*sqrt(dt) for an integer m.  Node values are always computed as
integer times sqrt(dt) so equal nodes are bit-identical floats.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError
from .generators import GeneratorSpec
from .stochastics import PathEnsemble, TerminalSpec, TimeGrid
from .validation import check_int, check_positive

__all__ = ["rademacher_ensemble", "tree_backward_induction"]

_MAX_ENUM_STEPS = 20


def rademacher_ensemble(horizon: float, n_steps: int) -> PathEnsemble:
    """All 2^N sign paths of the +-sqrt(dt) walk as a d=1 ensemble.

    Path i takes an up step at stage k iff bit k of i is set, so the layout
    is deterministic with no RNG involved.
    """
    horizon = check_positive("horizon", horizon)
    n_steps = check_int("n_steps", n_steps, minimum=1)
    if n_steps > _MAX_ENUM_STEPS:
        raise ConfigurationError(
            f"exhaustive enumeration is capped at {_MAX_ENUM_STEPS} steps, got {n_steps}"
        )
    m = 1 << n_steps
    step = np.sqrt(horizon / n_steps)
    idx = np.arange(m, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n_steps)[None, :]) & 1
    signs = np.where(bits == 1, 1, -1).astype(np.int64)
    walk = np.concatenate([np.zeros((m, 1), dtype=np.int64), np.cumsum(signs, axis=1)], axis=1)
    paths = (walk.astype(float) * step)[:, :, None]
    grid = TimeGrid.uniform(horizon, n_steps)
    return PathEnsemble(grid=grid, paths=paths, seed=0, rng_scheme="rademacher-enumeration")


def tree_backward_induction(
    gen: GeneratorSpec,
    terminal: TerminalSpec,
    horizon: float,
    n_steps: int,
    return_tables: bool = False,
):
    """Exact backward induction on the recombining +-sqrt(dt) tree (d = 1).

    At level k the node with j up moves holds b = (2j - k) sqrt(dt);
    z = -(y_up - y_down)/(2 sqrt(dt)) and y = (y_up + y_down)/2 - g dt, the
    tree versions of the regression stepping rule.  Runs in O(N^2), so it
    also serves as a large-N comparison point.
    """
    horizon = check_positive("horizon", horizon)
    n_steps = check_int("n_steps", n_steps, minimum=1)
    if terminal.of_terminal_value is None:
        raise ConfigurationError(
            f"terminal {terminal.name!r} has no pointwise form; the tree oracle needs one"
        )
    dt = horizon / n_steps
    step = np.sqrt(dt)
    grid = np.linspace(0.0, horizon, n_steps + 1)

    j = np.arange(n_steps + 1)
    b_terminal = ((2 * j - n_steps).astype(float) * step)[:, None]
    y = np.asarray(terminal.of_terminal_value(b_terminal, horizon), dtype=float)
    y_tables = [y] if return_tables else None
    z_tables = [] if return_tables else None

    for k in range(n_steps - 1, -1, -1):
        j = np.arange(k + 1)
        b = ((2 * j - k).astype(float) * step)[:, None]
        y_down = y[:-1]
        y_up = y[1:]
        z = -(y_up - y_down) / (2.0 * step)
        g = np.asarray(gen.total(float(grid[k]), b, z[:, None]), dtype=float)
        y = 0.5 * (y_up + y_down) - g * dt
        if return_tables:
            y_tables.append(y)
            z_tables.append(z)
    y0 = float(y[0])
    if return_tables:
        return y0, y_tables[::-1], z_tables[::-1]
    return y0
