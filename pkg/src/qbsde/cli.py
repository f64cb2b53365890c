"""Command line entry points.

Every subcommand reads a YAML config, resolves it against defaults, runs in a
content-addressed directory under --out named by the config hash and seed,
and writes report.json, summary.csv, and manifest.json there.  The exit
status is the machine-readable pass/fail channel: 0 pass, 1 suite failure,
2 configuration error.
"""

from __future__ import annotations

import csv
import json
import hashlib
import os
import sys
import time
from dataclasses import asdict, is_dataclass

import click
import numpy as np
import yaml

from . import __version__
from .conjugate import (
    conjugate_handle,
    conjugate_lower_bound_check,
    fenchel_young_check,
)
from .duality import (
    comparison_check,
    duality_certificate,
    shift_generator,
    uniqueness_crosscheck,
    z_moment_check,
)
from .exceptions import ConfigurationError, QbsdeError
from .generators import (
    FIXTURE_NAMES,
    GeneratorSpec,
    Probe,
    _family_g1,
    check_quadratic_growth,
    check_strictly_quadratic,
    check_strong_convexity,
    check_uniform_continuity,
    fixture,
)
from .solver import solve
from .stochastics import (
    TimeGrid,
    ensemble_digest,
    save_solution,
    simulate,
    terminal_builder,
)

_SCHEME_KEYS = {
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
}

_TOLERANCE_DEFAULTS = {
    "gap": 0.02,
    "crosscheck": 0.03,
    "slack_sigma": 4.0,
    "shift_profile": 0.02,
    "violation_fraction": 0.001,
}


# ---------------------------------------------------------------------------
# config handling


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a YAML mapping at top level")
    return cfg


def _resolve_config(cfg: dict, seed_override: int | None) -> dict:
    """Fill defaults and normalise so the result hashes stably and resolving
    an already resolved config is the identity."""
    known = {
        "fixture", "generator", "terminal", "grid", "ensemble", "scheme",
        "tolerances", "duality", "compare", "zmoment", "check", "conjugate",
        "crosscheck",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")

    if ("fixture" in cfg) == ("generator" in cfg):
        raise ConfigurationError("config needs exactly one of 'fixture' or 'generator'")

    out: dict = {}
    if "fixture" in cfg:
        fx = dict(cfg["fixture"]) if isinstance(cfg["fixture"], dict) else {"name": cfg["fixture"]}
        name = fx.get("name")
        if name not in FIXTURE_NAMES:
            raise ConfigurationError(f"fixture name must be one of {FIXTURE_NAMES}, got {name!r}")
        out["fixture"] = {
            "name": name,
            "gamma": float(fx.get("gamma", 1.0)),
            "radius": float(fx.get("radius", 0.1)),
        }
    else:
        gspec = dict(cfg["generator"])
        family = gspec.get("family")
        if family not in ("quadratic", "quadratic_minus_norm", "gtilde"):
            raise ConfigurationError(
                f"generator family must be a registered analytic form, got {family!r}"
            )
        out["generator"] = {
            "family": family,
            "gamma": float(gspec.get("gamma", 1.0)),
            "coef": float(gspec.get("coef", 0.5)),
            "alpha": float(gspec.get("alpha", 0.0)),
        }
        if gspec.get("gamma_bar") is not None:
            out["generator"]["gamma_bar"] = float(gspec["gamma_bar"])
        if gspec.get("strong_convexity") is not None:
            eps, c = gspec["strong_convexity"]
            out["generator"]["strong_convexity"] = [float(eps), float(c)]

    term = cfg.get("terminal")
    if term is not None:
        term = dict(term)
        kind = term.get("kind")
        if kind not in ("linear", "abs", "critical"):
            raise ConfigurationError(f"terminal kind must be linear, abs, or critical, got {kind!r}")
        out["terminal"] = {"kind": kind, "params": dict(term.get("params") or {})}
    elif "generator" in out:
        raise ConfigurationError("inline generators need an explicit terminal section")

    grid = dict(cfg.get("grid") or {})
    horizon = float(grid.get("T", 1.0))
    n_steps = int(grid.get("N", 50))
    if horizon <= 0 or n_steps < 1:
        raise ConfigurationError(f"grid needs T > 0 and N >= 1, got T={horizon}, N={n_steps}")
    out["grid"] = {"T": horizon, "N": n_steps}

    ens = dict(cfg.get("ensemble") or {})
    m = int(ens.get("M", 100_000))
    d = int(ens.get("d", 1))
    seed = int(ens.get("seed", 0)) if seed_override is None else int(seed_override)
    if m < 2 or d < 1:
        raise ConfigurationError(f"ensemble needs M >= 2 and d >= 1, got M={m}, d={d}")
    out["ensemble"] = {"M": m, "d": d, "seed": seed}

    scheme = dict(cfg.get("scheme") or {})
    bad = set(scheme) - _SCHEME_KEYS
    if bad:
        raise ConfigurationError(f"unknown scheme keys: {sorted(bad)}")
    out["scheme"] = scheme

    tol = dict(_TOLERANCE_DEFAULTS)
    tol.update(cfg.get("tolerances") or {})
    out["tolerances"] = {k: float(v) for k, v in tol.items()}

    for section in ("duality", "compare", "zmoment", "check", "conjugate", "crosscheck"):
        if cfg.get(section):
            out[section] = dict(cfg[section])
    return out


def _materialize(resolved: dict, threads: int) -> dict:
    """Turn a resolved config into live objects."""
    if "fixture" in resolved:
        fx = resolved["fixture"]
        bundle = fixture(fx["name"], gamma=fx["gamma"], radius=fx["radius"])
        gen = bundle.generator
        terminal = bundle.terminal
        declared = bundle.assumptions
    else:
        gspec = resolved["generator"]
        family = gspec["family"]
        coef_val = gspec["coef"]
        params = {"coef": (lambda t, b, c=coef_val: c)} if family == "quadratic" else {}
        alpha_val = gspec["alpha"]
        gen = GeneratorSpec(
            g1=_family_g1(family, params),
            g2=None,
            alpha=lambda t, b, a=alpha_val: np.full(np.asarray(b).shape[:-1], a),
            gamma=gspec["gamma"],
            gamma_bar=gspec.get("gamma_bar"),
            strong_convexity=(
                tuple(gspec["strong_convexity"]) if gspec.get("strong_convexity") else None
            ),
            family=family,
            family_params=params,
            description=f"{family} generator from config",
        )
        terminal = None
        declared = tuple(
            s
            for s, present in (
                ("A1", True),
                ("A2", gen.gamma_bar is not None),
                ("A3", gen.strong_convexity is not None),
                ("B", True),
            )
            if present
        )
    if "terminal" in resolved:
        terminal = terminal_builder(resolved["terminal"]["kind"], resolved["terminal"]["params"])
    if terminal is None:
        raise ConfigurationError("no terminal resolved")

    grid = TimeGrid.uniform(resolved["grid"]["T"], resolved["grid"]["N"])
    ens_cfg = resolved["ensemble"]
    ensemble = simulate(grid, ens_cfg["d"], ens_cfg["M"], seed=ens_cfg["seed"], threads=threads)
    return {
        "config": resolved,
        "generator": gen,
        "terminal": terminal,
        "handle": conjugate_handle(gen),
        "grid": grid,
        "ensemble": ensemble,
        "declared": declared,
        "scheme": dict(resolved["scheme"]),
        "tolerances": resolved["tolerances"],
        "threads": threads,
    }


# ---------------------------------------------------------------------------
# artifacts


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return str(obj)


def _run_dir(out_root: str, resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
    path = os.path.join(out_root, f"{digest}-{resolved['ensemble']['seed']}")
    os.makedirs(path, exist_ok=True)
    return path


def _versions() -> dict:
    from importlib.metadata import version

    out = {"qbsde": __version__, "python": sys.version.split()[0]}
    for dist in ("numpy", "scipy", "scikit-learn", "click", "PyYAML"):
        try:
            out[dist] = version(dist)
        except Exception:
            out[dist] = "unknown"
    return out


def _write_artifacts(rdir, command, resolved, report, summary, runtime, sha):
    with open(os.path.join(rdir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"command": command, "runtime_seconds": runtime, "report": _jsonable(report)},
            fh,
            indent=2,
        )
    with open(os.path.join(rdir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "value"])
        for key in sorted(summary):
            writer.writerow([key, repr(summary[key])])
    manifest = {
        "command": command,
        "config": resolved,
        "seed": resolved["ensemble"]["seed"],
        "versions": _versions(),
        "ensemble_sha256": sha,
        "summary": summary,
    }
    with open(os.path.join(rdir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(manifest), fh, indent=2)


class _RunLock:
    def __init__(self, rdir: str):
        self.path = os.path.join(rdir, "lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(
                f"run directory is locked by another process ({self.path}); "
                "remove the lock file if the run is dead"
            )
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


# ---------------------------------------------------------------------------
# runners: each returns (report, summary, passed, solution_or_None)


def _step_residuals(sol, gen, ens):
    """Mean one-step martingale residual and its standard error per step."""
    dt = ens.grid.dt
    n_steps = ens.grid.n_steps
    means = np.empty(n_steps)
    ses = np.empty(n_steps)
    for k in range(n_steps):
        g_val = np.asarray(
            gen.total(float(ens.grid.nodes[k]), ens.paths[:, k, :], sol.Z[:, k, :]), dtype=float
        )
        resid = sol.Y[:, k + 1] - sol.Y[:, k] - g_val * dt[k]
        means[k] = float(np.mean(resid))
        ses[k] = float(np.std(resid) / np.sqrt(ens.n_paths))
    return means, ses


def _run_solve(rz):
    sol = solve(rz["generator"], rz["terminal"], rz["ensemble"], **rz["scheme"])
    res_means, res_ses = _step_residuals(sol, rz["generator"], rz["ensemble"])
    residual_ok = bool(np.all(np.abs(res_means) <= 4.0 * res_ses + 1e-8))
    scheme_view = {
        k: v for k, v in sol.scheme.items() if k not in ("generator", "terminal")
    }
    report = {
        "y0": sol.y0,
        "y0_se": sol.y0_se,
        "scheme": scheme_view,
        "residuals": sol.residuals,
        "diagnostics": sol.diagnostics,
        "step_residual_means": res_means,
        "step_residual_ses": res_ses,
        "residual_ok": residual_ok,
    }
    summary = {
        "y0": sol.y0,
        "y0_se": sol.y0_se,
        "clip_fraction": float(sol.residuals["clip_fraction"]),
        "rank_warnings": int(sol.residuals["rank_warnings"]),
        "sup_abs_y": float(sol.diagnostics["sup_abs_y"]),
        "z_l2_mean": float(sol.diagnostics["z_l2_mean"]),
    }
    passed = (
        np.isfinite(sol.y0)
        and not sol.residuals["truncation_warning"]
        and residual_ok
    )
    return report, summary, bool(passed), sol


def _run_conjugate(rz):
    sec = rz["config"].get("conjugate", {})
    dim = rz["ensemble"].dim
    lower = conjugate_lower_bound_check(rz["handle"], dim=dim)
    fy = fenchel_young_check(
        rz["handle"],
        n_pairs=int(sec.get("n_pairs", 10_000)),
        radius=float(sec.get("radius", 8.0)),
        dim=dim,
        seed=int(sec.get("seed", 0)),
    )
    report = {"lower_bound": lower, "fenchel_young": fy}
    summary = {
        "lower_bound_passed": int(lower.passed),
        "fenchel_young_passed": int(fy.passed),
        "fenchel_young_violations": int(fy.details.get("violations", 0)),
        "max_equality_gap": float(fy.details.get("max_equality_gap", np.nan)),
    }
    return report, summary, bool(lower.passed and fy.passed), None


def _run_check(rz):
    sec = rz["config"].get("check", {})
    gen = rz["generator"]
    dim = rz["ensemble"].dim
    probe = Probe(
        radius=float(sec.get("radius", 10.0)),
        antipodal=bool(sec.get("antipodal", False)),
        seed=int(sec.get("seed", 0)),
    )
    results = {"A1": check_quadratic_growth(
        gen, probe, dim, include_perturbation=bool(sec.get("include_perturbation", False))
    )}
    if gen.gamma_bar is not None:
        results["A2"] = check_strictly_quadratic(gen, probe, dim)
    if gen.strong_convexity is not None:
        results["A3"] = check_strong_convexity(gen, probe=probe, dim=dim)
    results["B"] = check_uniform_continuity(gen, probe, dim)

    declared = set(rz["declared"])
    executed = set(results)
    report = {
        "declared": sorted(declared),
        "executed": sorted(executed),
        "results": results,
    }
    summary = {}
    for name, rep in results.items():
        summary[f"{name.lower()}_passed"] = int(rep.passed)
        summary[f"{name.lower()}_samples"] = int(rep.samples_used)
    mismatch = declared - executed
    passed = all(r.passed for r in results.values()) and not mismatch
    return report, summary, bool(passed), None


def _run_duality(rz):
    sec = rz["config"].get("duality", {})
    tol = rz["tolerances"]
    controls = None
    if "controls" in sec:
        controls = []
        for c in sec["controls"]:
            vec = np.zeros(rz["ensemble"].dim)
            vec[0] = float(c)
            controls.append((f"const_{float(c):+.2f}", vec))
    rep = duality_certificate(
        rz["generator"],
        rz["handle"],
        rz["terminal"],
        rz["ensemble"],
        controls=controls,
        include_qstar=bool(sec.get("include_qstar", True)),
        gap_tol=tol["gap"],
        slack_sigma=tol["slack_sigma"],
        threads=rz["threads"],
        **rz["scheme"],
    )
    summary = {
        "primal_y0": rep.primal_Y0,
        "qstar_value": rep.qstar_value if rep.qstar_value is not None else float("nan"),
        "gap": rep.gap,
        "domination_violations": int(rep.domination_violations),
        "n_controls": len(rep.dual_values),
        "n_failures": len(rep.failures),
    }
    return rep, summary, bool(rep.passed), None


def _run_crosscheck(rz):
    rep = uniqueness_crosscheck(
        rz["generator"], rz["terminal"], rz["ensemble"], tol=rz["tolerances"]["crosscheck"]
    )
    summary = {"max_gap": rep.max_gap, "nodewise_max_gap": rep.nodewise_max_gap}
    for label, val in zip(rep.labels, rep.values):
        summary[f"y0_{label}"] = val
    return rep, summary, bool(rep.passed), None


def _run_compare(rz):
    sec = rz["config"].get("compare", {})
    tol = rz["tolerances"]
    shift = float(sec.get("shift", 0.4))
    gen = rz["generator"]
    higher = shift_generator(gen, shift)
    rep = comparison_check(
        (gen, rz["terminal"]),
        (higher, rz["terminal"]),
        rz["ensemble"],
        slack_sigma=tol["slack_sigma"],
        violation_fraction_tol=tol["violation_fraction"],
        **rz["scheme"],
    )
    profile = (rz["grid"].horizon - rz["grid"].nodes) * shift
    profile_err = float(np.max(np.abs(rep.node_mean_gaps + profile)))
    summary = {
        "violation_fraction": rep.violation_fraction,
        "mean_violations": int(rep.mean_violations),
        "max_pathwise_excess": rep.max_pathwise_excess,
        "shift_profile_error": profile_err,
    }
    passed = rep.passed and profile_err <= tol["shift_profile"]
    return {"comparison": rep, "shift": shift, "profile_error": profile_err}, summary, bool(passed), None


def _run_zmoment(rz):
    sec = rz["config"].get("zmoment", {})
    sol = solve(rz["generator"], rz["terminal"], rz["ensemble"], **rz["scheme"])
    rep = z_moment_check(
        sol,
        rz["grid"],
        eta_grid=tuple(sec.get("eta_grid", (0.05, 0.1, 0.2, 0.4, 0.8))),
        lambda_grid=tuple(sec.get("lambda_grid", (0.5, 1.0, 2.0, 4.0))),
    )
    summary = {
        "i2_mean": rep.i2_mean,
        "i1_mean": rep.i1_mean,
        "largest_stable_eta": (
            rep.largest_stable_eta if rep.largest_stable_eta is not None else float("nan")
        ),
        "largest_stable_lambda": (
            rep.largest_stable_lambda if rep.largest_stable_lambda is not None else float("nan")
        ),
    }
    return rep, summary, rep.largest_stable_eta is not None, None


_RUNNERS = {
    "solve": _run_solve,
    "conjugate": _run_conjugate,
    "check": _run_check,
    "duality": _run_duality,
    "crosscheck": _run_crosscheck,
    "compare": _run_compare,
    "zmoment": _run_zmoment,
}


# ---------------------------------------------------------------------------
# click wiring


def _common(f):
    for opt in reversed(
        [
            click.option("--config", "config_path", required=True,
                         type=click.Path(exists=True, dir_okay=False),
                         help="YAML problem description."),
            click.option("--out", "out_root", default="runs", show_default=True,
                         type=click.Path(file_okay=False), help="Root for run directories."),
            click.option("--seed", default=None, type=int,
                         help="Override the ensemble seed from the config."),
            click.option("--threads", default=1, show_default=True, type=int,
                         help="Worker threads for path generation."),
        ]
    ):
        f = opt(f)
    return f


def _execute(command: str, config_path: str, out_root: str, seed: int | None, threads: int):
    try:
        resolved = _resolve_config(_load_config(config_path), seed)
        rz = _materialize(resolved, threads)
    except (ConfigurationError, yaml.YAMLError, OSError, ValueError, TypeError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        raise SystemExit(2)

    rdir = _run_dir(out_root, resolved)
    try:
        with _RunLock(rdir):
            start = time.perf_counter()
            try:
                report, summary, passed, sol = _RUNNERS[command](rz)
            except QbsdeError as exc:
                click.echo(f"{command} failed: {exc}", err=True)
                raise SystemExit(1)
            runtime = time.perf_counter() - start
            sha = ensemble_digest(rz["ensemble"])
            _write_artifacts(rdir, command, resolved, report, summary, runtime, sha)
            if sol is not None:
                save_solution(os.path.join(rdir, "solution.bin"), rz["ensemble"], sol.Y, sol.Z)
    except ConfigurationError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        raise SystemExit(2)
    click.echo(f"{command}: {'pass' if passed else 'fail'} ({rdir})")
    raise SystemExit(0 if passed else 1)


@click.group()
@click.version_option(version=__version__, prog_name="qbsde")
def main():
    """Numerical laboratory for split-generator quadratic BSDEs."""


def _register(name: str, help_text: str):
    @main.command(name=name, help=help_text)
    @_common
    def _cmd(config_path, out_root, seed, threads, _name=name):
        _execute(_name, config_path, out_root, seed, threads)

    return _cmd


_register("solve", "Solve the primal problem and store the solution.")
_register("conjugate", "Verify conjugate lower bounds and the pairing inequality.")
_register("check", "Run the assumption checkers against the declared classification.")
_register("duality", "Sweep dual controls and certify the value gap.")
_register("crosscheck", "Solve under independent schemes and compare initial values.")
_register("compare", "Order a problem against its shifted dominating version.")
_register("zmoment", "Estimate exponential moments of the Z integrals.")


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--threads", default=1, show_default=True, type=int)
def reproduce(manifest, threads):
    """Re-run a recorded manifest and compare against its stored values."""
    path = manifest
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        command = data["command"]
        if command not in _RUNNERS:
            raise ConfigurationError(f"manifest names unknown command {command!r}")
        resolved = _resolve_config(data["config"], None)
        rz = _materialize(resolved, threads)
    except (ConfigurationError, KeyError, json.JSONDecodeError, OSError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        raise SystemExit(2)

    drift = []
    sha = ensemble_digest(rz["ensemble"])
    if sha != data.get("ensemble_sha256"):
        drift.append(f"ensemble sha256 {sha} != recorded {data.get('ensemble_sha256')}")

    try:
        _report, summary, _passed, _sol = _RUNNERS[command](rz)
    except QbsdeError as exc:
        click.echo(f"reproduce failed during {command}: {exc}", err=True)
        raise SystemExit(1)

    recorded = data.get("summary", {})
    for key in sorted(set(recorded) | set(summary)):
        if key not in recorded or key not in summary:
            drift.append(f"summary key {key!r} present on one side only")
            continue
        old, new = recorded[key], summary[key]
        old_f, new_f = float(old), float(new)
        both_nan = np.isnan(old_f) and np.isnan(new_f)
        if not both_nan and abs(new_f - old_f) > 1e-12 * max(1.0, abs(old_f), abs(new_f)):
            drift.append(f"{key}: recorded {old!r}, got {new!r}")

    if drift:
        click.echo("reproduce: drift detected", err=True)
        for line in drift:
            click.echo("  " + line, err=True)
        raise SystemExit(1)
    click.echo(f"reproduce: pass ({command}, seed {resolved['ensemble']['seed']})")
    raise SystemExit(0)


if __name__ == "__main__":
    main()
