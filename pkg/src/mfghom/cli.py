"""Command-line front end: TOML configuration, dispatch, reports.

One executable with subcommands; every run is driven by a config file whose
keys can be overridden with repeatable ``--set section.key=value`` flags
(flags win).  The cache directory resolves in the order: ``--cache-dir``
flag, ``MFGHOM_CACHE_DIR`` environment variable, ``io.cache_dir`` key.

Exit codes: 0 success, 2 solver non-convergence (reports are still written,
flagged ``converged: false``), 1 configuration or runtime error.  Diagnostics
go to standard error; standard output carries a one-line summary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError, MfgHomError
from . import effective, experiments
from .cell import solve_cell, solve_cell_coupled
from .eps_solver import PicardOptions, save_solution, solve_mfg_eps, aligned_grid
from .limit_solver import LimitProblem, solve_limit, residual_check
from .models import (
    HamiltonianModel,
    LocalCoupling,
    NonlocalCoupling,
    check_convexity,
    check_lip_condition,
    check_monotonicity,
)
from .torus import ScalarField, TorusGrid

COMMANDS = (
    "cell",
    "table",
    "solve-eps",
    "solve-limit",
    "converge",
    "ansatz",
    "two-scale",
    "potential",
    "check-assumptions",
)

# section -> key -> (default, type, (lo, hi) or tuple of choices or None)
SCHEMA = {
    "hamiltonian": {
        "kind": ("weighted-quadratic", str, ("quadratic", "quadratic-plus-potential", "weighted-quadratic")),
        "amplitude": (0.5, float, (0.0, 2.0)),
    },
    "coupling": {
        "kind": ("none", str, ("none", "local", "nonlocal")),
        "form": ("linear", str, ("linear", "weighted-linear")),
        "strength": (0.5, float, (-10.0, 10.0)),
        "weight_amplitude": (0.5, float, (0.0, 1.0)),
        "sigma": (0.2, float, (1e-3, 10.0)),
    },
    "cell": {
        "points": (64, int, (4, 4096)),
        "p": (1.0, float, (-100.0, 100.0)),
        "m_param": (1.0, float, (0.0, 100.0)),
        "relaxation": (0.5, float, (0.05, 1.0)),
    },
    "table": {
        "p_min": (-1.0, float, (-100.0, 100.0)),
        "p_max": (1.0, float, (-100.0, 100.0)),
        "p_count": (9, int, (2, 129)),
        "m_min": (1.0, float, (0.0, 100.0)),
        "m_max": (1.0, float, (0.0, 100.0)),
        "m_count": (1, int, (1, 65)),
        "cell_points": (64, int, (4, 1024)),
    },
    "picard": {
        "damping": (0.5, float, (0.0, 1.0)),
        "tol": (1e-7, float, (0.0, 1.0)),
        "max_iters": (200, int, (1, 100000)),
        "averaging": ("fixed-damping", str, ("fixed-damping", "fictitious-play")),
    },
    "run": {
        "eps": (0.25, float, (0.0, 1.0)),
        "T": (0.5, float, (1e-6, 100.0)),
        "p_lin": (1.0, float, (-100.0, 100.0)),
        "macro_cells": (1, int, (1, 64)),
        "cell_points": (16, int, (4, 512)),
        "u0_amplitude": (0.0, float, (-10.0, 10.0)),
        "mT_modulation": (0.0, float, (-0.99, 0.99)),
        "cfl_safety": (0.4, float, (0.01, 0.5)),
        "alpha_bound": (2.5, float, (0.1, 100.0)),
    },
    "experiment": {
        "eps_list": ([0.25, 0.125, 0.0625, 0.03125], list, None),
        "mT_modulation": (0.0, float, (-0.99, 0.99)),
        "macro_cells": (1, int, (1, 64)),
        "limit_points": (64, int, (8, 2048)),
        "limit_steps": (256, int, (8, 100000)),
        "subtract_correctors": (True, bool, None),
        "prepare_data": (True, bool, None),
        "bank_p_pad": (1.0, float, (0.1, 10.0)),
        "bank_p_count": (11, int, (2, 65)),
        "bank_m_min": (0.2, float, (0.0, 10.0)),
        "bank_m_max": (2.4, float, (0.0, 20.0)),
        "bank_m_count": (12, int, (1, 65)),
        "sample_times": (3, int, (1, 16)),
    },
    "potential": {
        "perturbations": (20, int, (1, 1000)),
        "seed": (0, int, (0, 2**31 - 1)),
        "amplitude": (0.01, float, (0.0, 1.0)),
    },
    "assumptions": {
        "p_box": (10.0, float, (0.1, 1000.0)),
        "samples": (5, int, (1, 101)),
        "trials": (20, int, (1, 10000)),
        "seed": (0, int, (0, 2**31 - 1)),
        "theta": (0.5, float, (0.0, 1.0)),
        "p_radius": (5.0, float, (0.1, 1000.0)),
    },
    "io": {
        "cache_dir": ("", str, None),
        "output": ("", str, None),
        "csv_output": ("", str, None),
        "solution_output": ("", str, None),
        "workers": (1, int, (1, 256)),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration: a command plus fully-defaulted sections."""

    command: str
    sections: dict

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def canonical_toml(self) -> str:
        """Emit the canonical form: every key present, sections and keys sorted."""
        lines = []
        for section in sorted(self.sections):
            lines.append(f"[{section}]")
            for key in sorted(self.sections[section]):
                val = self.sections[section][key]
                if isinstance(val, bool):
                    rep = "true" if val else "false"
                elif isinstance(val, str):
                    rep = json.dumps(val)
                elif isinstance(val, list):
                    rep = "[" + ", ".join(repr(float(v)) for v in val) + "]"
                else:
                    rep = repr(val)
                lines.append(f"{key} = {rep}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, command: str = "cell") -> RunConfig:
    """Parse and validate; reports every problem found, not just the first."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML parse error: {exc}"])

    problems = []
    if command not in COMMANDS:
        problems.append(f"unknown command {command!r}; expected one of {COMMANDS}")
    sections = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"[{section}] must be a table")
            given = {}
        out = {}
        for key, (default, typ, bounds) in keys.items():
            val = given.get(key, default)
            if typ is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if typ is list:
                if not isinstance(val, list) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in val
                ):
                    problems.append(f"{section}.{key} must be a list of numbers")
                    val = default
                val = [float(v) for v in val]
            elif not isinstance(val, typ) or (typ is not bool and isinstance(val, bool)):
                problems.append(
                    f"{section}.{key} must have type {typ.__name__}, got {val!r}"
                )
                val = default
            if bounds is not None and typ in (int, float):
                lo, hi = bounds
                if not lo <= val <= hi:
                    problems.append(
                        f"{section}.{key} = {val!r} outside allowed range [{lo}, {hi}]"
                    )
            elif bounds is not None and typ is str and val not in bounds:
                problems.append(
                    f"{section}.{key} = {val!r} not one of {bounds}"
                )
            out[key] = val
        for key in given:
            if key not in keys:
                problems.append(f"unknown key {section}.{key}")
        sections[section] = out
    for section in raw:
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
    if problems:
        raise ConfigError(problems)
    return RunConfig(command=command, sections=sections)


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` overrides on top of a parsed config."""
    sections = {s: dict(v) for s, v in config.sections.items()}
    problems = []
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override {item!r} must look like section.key=value")
            continue
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            problems.append(f"unknown override target {target!r}")
            continue
        default, typ, _ = SCHEMA[section][key]
        try:
            if typ is bool:
                parsed = value.lower() in ("1", "true", "yes")
            elif typ is list:
                parsed = [float(v) for v in value.split(",") if v]
            else:
                parsed = typ(value)
        except ValueError:
            problems.append(f"cannot parse override {item!r} as {typ.__name__}")
            continue
        sections[section][key] = parsed
    if problems:
        raise ConfigError(problems)
    # revalidate through the canonical emitter
    merged = RunConfig(command=config.command, sections=sections)
    return parse_config(merged.canonical_toml(), command=config.command)


# ---------------------------------------------------------------------------
# model construction from config
# ---------------------------------------------------------------------------


def _hamiltonian(config: RunConfig) -> HamiltonianModel:
    sec = config["hamiltonian"]
    return HamiltonianModel(sec["kind"], sec["amplitude"])


def _coupling(config: RunConfig):
    sec = config["coupling"]
    if sec["kind"] == "none":
        return None
    if sec["kind"] == "local":
        return LocalCoupling(sec["form"], sec["strength"], sec["weight_amplitude"])
    return NonlocalCoupling(sec["sigma"])


def _picard(config: RunConfig) -> PicardOptions:
    sec = config["picard"]
    return PicardOptions(
        damping=sec["damping"],
        tol=sec["tol"],
        max_iters=sec["max_iters"],
        averaging=sec["averaging"],
    )


def _cache_dir(config: RunConfig, flag) -> str | None:
    if flag:
        return flag
    env = os.environ.get("MFGHOM_CACHE_DIR", "")
    if env:
        return env
    return config["io"]["cache_dir"] or None


def _write_json(path: str, payload: dict):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# command implementations (each returns the exit code)
# ---------------------------------------------------------------------------


def _cmd_cell(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    sec = config["cell"]
    grid = TorusGrid(1, 1, sec["points"])
    if F is not None and F.kind == "local" and F.strength != 0.0:
        cs = solve_cell_coupled(H, F, [sec["p"]], m_param=sec["m_param"], grid=grid,
                                relaxation=sec["relaxation"])
    else:
        const = 0.0 if F is None else (F.value_at_constant(sec["m_param"]) if F.kind == "nonlocal" else 0.0)
        cs = solve_cell(H, [sec["p"]], ScalarField.constant(grid, const))
    drift = effective.effective_drift(cs)
    _write_json(config["io"]["output"], {
        "p": sec["p"], "h_bar": cs.h_bar, "b_bar": list(map(float, drift)),
        "residuals": {k: v for k, v in cs.residuals.items()},
    })
    print(f"cell p={sec['p']:g} h_bar={cs.h_bar:.12g} "
          f"hj={cs.residuals['hj']:.2e} fp={cs.residuals['fp']:.2e}")
    return 0


def _cmd_table(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    sec = config["table"]
    p_grid = np.linspace(sec["p_min"], sec["p_max"], sec["p_count"])
    m_grid = np.linspace(sec["m_min"], sec["m_max"], sec["m_count"])
    table = effective.build_table(
        H, F, p_grid, m_grid,
        cell_points=sec["cell_points"],
        workers=config["io"]["workers"],
        cache_dir=_cache_dir(config, args.cache_dir),
    )
    out = config["io"]["output"]
    if out:
        effective.save_table(out, table)
    inv = table.check_invariants()
    print(f"table hash={table.model_hash} shape={table.h_bar.shape} "
          f"convex_ok={inv['midpoint_convexity_ok']}")
    return 0


def _make_run_fields(config: RunConfig, grid: TorusGrid):
    sec = config["run"]
    (x,) = grid.coordinates()
    L = grid.cells_per_dim
    u0 = ScalarField(grid, sec["u0_amplitude"] * np.sin(2 * np.pi * x / L))
    mT = ScalarField(grid, 1.0 + sec["mT_modulation"] * np.cos(2 * np.pi * x / L))
    return u0, mT


def _cmd_solve_eps(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    sec = config["run"]
    eps = sec["eps"]
    grid = aligned_grid(1, sec["macro_cells"], sec["cell_points"], eps) if eps > 0 else (
        TorusGrid(1, sec["macro_cells"], sec["cell_points"])
    )
    u0, mT = _make_run_fields(config, grid)
    n_steps = int(np.ceil(sec["T"] * sec["alpha_bound"] / (sec["cfl_safety"] * grid.spacing)))
    sol = solve_mfg_eps(H, F, [sec["p_lin"]], u0, mT, eps, sec["T"], n_steps, _picard(config))
    if config["io"]["solution_output"]:
        save_solution(config["io"]["solution_output"], sol)
    _write_json(config["io"]["output"], {
        "eps": eps, "converged": sol.converged, "iterations": sol.iterations,
        "n_steps": n_steps, "points": grid.points_per_axis,
    })
    print(f"solve-eps eps={eps:g} converged={sol.converged} iters={sol.iterations}")
    return 0 if sol.converged else 2


def _cmd_solve_limit(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    tsec = config["table"]
    rsec = config["run"]
    p_grid = np.linspace(tsec["p_min"], tsec["p_max"], tsec["p_count"])
    m_grid = np.linspace(tsec["m_min"], tsec["m_max"], tsec["m_count"])
    table = effective.build_table(
        H, F, p_grid, m_grid, cell_points=tsec["cell_points"],
        workers=config["io"]["workers"], cache_dir=_cache_dir(config, args.cache_dir),
    )
    grid = TorusGrid(1, rsec["macro_cells"], rsec["cell_points"])
    u0, mT = _make_run_fields(config, grid)
    n_steps = int(np.ceil(rsec["T"] * rsec["alpha_bound"] / (rsec["cfl_safety"] * grid.spacing)))
    prob = LimitProblem(
        table, [rsec["p_lin"]], u0, mT, T=rsec["T"], n_steps=n_steps,
        coupling=F if (F is not None and F.kind == "nonlocal") else None,
    )
    sol = solve_limit(prob, _picard(config))
    hj, tr = residual_check(sol, prob)
    if config["io"]["solution_output"]:
        save_solution(config["io"]["solution_output"], sol)
    _write_json(config["io"]["output"], {
        "converged": sol.converged, "iterations": sol.iterations,
        "hj_residual": hj, "transport_residual": tr,
    })
    print(f"solve-limit converged={sol.converged} iters={sol.iterations} "
          f"hj={hj:.2e} transport={tr:.2e}")
    return 0 if sol.converged else 2


def _experiment_bank(config: RunConfig, H, F):
    esec = config["experiment"]
    rsec = config["run"]
    p = rsec["p_lin"]
    pad = esec["bank_p_pad"]
    p_nodes = np.linspace(p - pad, p + pad, esec["bank_p_count"])
    if F is None and esec["mT_modulation"] == 0.0:
        m_nodes = np.array([1.0])
    else:
        m_nodes = np.linspace(esec["bank_m_min"], esec["bank_m_max"], esec["bank_m_count"])
    return experiments.FieldBank(H, F, p_nodes, m_nodes, rsec["cell_points"])


def _cmd_converge(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    esec = config["experiment"]
    rsec = config["run"]
    bank = _experiment_bank(config, H, F)
    mod = esec["mT_modulation"]
    L = esec["macro_cells"]
    m_bar_T = None if mod == 0.0 else (lambda x: 1.0 + mod * np.cos(2 * np.pi * x / L))
    report = experiments.run_well_prepared(
        H, F, p=rsec["p_lin"],
        eps_list=esec["eps_list"],
        cell_points=rsec["cell_points"],
        T=rsec["T"],
        m_bar_T=m_bar_T,
        bank=bank,
        macro_cells=L,
        limit_points=esec["limit_points"],
        limit_steps=esec["limit_steps"],
        subtract_correctors=esec["subtract_correctors"],
        prepare_data=esec["prepare_data"],
        opts=_picard(config),
        cfl_safety=rsec["cfl_safety"],
        alpha_bound=rsec["alpha_bound"],
    )
    _write_json(config["io"]["output"], report.to_dict())
    if config["io"]["csv_output"]:
        Path(config["io"]["csv_output"]).write_text(report.to_csv())
    ok = all(report.metadata["converged"])
    print(f"converge rate_u={report.fitted_rate_u:.3f} rate_m={report.fitted_rate_m:.3f} "
          f"converged={ok}")
    return 0 if ok else 2


def _cmd_ansatz(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    if F is None or F.kind != "local":
        raise ConfigError(["ansatz requires a local coupling section"])
    esec = config["experiment"]
    rsec = config["run"]
    bank = _experiment_bank(config, H, F)
    L = esec["macro_cells"]
    mod = esec["mT_modulation"]
    lim_grid = TorusGrid(1, L, esec["limit_points"])
    (x,) = lim_grid.coordinates()
    mT = ScalarField(lim_grid, 1.0 + mod * np.cos(2 * np.pi * x / L))
    prob = LimitProblem(bank.to_table(), [rsec["p_lin"]],
                        ScalarField.constant(lim_grid, 0.0), mT,
                        T=rsec["T"], n_steps=esec["limit_steps"])
    limit_sol = solve_limit(prob, _picard(config))
    res = experiments.run_ansatz_residuals(
        H, F, limit_sol, rsec["eps"], p=rsec["p_lin"],
        cell_points=rsec["cell_points"], sample_times=esec["sample_times"],
    )
    _write_json(config["io"]["output"], res.to_dict())
    print(f"ansatz eps={rsec['eps']:g} hjb_sup={res.hjb_residual_sup:.3e} "
          f"fp_l1={res.fp_residual_l1:.3e} fredholm={res.fredholm_defect:.3e}")
    return 0 if limit_sol.converged else 2


def _cmd_two_scale(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    rsec = config["run"]
    eps = rsec["eps"]
    grid = aligned_grid(1, rsec["macro_cells"], rsec["cell_points"], eps)
    u0, mT = _make_run_fields(config, grid)
    n_steps = int(np.ceil(rsec["T"] * rsec["alpha_bound"] / (rsec["cfl_safety"] * grid.spacing)))
    sol = solve_mfg_eps(H, F, [rsec["p_lin"]], u0, mT, eps, rsec["T"], n_steps, _picard(config))
    bank = _experiment_bank(config, H, F)
    disc = experiments.two_scale_diagnostic(sol, bank, None, p=rsec["p_lin"])
    _write_json(config["io"]["output"], {"eps": eps, "discrepancies": disc})
    worst = max(disc.values())
    print(f"two-scale eps={eps:g} worst={worst:.3e} converged={sol.converged}")
    return 0 if sol.converged else 2


def _cmd_potential(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    if F is None or F.kind != "local":
        raise ConfigError(["potential requires a local coupling section"])
    rsec = config["run"]
    psec = config["potential"]
    result = experiments.potential_check(
        H, F,
        u_T_fn=lambda x: np.zeros_like(x),
        m_0_fn=lambda x: 1.0 + rsec["mT_modulation"] * np.cos(2 * np.pi * x),
        eps=rsec["eps"],
        cell_points=rsec["cell_points"],
        T=rsec["T"],
        perturbations=psec["perturbations"],
        seed=psec["seed"],
        amplitude=psec["amplitude"],
        opts=_picard(config),
        cfl_safety=rsec["cfl_safety"],
        alpha_bound=rsec["alpha_bound"],
    )
    sol = result.pop("solution")
    _write_json(config["io"]["output"], result)
    gap = min(result["J_perturbed"]) - result["J_opt"]
    print(f"potential J_opt={result['J_opt']:.6f} worst_gap={gap:.3e} "
          f"duality_defect={result['duality_defect']:.3e}")
    return 0 if sol.converged else 2


def _cmd_check_assumptions(config: RunConfig, args) -> int:
    H = _hamiltonian(config)
    F = _coupling(config)
    sec = config["assumptions"]
    reports = []
    conv = check_convexity(H, p_box=sec["p_box"], samples=sec["samples"])
    reports.append(conv)
    if F is not None:
        reports.append(check_monotonicity(F, trials=sec["trials"], seed=sec["seed"]))
    lip = check_lip_condition(H, F, theta=sec["theta"], p_radius=sec["p_radius"],
                              eps=config["run"]["eps"])
    reports.append(lip)
    payload = {
        "note": lip.note,
        "checks": [
            {
                "name": r.name,
                "passed": bool(r.passed),
                "worst_value": r.worst_value,
                "witness": r.witness,
                "note": r.note,
            }
            for r in reports
        ],
    }
    _write_json(config["io"]["output"], payload)
    summary = " ".join(f"{r.name}={'pass' if r.passed else 'FAIL'}" for r in reports)
    print(f"check-assumptions {summary}")
    return 0


DISPATCH = {
    "cell": _cmd_cell,
    "table": _cmd_table,
    "solve-eps": _cmd_solve_eps,
    "solve-limit": _cmd_solve_limit,
    "converge": _cmd_converge,
    "ansatz": _cmd_ansatz,
    "two-scale": _cmd_two_scale,
    "potential": _cmd_potential,
    "check-assumptions": _cmd_check_assumptions,
}


def run(config: RunConfig, args=None) -> int:
    """Execute a validated config; returns the process exit code."""
    if args is None:
        args = argparse.Namespace(cache_dir=None)
    try:
        return DISPATCH[config.command](config, args)
    except ConfigError:
        raise
    except MfgHomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfghom",
        description="Homogenization toolkit for periodic viscous MFG systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cp = sub.add_parser(name)
        cp.add_argument("--config", type=str, default=None, help="TOML config file")
        cp.add_argument(
            "--set", action="append", dest="overrides", metavar="SECTION.KEY=VALUE",
            help="override a config key (repeatable; flags win over the file)",
        )
        cp.add_argument("--cache-dir", type=str, default=None)
        cp.add_argument("--output", type=str, default=None)
        cp.add_argument("--emit-config", action="store_true",
                        help="print the canonicalized config and exit")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text() if args.config else ""
        config = parse_config(text, command=args.command)
        config = apply_overrides(config, args.overrides)
        if args.output:
            sections = {s: dict(v) for s, v in config.sections.items()}
            sections["io"]["output"] = args.output
            config = RunConfig(command=config.command, sections=sections)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1

    if args.emit_config:
        print(config.canonical_toml())
        return 0

    try:
        return run(config, args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
