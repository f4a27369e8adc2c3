"""Command-line front end.

Subcommands ``solve``, ``simulate``, ``evaluate`` and ``verify`` read one
YAML config (see :mod:`tzliq.config`).  ``TZLIQ_OUT`` and ``TZLIQ_SEED``
override the output directory and seed; command-line flags override both.

Exit codes:

* 0: success
* 1: a Monte Carlo check (``evaluate``) failed
* 2: config or model validation failure (also: too few paths for ``evaluate``)
* 3: ladder non-convergence or non-monotonicity
* 4: missing surface artifact
* 10 + i: ``verify`` failed, ``i`` is the index of the first failing suite in
  ``validate, envelope, monotonicity, comparison, skorokhod, decay, holder``
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, fixtures
from .config import ConfigError, RunConfig, load_config
from .hjb import (
    Grid,
    LadderError,
    SolverError,
    load_surface,
    ode_envelopes,
    save_surface,
    scheme_error_estimate,
    solve_ladder,
    solve_truncated,
    write_surface_csv,
)
from .liquidation import Strategy, run_batch, run_strategy
from .model import ModelError, default_audit_grid, validate
from .pathsim import RngStream, simulate_batch, write_path_csv
from .verification import (
    SUITES,
    InsufficientPathsError,
    SuiteSettings,
    _mc_times,
    no_dark_pool_params,
    run_property_suites,
    verify_dominance,
    verify_value,
)

log = logging.getLogger("tzliq")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_LADDER = 3
EXIT_MISSING_ARTIFACT = 4
EXIT_SUITE_BASE = 10

SURFACE_NPZ = "surface.npz"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _provenance(cfg: RunConfig, command: str) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.mc.seed, "tool_version": __version__, "command": command}


def _header(prov: dict) -> list[str]:
    return [f"{k}={v}" for k, v in prov.items()]


def _grid(cfg: RunConfig) -> Grid:
    g, p = cfg.grid, cfg.model
    return Grid.build(p.a, g.y_max, g.n_space, p.T, g.n_time, g.layer_steps, g.layer_ratio)


def _check_model(cfg: RunConfig) -> None:
    bad = validate(cfg.model, *default_audit_grid(cfg.model))
    if bad:
        raise CliError(f"model validation failed ({len(bad)} violations), first: {bad[0]}", EXIT_INVALID)


def _solve_kw(cfg: RunConfig) -> dict:
    return {"scheme": cfg.grid.scheme, "neumann": cfg.grid.neumann}


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    _check_model(cfg)
    prov = _provenance(cfg, "solve")
    grid = _grid(cfg)
    kw = _solve_kw(cfg)
    lad = cfg.ladder
    tau = lad.tau_mono
    if tau is None and len(lad.M_schedule) > 1:
        tau = max(10.0 * scheme_error_estimate(cfg.model, grid, lad.M_schedule[-1], **kw), 1e-10)
    lines = [f"# {h}" for h in _header(prov)]
    try:
        ladder = solve_ladder(cfg.model, grid, lad.M_schedule, tau_mono=tau if tau is not None else math.inf, **kw)
    except LadderError as e:
        (out / "ladder.log").write_text("\n".join(lines + [f"status=non-monotone {e}"]) + "\n")
        raise CliError(str(e), EXIT_LADDER) from None
    top = ladder.final
    for s in ladder.surfaces:
        lines.append(f"rung M={float(s.truncation_level)!r} u(0,a)={float(s.values[0, 0])!r}")
    converged = True
    if len(ladder.surfaces) == 1:
        lines.append("status=single rung")
    else:
        gap = ladder.gap(lad.t_cut)
        converged = gap < lad.eps_ladder
        lines.append(f"gap(t<={lad.t_cut})={float(gap)!r} eps_ladder={lad.eps_ladder!r} tau_mono={float(tau)!r}")
        lines.append("status=converged" if converged else "status=not converged")
    (out / "ladder.log").write_text("\n".join(lines) + "\n")

    if "csv" in cfg.output.formats:
        write_surface_csv(top, out / "surface.csv", _header(prov))
    save_surface(top, out / SURFACE_NPZ, prov)
    env = ode_envelopes(cfg.model, top.truncation_level)
    t = grid.t
    with open(out / "envelope.csv", "w") as fh:
        for h in _header(prov):
            fh.write(f"# {h}\n")
        fh.write("t,lower,upper\n")
        np.savetxt(fh, np.column_stack([t, env.lower(t), env.upper(t)]), delimiter=",", fmt="%.17g")
    if not converged:
        raise CliError(f"ladder not converged on [0, {lad.t_cut}]", EXIT_LADDER)
    return EXIT_OK


def _load_top(cfg: RunConfig, out: Path):
    path = out / SURFACE_NPZ
    if not path.exists():
        raise CliError(f"surface artifact {path} not found; run `tzliq solve` first", EXIT_MISSING_ARTIFACT)
    return load_surface(path)


def _strategies(cfg: RunConfig, out: Path) -> dict:
    names = cfg.mc.strategies
    strategies = {}
    surface = None
    if any(n != "twap" for n in names):
        surface = _load_top(cfg, out)
    for name in names:
        if name == "optimal-feedback":
            strategies[name] = Strategy(name, surface)
        elif name == "twap":
            strategies[name] = Strategy("twap")
        else:
            grid = Grid(surface.grid.y, surface.grid.t)
            ndp = solve_truncated(no_dark_pool_params(cfg.model), grid, float(surface.truncation_level), **_solve_kw(cfg))
            strategies[name] = Strategy(name, ndp)
    return strategies, surface


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    _check_model(cfg)
    prov = _provenance(cfg, "simulate")
    strategies, surface = _strategies(cfg, out)
    mc, p = cfg.mc, cfg.model
    t_cut = cfg.ladder.t_cut
    y0 = p.a if mc.y0 is None else mc.y0
    times = _mc_times(surface, 0.0, t_cut, mc.dt) if surface is not None else _euler(t_cut, mc.dt)
    batch = simulate_batch(p, y0, None, mc.n_paths, RngStream(mc.seed, 0), times=times, scheme=mc.reflection)
    res = run_batch(p, strategies, batch, mc.x0, t_cut, terminal_surface=surface)
    with open(out / "runs.csv", "w") as fh:
        for h in _header(prov):
            fh.write(f"# {h}\n")
        fh.write("path,strategy,cost_impact,cost_risk,cost_slippage,terminal_term,x_end,y_end\n")
        for i in range(mc.n_paths):
            for name, r in res.items():
                vals = (r.impact[i], r.risk[i], r.slippage[i], r.terminal_term[i], r.x_end[i], r.y_end[i])
                fh.write(f"{i},{name}," + ",".join(repr(float(v)) for v in vals) + "\n")
    k = min(mc.dump_paths, mc.n_paths)
    if k:
        # sample paths for inspection come from their own stream
        small = simulate_batch(p, y0, None, k, RngStream(mc.seed, 1), times=times, scheme=mc.reflection)
        for i, path in enumerate(small.paths()):
            write_path_csv(path, out / f"path_{i}.csv", out / f"path_{i}_events.csv", _header(prov))
            for name, strat in strategies.items():
                run = run_strategy(p, strat, path, mc.x0, t_cut)
                run.write_csv(out / f"run_{name}_{i}.csv", out / f"run_{name}_{i}_events.csv", _header(prov))
    return EXIT_OK


def _euler(t_end, dt):
    from .pathsim import euler_grid

    return euler_grid(t_end, dt)


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    _check_model(cfg)
    prov = _provenance(cfg, "evaluate")
    surface = _load_top(cfg, out)
    mc, p = cfg.mc, cfg.model
    y0 = p.a if mc.y0 is None else mc.y0
    grid = Grid(surface.grid.y, surface.grid.t)
    err = scheme_error_estimate(p, grid, float(surface.truncation_level), interpolated=True, **_solve_kw(cfg))
    value = verify_value(p, surface, mc.x0, y0, max(mc.n_paths, 1), cfg.ladder.t_cut, mc.dt, mc.seed, surface_error=err)
    strategies, _ = _strategies(cfg, out)
    dom = verify_dominance(p, surface, list(strategies.values()), mc.x0, y0, max(mc.n_paths, 1), cfg.ladder.t_cut, mc.dt, mc.seed)
    report = {
        "version": 1,
        "provenance": prov,
        "value": value.to_dict(),
        "dominance": [r.to_dict() for r in dom],
        "passed": bool(value.passed and all(r.passed for r in dom)),
    }
    (out / "evaluate.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    prov = _provenance(cfg, "verify")
    catalog = {}
    for name in cfg.verify.catalog:
        try:
            catalog[name] = fixtures.get(name)
        except KeyError as e:
            raise CliError(str(e.args[0]), EXIT_INVALID) from None
    g = cfg.grid
    settings = SuiteSettings(
        y_max=g.y_max - cfg.model.a, n_space=g.n_space, n_time=g.n_time,
        M_schedule=tuple(cfg.ladder.M_schedule), n_paths=cfg.verify.n_paths, dt=cfg.mc.dt,
        t_cut=cfg.ladder.t_cut, seed=cfg.mc.seed,
    )
    report = run_property_suites(catalog, settings, cfg.verify.suites)
    report.provenance = prov
    (out / "verify.json").write_text(report.to_json())
    (out / "verify_summary.csv").write_text("".join(f"# {h}\n" for h in _header(prov)) + report.summary_csv())
    fail = report.first_failure
    if fail is None:
        return EXIT_OK
    log.error("suite %s failed on fixture %s", fail.suite, fail.fixture)
    return EXIT_SUITE_BASE + SUITES.index(fail.suite)


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "evaluate": cmd_evaluate, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tzliq", description="Liquidation with dark pools and a reflected signal.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", help="output directory (overrides TZLIQ_OUT and the config)")
        sp.add_argument("--seed", type=int, help="random seed (overrides TZLIQ_SEED and the config)")
        sp.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        env_out, env_seed = os.environ.get("TZLIQ_OUT"), os.environ.get("TZLIQ_SEED")
        if env_out:
            cfg.output.directory = env_out
        if env_seed:
            cfg.mc.seed = int(env_seed)
        if args.out:
            cfg.output.directory = args.out
        if args.seed is not None:
            cfg.mc.seed = args.seed
        if args.paths is not None:
            if args.paths < 0:
                raise ConfigError("--paths must be nonnegative")
            cfg.mc.n_paths = args.paths
        out = Path(cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, out)
    except (ConfigError, ModelError) as e:
        print(f"tzliq: invalid configuration: {e}", file=sys.stderr)
        code = EXIT_INVALID
    except CliError as e:
        print(f"tzliq: {e}", file=sys.stderr)
        code = e.code
    except InsufficientPathsError as e:
        print(f"tzliq: {e}; raise mc.n_paths", file=sys.stderr)
        code = EXIT_INVALID
    except SolverError as e:
        print(f"tzliq: solver failure: {e}", file=sys.stderr)
        code = EXIT_INVALID
    except FileNotFoundError as e:
        print(f"tzliq: {e}", file=sys.stderr)
        code = EXIT_MISSING_ARTIFACT if args.command != "solve" else EXIT_INVALID
    return code


if __name__ == "__main__":
    sys.exit(main())
