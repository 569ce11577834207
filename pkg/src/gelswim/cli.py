"""Command line interface.

Exit codes: 0 success, 2 configuration or input error, 3 solver or stage
failure, 4 design search found no admissible design.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 2, 3, 4

log = logging.getLogger("gelswim")


class InfeasibleTarget(RuntimeError):
    pass


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_json(path) -> dict:
    from .pipeline import ConfigError
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _load_config(args):
    from .pipeline import ConfigError, PipelineConfig
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg


def _cache_dir(args, out: Path) -> Path:
    return Path(args.cache) if args.cache else out / "cache"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit_material(args, out: Path) -> int:
    """Fit (Nv, lambda0) per curve; fit laser power trends when enough powers are given."""
    from .materials import CompressionCurve, fit_compression, fit_power_trend, save_params_table
    from .pipeline import ConfigError
    from .export import write_json
    entries = []
    if args.config:
        entries = _load_json(args.config).get("curves", [])
        base = Path(args.config).parent
        entries = [dict(e, file=str(base / e["file"])) for e in entries]
    entries += [{"file": f, "environment": args.environment, "laser_power": args.laser_power}
                for f in args.curves]
    if not entries:
        raise ConfigError("no compression curves given")
    table, rows = {}, []
    for e in entries:
        try:
            curve = CompressionCurve.from_csv(e["file"], e.get("environment", "water"),
                                              e.get("laser_power"))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"bad curve {e.get('file')}: {exc}") from exc
        fit = fit_compression(curve)
        lp = float(e["laser_power"]) if e.get("laser_power") is not None else float("nan")
        table[(lp, curve.environment)] = fit.params
        rows.append({"file": Path(e["file"]).name, "laser_power_mW": lp,
                     "environment": curve.environment, **fit.params.to_dict(),
                     "rms_residual_Pa": fit.rms_residual, "converged": fit.converged})
    save_params_table(out / "material_params.json", table)
    summary = {"fits": rows}
    by_env = {}
    for (lp, env), p in table.items():
        if lp == lp:
            by_env.setdefault(env, []).append((lp, p))
    trends = {}
    for env, pts in by_env.items():
        if len({lp for lp, _ in pts}) >= 4:
            trends[env] = {"nv": fit_power_trend([(lp, p.Nv) for lp, p in pts]).to_dict(),
                           "lambda0": fit_power_trend([(lp, p.lambda0) for lp, p in pts]).to_dict()}
    summary["trends"] = trends
    write_json(out / "material_fits.json", summary)
    return EXIT_OK


def cmd_swell(args, out: Path) -> int:
    from .helix import write_polyline
    from .pipeline import DeformationCache, analyse_shape, solve_environments
    from .strip import build_mesh
    from .export import write_json
    cfg = _load_config(args)
    mesh = build_mesh(cfg.design, cfg.voxel)
    states = solve_environments(cfg, DeformationCache(_cache_dir(args, out)), mesh)
    for env, state in zip(cfg.environments, states):
        state.write_report(out / f"solver_{env.name}.json")
        state.write_vtk(mesh, out / f"deformed_{env.name}.vtk")
        cl, helix = analyse_shape(mesh, state)
        write_polyline(out / f"centerline_{env.name}.csv", cl)
        if helix is not None:
            helix.save(out / f"helix_{env.name}.json")
        else:
            write_json(out / f"helix_{env.name}.json", {"straight": True})
    return EXIT_OK


def cmd_fit_helix(args, out: Path) -> int:
    from .helix import fit_helix, read_polyline
    from .pipeline import ConfigError
    if not args.polyline:
        raise ConfigError("fit-helix needs a polyline CSV")
    try:
        pts = read_polyline(args.polyline)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad polyline: {exc}") from exc
    fit_helix(pts).save(out / "helix.json")
    return EXIT_OK


def _env_fluid(args, cfg):
    from .magdyn import FLUIDS
    from .pipeline import ConfigError
    if cfg is None:
        return FLUIDS[args.fluid] if args.fluid else FLUIDS["water"]
    if args.environment:
        for e in cfg.environments:
            if e.name == args.environment:
                return e.fluid
        raise ConfigError(f"no environment named {args.environment}")
    return cfg.environments[0].fluid


def _body_from_args(args):
    from .helix import HelixParams
    from .pipeline import ConfigError, PipelineConfig, build_body
    from .strip import StripDesign
    if not args.helix:
        raise ConfigError("--helix is required")
    try:
        helix = HelixParams.load(args.helix)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad helix file: {exc}") from exc
    cfg = _load_config(args) if args.config else PipelineConfig(
        StripDesign(), [], None)
    fluid = _env_fluid(args, cfg if args.config else None)
    return cfg, helix, build_body(cfg, helix, fluid), fluid


def cmd_mobility(args, out: Path) -> int:
    _, _, (beads, body), _ = _body_from_args(args)
    beads.save(out / "beads.json")
    body.mobility.save_json(out / "mobility.json")
    body.mobility.write_csv(out / "mobility.csv")
    return EXIT_OK


def cmd_freq_response(args, out: Path) -> int:
    from .export import export_report
    from .magdyn import frequency_response
    from .pipeline import DEFAULT_FIELD, _field_program, _round
    cfg, helix, (_, body), fluid = _body_from_args(args)
    fp = cfg.field_program if args.config else dict(DEFAULT_FIELD)
    resp = frequency_response(body, _field_program(fp))
    resp.to_csv(out / f"frequency_{fluid.name}.csv")
    export_report(_round({"environments": {fluid.name: {"frequency_response": resp.to_dict(),
                                                        "step_out_hz": resp.step_out}}}),
                  out, formats=("svg",))
    return EXIT_OK


def cmd_pipeline(args, out: Path) -> int:
    from .export import export_report, write_json
    from .pipeline import run_pipeline, run_sweep
    cfg = _load_config(args)
    cache = _cache_dir(args, out)
    report = run_pipeline(cfg, cache)
    sweep = None
    if cfg.sweep:
        (param, values), = cfg.sweep.items()
        sweep = run_sweep(cfg, param, values, cache).to_dict()
    export_report(report.to_dict(), out, recipe=cfg.recipe, sweep=sweep)
    write_json(out / "config.resolved.json", cfg.to_dict())
    for name, r in report.environments.items():
        if r.helix is not None:
            r.helix.save(out / f"helix_{name}.json")
    return EXIT_OK


def cmd_search(args, out: Path) -> int:
    from .export import write_json
    from .pipeline import ConfigError, SwimTarget, _round, design_search
    cfg = _load_config(args)
    search = cfg.search
    if not search or "grid" not in search or "target" not in search:
        raise ConfigError("search needs 'search': {'grid': ..., 'target': ...} in the config")
    target = SwimTarget(float(search["target"]["frequency"]), search["target"].get("environments"))
    ranked, entries = design_search(target, search["grid"], cfg, _cache_dir(args, out))
    as_dict = lambda e: {"design": e.design, "satisfied": e.satisfied, "score": e.score,  # noqa: E731
                         "reason": e.reason}
    write_json(out / "search.json", _round({"ranked": [as_dict(e) for e in ranked],
                                            "evaluated": [as_dict(e) for e in entries]}))
    if not ranked:
        raise InfeasibleTarget("no design satisfies the target")
    return EXIT_OK


def cmd_report(args, out: Path) -> int:
    from .export import export_report
    from .pipeline import ConfigError
    if not args.input:
        raise ConfigError("report needs --input report.json")
    report = _load_json(args.input)
    sweep = _load_json(args.sweep) if args.sweep else None
    if "environments" not in report:
        raise ConfigError("input is not a pipeline report")
    export_report(report, out, sweep=sweep)
    return EXIT_OK


COMMANDS = {"fit-material": cmd_fit_material, "swell": cmd_swell, "fit-helix": cmd_fit_helix,
            "mobility": cmd_mobility, "freq-response": cmd_freq_response,
            "pipeline": cmd_pipeline, "search": cmd_search, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline JSON config")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
    common.add_argument("--cache", help="deformation cache directory (default: <out>/cache)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gelswim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    fm = sub.add_parser("fit-material", parents=[common], help="fit compression curves")
    fm.add_argument("curves", nargs="*", help="CSV files with lambda1_prime,sigma1_prime_Pa")
    fm.add_argument("--environment", default="water")
    fm.add_argument("--laser-power", type=float)
    sub.add_parser("swell", parents=[common], help="solve swollen shapes for every environment")
    fh = sub.add_parser("fit-helix", parents=[common], help="fit a helix to a centerline CSV")
    fh.add_argument("polyline", nargs="?")
    for name, text in (("mobility", "bead model and 6x6 mobility of a helix with head"),
                       ("freq-response", "swimming speed versus field frequency")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--helix", help="helix JSON from fit-helix or swell")
        sp.add_argument("--environment", help="environment name in --config for the fluid")
        sp.add_argument("--fluid", choices=["water", "ipa"], help="fluid when no config is given")
    sub.add_parser("pipeline", parents=[common], help="full design pipeline")
    sub.add_parser("search", parents=[common], help="grid search for designs meeting a target")
    rp = sub.add_parser("report", parents=[common], help="re-export CSV/SVG from a report JSON")
    rp.add_argument("--input")
    rp.add_argument("--sweep")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _set_threads(args.threads)

    from .helix import HelixFitError
    from .hydro import GeometryError
    from .materials import MaterialError
    from .pipeline import ConfigError, PipelineError
    from .solver import SolverError
    from .strip import DesignError

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except InfeasibleTarget as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PipelineError, SolverError, HelixFitError, GeometryError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, DesignError, MaterialError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
