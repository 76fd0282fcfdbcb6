"""Command line entry point: ``steklovhom <mesh|cell|limit|eps|study> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .coeff import ExprError
from .fem import SolverError
from .geometry import EpsilonLevel, MeshError, build_cell_mesh, build_perforated_domain_mesh, build_square_mesh, mesh_write
from .homog import HomogError
from .study import (
    CASE_ALIASES, ConfigError, StudyConfig, StudyError, emit_reports, load_config, run_homogenization, run_level,
    run_limits, run_study,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("steklovhom")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML study configuration")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--format", default="csv,json,svg", help="comma separated subset of csv,json,svg")
    common.add_argument("--threads", type=int, default=None, help="worker threads for epsilon levels")
    common.add_argument("--seed", type=int, default=None, help="solver seed (default: derived from the config)")
    common.add_argument("--case-override", choices=["pos", "neg", "crit"], default=None)
    common.add_argument("--no-cache", action="store_true", help="ignore and do not write cached artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="steklovhom", description="Steklov spectral homogenization toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    m = sub.add_parser("mesh", parents=[common], help="build and write the cell, domain and limit meshes")
    m.add_argument("--level", type=int, action="append", help="only these epsilon levels n (repeatable)")
    sub.add_parser("cell", parents=[common], help="correctors and effective data")
    sub.add_parser("limit", parents=[common], help="limit spectra")
    e = sub.add_parser("eps", parents=[common], help="one epsilon-level solve")
    e.add_argument("--level", type=int, required=True, help="n, with epsilon = 1/n")
    sub.add_parser("study", parents=[common], help="full pipeline with reports")
    return p


def _configure(args) -> StudyConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg.output = args.out
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must fit in an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.case_override:
        cfg.case_override = CASE_ALIASES[args.case_override]
    return cfg


def _formats(text: str):
    fmts = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fmts if f not in ("csv", "json", "svg")]
    if bad or not fmts:
        raise ConfigError(f"--format accepts csv, json, svg; got {text!r}")
    return fmts


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def _cmd_mesh(cfg, args) -> list:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    cell = build_cell_mesh(cfg.geometry)
    mesh_write(cell, out / "cell.mesh")
    written.append(out / "cell.mesh")
    for n in args.level or cfg.levels:
        dom = build_perforated_domain_mesh(cfg.geometry, EpsilonLevel(n), max_dofs=cfg.max_dofs, cell=cell)
        mesh_write(dom, out / f"omega_eps_{n}.mesh")
        written.append(out / f"omega_eps_{n}.mesh")
    mesh_write(build_square_mesh(cfg.m_limit), out / "omega_limit.mesh")
    written.append(out / "omega_limit.mesh")
    return written


def _cmd_cell(cfg, args) -> list:
    _, data = run_homogenization(cfg, cache=not args.no_cache)
    q = data.q
    print(f"case {data.case}  M_S(rho) = {data.M_S_rho:.12g}  q = [{q.q11:.10g}, {q.q12:.3g}; {q.q12:.3g}, {q.q22:.10g}]")
    if data.nu_sq is not None:
        print(f"nu^2 = {data.nu_sq:.12g}")
    if data.local is not None:
        print(f"lambda_1^- = {data.local.lambda1_neg:.12g}  M_S(rho~) = {data.M_S_rho_tilde:.12g}")
    return [_dump(Path(cfg.output) / "homog.json", data.to_json())]


def _cmd_limit(cfg, args) -> list:
    _, data = run_homogenization(cfg, cache=not args.no_cache)
    limits = run_limits(cfg, data)
    out = {}
    for sign, lim in limits.items():
        out[sign] = {"case": lim.case, "values": lim.values(sign if lim.case == "critical" else
                                                            ("+" if lim.case == "positive" else "-")).tolist()}
        print(f"{sign}: {lim.case} {out[sign]['values']}")
    return [_dump(Path(cfg.output) / "limit.json", {"case": data.case, "density_sign": data.density_sign,
                                                     "limits": out})]


def _cmd_eps(cfg, args) -> list:
    cell, data = run_homogenization(cfg, cache=not args.no_cache)
    limits = run_limits(cfg, data)
    summary = run_level(cfg, args.level, cell, data, limits, cache=not args.no_cache)
    print(f"n={args.level}: + {summary['values']['+']}  - {summary['values']['-']}")
    return [_dump(Path(cfg.output) / f"eps_{args.level}.json", summary)]


def _cmd_study(cfg, args) -> list:
    fmts = _formats(args.format)
    try:
        report = run_study(cfg, threads=args.threads, cache=not args.no_cache)
    except StudyError as e:
        partial = getattr(e, "report", None)
        if partial is not None:
            emit_reports(partial, fmts, cfg.output)
        raise
    return emit_reports(report, fmts, cfg.output)


COMMANDS = {"mesh": _cmd_mesh, "cell": _cmd_cell, "limit": _cmd_limit, "eps": _cmd_eps, "study": _cmd_study}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _configure(args)
        if args.command == "study":
            _formats(args.format)
        for path in COMMANDS[args.command](cfg, args):
            print(path)
    except (ConfigError, ExprError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StudyError as e:
        if isinstance(e.cause, OSError):
            print(f"I/O error: {e}", file=sys.stderr)
            return EXIT_IO
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SolverError, HomogError, MeshError, ValueError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
