"""Command-line interface for khop-observer-sim."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import yaml

from khopsim.errors import CertificateInfeasible, DivergenceDetected, KhopError
from khopsim.experiments.sweep import save_sweep, sweep
from khopsim.scenarios import (
    BuiltScenario,
    apply_overrides,
    build,
    load_scenario,
    paper_variants,
)
from khopsim.sim import initial_errors, read_csv, run, write_csv
from khopsim.tuning.gains import certificate, gain_report
from khopsim.verify import verify

logger = logging.getLogger("khopsim")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_DIVERGED = 3


def _boundary_layer(value: str | None) -> float | None | str:
    """Map the flag to an override: absent keeps the scenario value."""
    if value is None:
        return "keep"
    if value == "off":
        return None
    delta = float(value)
    if delta <= 0:
        raise ValueError("boundary layer width must be positive")
    return delta


def _add_common(
    parser: argparse.ArgumentParser, scenario_required: bool = True
) -> None:
    parser.add_argument(
        "--scenario",
        type=str,
        required=scenario_required,
        help="Scenario file (YAML or JSON)",
    )
    parser.add_argument(
        "--out",
        type=str,
        default="results",
        help="Output directory for artifacts",
    )
    parser.add_argument("--seed", type=int, default=None, help="RNG seed override")
    parser.add_argument(
        "--decimate",
        type=int,
        default=None,
        help="Log every n-th integration step",
    )
    parser.add_argument(
        "--slack",
        type=float,
        default=None,
        help="Slack added to the strict gain inequalities",
    )
    parser.add_argument(
        "--boundary-layer",
        type=str,
        default=None,
        help="Replace sign() by a saturation of this width, or 'off'",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logs")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings only")


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="khopsim")
    subparsers = parser.add_subparsers(dest="command", required=True)

    tune_parser = subparsers.add_parser("tune", help="Tune observer gains")
    _add_common(tune_parser)

    sim_parser = subparsers.add_parser(
        "simulate", help="Run the closed loop and verify it"
    )
    _add_common(sim_parser)

    verify_parser = subparsers.add_parser(
        "verify", help="Re-check a telemetry CSV against a scenario"
    )
    _add_common(verify_parser)
    verify_parser.add_argument(
        "--csv", type=str, required=True, help="Telemetry CSV from 'simulate'"
    )

    sweep_parser = subparsers.add_parser(
        "sweep", help="Run the scenario's parameter grid"
    )
    _add_common(sweep_parser)
    sweep_parser.add_argument(
        "--workers", type=int, default=1, help="Parallel worker processes"
    )

    repro_parser = subparsers.add_parser(
        "reproduce-paper",
        help="Path-graph consensus run, halved input gains, and negative control",
    )
    _add_common(repro_parser, scenario_required=False)

    return parser.parse_args(argv)


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info("wrote %s", path)
    return path


def _overrides(args: argparse.Namespace, scenario: dict) -> dict:
    return apply_overrides(
        scenario,
        seed=args.seed,
        decimate=args.decimate,
        slack=args.slack,
        boundary_layer=_boundary_layer(args.boundary_layer),
    )


def _gain_document(built: BuiltScenario) -> tuple[dict, bool]:
    config = built.config
    err0, _ = initial_errors(config)
    cert = certificate(
        built.tuned.couplings,
        config.gains.G,
        config.gains,
        built.tuned.bounds,
        err0.errx_target,
        err0.erru_target,
        strict=False,
    )
    doc = gain_report(replace(built.tuned, gains=config.gains), cert, built.plant)
    doc["scenario_hash"] = built.hash
    doc["name"] = built.name
    return doc, cert.feasible


def cmd_tune(scenario: dict, out_dir: str | Path) -> int:
    """Write ``gains.json``; exit 2 when the gains do not certify convergence."""
    built = build(scenario)
    doc, feasible = _gain_document(built)
    _write_json(Path(out_dir) / "gains.json", doc)
    if not feasible:
        logger.warning("gains not certified: %s", doc["violated"])
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_simulate(scenario: dict, out_dir: str | Path) -> int:
    """Write ``telemetry.csv``, ``gains.json`` and ``report.json``."""
    out_path = Path(out_dir)
    built = build(scenario)
    doc, _ = _gain_document(built)
    _write_json(out_path / "gains.json", doc)
    try:
        telemetry = run(built.config)
    except DivergenceDetected as exc:
        if exc.telemetry is not None:
            write_csv(exc.telemetry, out_path / "telemetry.csv")
        _write_json(
            out_path / "report.json",
            {
                "scenario_hash": built.hash,
                "overall": "DIVERGED",
                "error": str(exc),
                "time": exc.time,
                "agent": exc.agent,
            },
        )
        return EXIT_DIVERGED
    write_csv(telemetry, out_path / "telemetry.csv")
    report = verify(built.config, built.tuned, telemetry)
    report.scenario_hash = built.hash
    _write_json(out_path / "report.json", report.to_dict())
    return EXIT_OK


def cmd_verify(scenario: dict, csv_path: str | Path, out_dir: str | Path) -> int:
    """Recompute the report offline from a telemetry CSV."""
    built = build(scenario)
    telemetry = read_csv(csv_path, built.config.graph.n, built.config.state_dim)
    report = verify(built.config, built.tuned, telemetry)
    report.scenario_hash = built.hash
    _write_json(Path(out_dir) / "verify.json", report.to_dict())
    return EXIT_OK


def cmd_sweep(scenario: dict, out_dir: str | Path, workers: int = 1) -> int:
    grid = scenario.get("sweep")
    if not grid:
        raise ValueError("scenario has no 'sweep' grid")
    built = build(scenario)
    rows = sweep(scenario, grid, workers=workers)
    save_sweep(out_dir, rows, built.hash)
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Run every reproduction variant into ``<out>/<variant>/``."""
    out_path = Path(args.out)
    summary = {}
    code = EXIT_OK
    base = load_scenario(args.scenario) if args.scenario else None
    for name, scenario in paper_variants(base).items():
        scenario = _overrides(args, scenario)
        dest = out_path / name
        rc = cmd_simulate(scenario, dest)
        summary[name] = {"exit_code": rc}
        if rc == EXIT_OK:
            with (dest / "report.json").open(encoding="utf-8") as f:
                summary[name]["overall"] = json.load(f)["overall"]
        code = max(code, rc)
    _write_json(out_path / "summary.json", summary)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    _setup_logging(args)

    try:
        if args.command == "reproduce-paper":
            return cmd_reproduce(args)

        scenario = _overrides(args, load_scenario(args.scenario))
        if args.command == "tune":
            return cmd_tune(scenario, args.out)
        if args.command == "simulate":
            return cmd_simulate(scenario, args.out)
        if args.command == "verify":
            return cmd_verify(scenario, args.csv, args.out)
        if args.command == "sweep":
            return cmd_sweep(scenario, args.out, args.workers)
    except CertificateInfeasible as exc:
        logger.error("%s", exc)
        return EXIT_INFEASIBLE
    except DivergenceDetected as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED
    except (KhopError, ValueError, OSError, yaml.YAMLError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE

    return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
