"""Command-line entry point: ``simulate``, ``slam``, ``eval`` and ``skyplot``.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numerical failure threshold exceeded. ``TOOL_THREADS`` caps the number
of worker threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ndtslam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def worker_threads() -> int:
    """Thread cap from TOOL_THREADS (default: all CPUs)."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get("TOOL_THREADS", "").strip()
    if not raw:
        return cpus
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TOOL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TOOL_THREADS must be a positive integer, got {raw!r}")
    return min(n, cpus)


def _load_config(path):
    from .config import PipelineConfig, load

    return load(path) if path else PipelineConfig()


def cmd_simulate(args, threads: int) -> int:
    from .simulator import generate_run

    cfg = _load_config(args.config)
    run = generate_run(cfg.scenario, args.out, workers=threads)
    print(run.manifest)
    return EXIT_OK


def cmd_slam(args, threads: int) -> int:
    from .pipeline import NumericalFailure, locate_scans, run_slam, write_slam_outputs

    cfg = _load_config(args.config)
    seq = locate_scans(args.scans, cfg.scenario.lidar.rate)
    result = run_slam(seq, cfg, workers=threads)
    paths = write_slam_outputs(result, args.out, cfg)
    steps = len(result.frames)
    failed = result.failures
    flagged = result.graph.flagged_edges
    log.info("%d scans, %d failed registrations, %d non-converged edges, %d loop edges, "
             "LM %s after %d iterations", steps + 1, failed, flagged, result.loops,
             result.report.reason, result.report.iterations)
    print(paths["trajectory"])
    if steps and failed / steps > cfg.pipeline.max_failure_fraction:
        raise NumericalFailure(f"{failed} of {steps} registrations failed "
                               f"(limit {cfg.pipeline.max_failure_fraction:.0%})")
    return EXIT_OK


def cmd_eval(args, threads: int) -> int:
    from .metrics import read_trajectory
    from .pipeline import _labels_from_manifest, evaluate, write_eval_outputs
    from .urbanization import read_buildings

    cfg = _load_config(args.config)
    est = read_trajectory(args.est)
    truth = read_trajectory(args.truth)
    buildings = read_buildings(args.buildings)
    name, traffic = _labels_from_manifest(Path(args.truth))
    rep = evaluate(est, truth, buildings, cfg, args.name or name or Path(args.est).stem,
                   args.traffic or traffic)
    paths = write_eval_outputs(rep, buildings, args.out, cfg, args.results)
    print(paths["report_csv"])
    print(Path(paths["report_txt"]).read_text(), end="")
    return EXIT_OK


def cmd_skyplot(args, threads: int) -> int:
    from .urbanization import (build_skyplot, classify, emit_skyplot_svg, read_buildings,
                               urbanization_degree)

    try:
        pose = tuple(float(v) for v in args.pose.split(","))
    except ValueError:
        raise UsageError(f"--pose must be e,n,u, got {args.pose!r}") from None
    if len(pose) != 3:
        raise UsageError(f"--pose must be e,n,u, got {args.pose!r}")
    buildings = read_buildings(args.buildings)
    plot = build_skyplot(buildings, pose, sensor_height=args.sensor_height)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    emit_skyplot_svg(plot, args.out)
    c = classify(urbanization_degree(plot))
    print(f"urbanization degree {c.degree:.2f} deg: {c.label}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ndtslam", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="per-frame log lines")
    p.add_argument("-q", "--quiet", action="store_true", help="errors only")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic scan run")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("slam", help="NDT odometry and pose-graph optimization")
    s.add_argument("--scans", required=True, help="run directory or its scans/ subdirectory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slam)

    s = sub.add_parser("eval", help="errors, gradients, reliability coverage and figures")
    s.add_argument("--est", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--buildings", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="config whose coefficients and std formula are reported")
    s.add_argument("--results", help="summary table to append to (default <out>/results.csv)")
    s.add_argument("--name", help="run name in the summary row")
    s.add_argument("--traffic", help="traffic label (default: from the run manifest)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("skyplot", help="building mask skyplot at one position")
    s.add_argument("--buildings", required=True)
    s.add_argument("--pose", required=True, help="e,n,u of the antenna")
    s.add_argument("--out", required=True)
    s.add_argument("--sensor-height", type=float, default=0.0,
                   help="added to u (default 0: u is the antenna height)")
    s.set_defaults(func=cmd_skyplot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = worker_threads()
    except UsageError as exc:
        print(f"ndtslam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.ERROR if args.quiet else (logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))

    from .config import ConfigError
    from .metrics import MetricsError
    from .pipeline import DataError, NumericalFailure
    from .urbanization import OriginInsideBuilding

    try:
        return args.func(args, threads)
    except (UsageError, ConfigError) as exc:
        print(f"ndtslam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"ndtslam: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MetricsError, OriginInsideBuilding, OSError, ValueError, KeyError) as exc:
        print(f"ndtslam: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
