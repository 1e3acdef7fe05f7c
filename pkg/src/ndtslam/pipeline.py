"""Scan sequence -> NDT odometry -> pose graph -> trajectory, and evaluation.

These functions hold the logic behind the ``slam`` and ``eval``
subcommands; the CLI only parses arguments and maps exceptions to exit
codes.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .config import PipelineConfig, echo
from .geometry import Pose6D, compose, invert, wrap_angle
from .metrics import (MetricsError, Trajectory, append_summary, emit_error_svg, epoch_errors,
                      join_nearest, run_duration, summarize_run, summary_row, write_trajectory,
                      SUMMARY_COLUMNS)
from .ndt import (RegistrationError, build_ndt_grid, ndt_register, read_cloud,
                  voxel_downsample)
from .posegraph import (GraphError, OptimizationReport, PoseGraph, add_loop, add_odometry,
                        optimize, write_graph)
from .simulator import LidarModel, ScenarioConfig, ego_pose
from .uncertainty import (information_matrix, matching_degree, reliability_radius,
                          total_uncertainty)
from .urbanization import (OriginInsideBuilding, build_skyplot, emit_skyplot_svg,
                           trajectory_urbanization, urbanization_degree)

log = logging.getLogger("ndtslam.slam")

SCAN_RE = re.compile(r"scan_(\d{6})\.txt$")


class DataError(ValueError):
    """Bad or missing input data (exit code 2)."""


class NumericalFailure(RuntimeError):
    """Too many failed registrations or a non-finite estimate (exit code 3)."""


# ---------------------------------------------------------------- inputs


@dataclass
class ScanSequence:
    paths: list
    times: np.ndarray
    anchor: Pose6D
    manifest: dict | None = None
    root: Path | None = None


def _find_manifest(scan_dir: Path):
    for d in (scan_dir, scan_dir.parent):
        m = d / "manifest.json"
        if m.is_file():
            return d, json.loads(m.read_text())
    return None, None


def locate_scans(scan_dir, rate: float = 10.0) -> ScanSequence:
    """Collect ``scan_%06d.txt`` files in order, with times and the anchor pose.

    ``scan_dir`` is a run directory (with ``manifest.json``) or its ``scans``
    subdirectory. With a manifest the scan list, rate and initial pose come
    from it; otherwise files are globbed, times are index / ``rate`` and the
    trajectory starts at the origin with zero yaw (heading east).
    """
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise DataError(f"scan directory {scan_dir} does not exist")
    root, manifest = _find_manifest(scan_dir)
    if manifest is not None:
        paths = [root / name for name in manifest["scans"]]
        rate = float(manifest.get("scan_rate", rate))
        e, n, u, heading = manifest["initial_pose"]
        roll, pitch = manifest.get("initial_attitude", [0.0, 0.0])
        anchor = Pose6D(e, n, u, roll, pitch, wrap_angle(math.pi / 2 - heading))
    else:
        found = {}
        for p in scan_dir.iterdir():
            m = SCAN_RE.search(p.name)
            if m:
                found[int(m.group(1))] = p
        if not found:
            raise DataError(f"no scan_NNNNNN.txt files in {scan_dir}")
        last = max(found)
        paths = [found.get(k, scan_dir / f"scan_{k:06d}.txt") for k in range(last + 1)]
        anchor = Pose6D()
    for p in paths:
        if not Path(p).is_file():
            raise DataError(f"missing scan file {p}")
    if len(paths) < 2:
        raise DataError("need at least 2 scans")
    return ScanSequence(paths, np.arange(len(paths)) / rate, anchor, manifest, root)


def scenario_from_manifest(manifest: dict) -> ScenarioConfig:
    c = dict(manifest["config"])
    c["lidar"] = LidarModel(**c["lidar"])
    return ScenarioConfig(**c)


# ---------------------------------------------------------------- slam


@dataclass
class FrameRecord:
    index: int
    t: float
    n_c: int
    t_c: float
    score: float
    u_delta: float
    u_total: float
    converged: bool
    failed: bool


@dataclass
class SlamResult:
    graph: PoseGraph
    report: OptimizationReport
    rows: np.ndarray  # (N, 5) t, e, n, u, heading
    reliability: np.ndarray
    frames: list = field(default_factory=list)
    loops: int = 0

    @property
    def failures(self) -> int:
        return sum(f.failed for f in self.frames)


def _tree(cloud):
    return cKDTree(cloud.points) if len(cloud) else None


def _grid(cloud, rcfg):
    try:
        return build_ndt_grid(cloud, rcfg.cell_size, rcfg.min_points_per_cell, rcfg.floor_ratio)
    except ValueError:
        return None


def run_slam(seq: ScanSequence, cfg: PipelineConfig, workers: int = 1) -> SlamResult:
    rcfg, coeffs = cfg.registration, cfg.uncertainty
    graph = PoseGraph()
    graph.add_node(seq.anchor, float(seq.times[0]))
    prev = read_cloud(seq.paths[0], float(seq.times[0]), 0)
    prev_grid, prev_tree = _grid(prev, rcfg), _tree(prev)
    motion = Pose6D()
    frames = []
    for k in range(1, len(seq.paths)):
        t = float(seq.times[k])
        cloud = read_cloud(seq.paths[k], t, k)
        # the matching degree uses the same downsampled points the registration aligned
        query = voxel_downsample(cloud.points, rcfg.downsample)
        failed = False
        try:
            if prev_grid is None or len(prev_grid) == 0:
                raise RegistrationError("reference cloud produced no NDT cells")
            res = ndt_register(prev, cloud, motion, rcfg, grid=prev_grid)
            transform, n_c, t_c, score = res.transform, res.iterations, res.elapsed, res.final_score
            u_delta = matching_degree(prev_tree, query, transform, workers)
        except (RegistrationError, ValueError) as exc:
            # keep the constant-velocity prediction for this step
            failed = True
            log.warning("frame %d: registration failed (%s); using constant-velocity prediction",
                        k, exc)
            transform, n_c, t_c, score = motion, rcfg.max_iterations, 0.0, math.nan
            try:
                u_delta = matching_degree(prev_tree if prev_tree is not None else prev, query, transform,
                                          workers)
            except ValueError:
                u_delta = rcfg.cell_size
            res = SimpleNamespace(transform=transform, converged=False)
        b = total_uncertainty(u_delta, t_c, n_c, coeffs)
        add_odometry(graph, res, information_matrix(b.u_total, coeffs), t)
        frames.append(FrameRecord(k, t, n_c, t_c, score, u_delta, b.u_total,
                                  bool(getattr(res, "converged", False)), failed))
        log.info("frame %d N_c=%d t_c=%.6f score=%.3f u_total=%.6f%s", k, n_c, t_c, score,
                 b.u_total, " FAILED" if failed else "")
        motion = transform
        prev = cloud
        prev_grid, prev_tree = _grid(cloud, rcfg), _tree(cloud)

    loops = _inject_loops(graph, seq, cfg)
    try:
        graph, report = optimize(graph, cfg.optimizer)
    except GraphError as exc:
        raise NumericalFailure(f"pose-graph optimization failed: {exc}") from None

    est = graph.estimates()
    if not np.all(np.isfinite(est)):
        raise NumericalFailure("non-finite pose estimate")
    rows = np.column_stack([seq.times, est[:, :3], wrap_angle(math.pi / 2 - est[:, 5])])
    rel = np.array([0.0] + [reliability_radius(f.u_total, coeffs.c_p) for f in frames])
    return SlamResult(graph, report, rows, rel, frames, loops)


def _inject_loops(graph: PoseGraph, seq: ScanSequence, cfg: PipelineConfig) -> int:
    pol = cfg.loops
    if pol.mode == "none":
        return 0
    if seq.manifest is None:
        raise DataError("loops.mode = truth needs a run directory with manifest.json")
    scen = scenario_from_manifest(seq.manifest)
    truth = [Pose6D.from_array(ego_pose(scen, float(t))) for t in seq.times]
    omega = np.diag([pol.translation_weight] * 3 + [pol.rotation_weight] * 3)
    count = 0
    for j in range(pol.span, len(truth), pol.interval):
        i = j - pol.span
        add_loop(graph, i, j, compose(invert(truth[i]), truth[j]), omega)
        count += 1
    return count


def write_slam_outputs(result: SlamResult, out_dir, cfg: PipelineConfig) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / "trajectory.csv",
        "graph": out / "graph.txt",
        "frames": out / "frames.csv",
        "config": out / "config.txt",
    }
    write_trajectory(paths["trajectory"], result.rows, result.reliability)
    write_graph(paths["graph"], result.graph)
    with open(paths["frames"], "w") as fh:
        fh.write("index,t,n_c,t_c,score,u_delta,u_total,converged,failed\n")
        for f in result.frames:
            fh.write("%d,%.6f,%d,%.9f,%.6f,%.9f,%.9f,%d,%d\n" % (
                f.index, f.t, f.n_c, f.t_c, f.score, f.u_delta, f.u_total,
                f.converged, f.failed))
    paths["config"].write_text(echo(cfg))
    return paths


# ---------------------------------------------------------------- eval


@dataclass
class EvalReport:
    row: dict
    summary: object
    errors: dict
    t: np.ndarray
    urbanization: object
    dropped: int
    reliability_present: bool
    skyplot_origin: tuple | None


def _labels_from_manifest(truth_path: Path):
    m = truth_path.parent / "manifest.json"
    if m.is_file():
        doc = json.loads(m.read_text())
        name = f"{doc.get('urbanization', 'run')}-{doc.get('traffic', 'unknown')}-seed{doc.get('seed', 0)}"
        return name, doc.get("traffic", "unknown")
    return None, "unknown"


def evaluate(est: Trajectory, truth: Trajectory, buildings, cfg: PipelineConfig,
             run_name: str = "run", traffic: str = "unknown") -> EvalReport:
    ie, it, dropped = join_nearest(est.t, truth.t, cfg.pipeline.join_tolerance)
    if len(ie) == 0:
        raise DataError("estimate and truth time ranges do not overlap")
    E = est.rows()[ie]
    T = truth.rows()[it]
    errs = epoch_errors(E, T)
    present = est.reliability is not None
    # no reliability column: a zero radius at every epoch
    errs["reliability"] = est.reliability[ie] if present else np.zeros(len(ie))
    try:
        duration = run_duration(truth.t[it])
    except MetricsError:
        raise DataError("need at least two matched epochs") from None
    summary = summarize_run(errs, duration, cfg.ddof)
    urb = trajectory_urbanization(buildings, truth.enu[it], sensor_height=0.0)
    label = urb.majority or "unknown"
    row = summary_row(summary, run_name, label, traffic, cfg.uncertainty, dropped, cfg.ddof)
    origin = None
    order = np.argsort(np.abs(np.arange(len(it)) - len(it) // 2), kind="stable")
    for k in order:
        try:
            build_skyplot(buildings, truth.enu[it[k]], sensor_height=0.0)
        except OriginInsideBuilding:
            continue
        origin = tuple(float(v) for v in truth.enu[it[k]])
        break
    return EvalReport(row, summary, errs, truth.t[it], urb, dropped, present, origin)


def write_eval_outputs(rep: EvalReport, buildings, out_dir, cfg: PipelineConfig,
                       results_path=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report_csv": out / "report.csv",
        "report_txt": out / "report.txt",
        "errors_csv": out / "errors.csv",
        "errors_svg": out / "errors.svg",
        "skyplot_svg": out / "skyplot.svg",
        "results": Path(results_path) if results_path else out / "results.csv",
    }
    with open(paths["report_csv"], "w") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        fh.write(",".join(rep.row[c] for c in SUMMARY_COLUMNS) + "\n")
    append_summary(paths["results"], rep.row)
    e = rep.errors
    with open(paths["errors_csv"], "w") as fh:
        fh.write("t,lateral,longitudinal,altitude,err2d,err3d,reliability\n")
        for k in range(len(rep.t)):
            fh.write("%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n" % (
                rep.t[k], e["lateral"][k], e["longitudinal"][k], e["altitude"][k],
                e["err2d"][k], e["err3d"][k], e["reliability"][k]))
    emit_error_svg(rep.t, e, paths["errors_svg"])
    if rep.skyplot_origin is not None:
        emit_skyplot_svg(build_skyplot(buildings, rep.skyplot_origin, sensor_height=0.0),
                         paths["skyplot_svg"])
    else:
        paths.pop("skyplot_svg")
    paths["report_txt"].write_text(format_report(rep, cfg))
    return paths


def format_report(rep: EvalReport, cfg: PipelineConfig) -> str:
    s, r = rep.summary, rep.row
    lines = [
        f"ndtslam {__version__} evaluation report",
        f"run: {r['run']}",
        f"urbanization: {r['urbanization']} (mean degree {rep.urbanization.mean_degree:.2f} deg)",
        f"traffic: {r['traffic']}",
        f"epochs: {s.epochs} matched, {rep.dropped} dropped; duration {s.duration:.3f} s",
        "",
        f"{'':14s}{'lateral':>10s}{'longitud.':>10s}{'altitude':>10s}{'reliab.':>10s}"
        f"{'2D':>10s}{'2D grad':>10s}{'3D':>10s}{'3D grad':>10s}",
        f"{'mean':14s}{s.lateral_mean:10.3f}{s.longitudinal_mean:10.3f}{s.altitude_mean:10.3f}"
        f"{s.reliability_mean:10.3f}{s.err2d_mean:10.3f}{s.gradient2d:10.4f}"
        f"{s.err3d_mean:10.3f}{s.gradient3d:10.4f}",
        f"{'std':14s}{s.lateral_std:10.3f}{s.longitudinal_std:10.3f}{s.altitude_std:10.3f}"
        f"{s.reliability_std:10.3f}{s.err2d_std:10.3f}{s.gradient2d_std:10.4f}"
        f"{s.err3d_std:10.3f}{s.gradient3d_std:10.4f}",
        "",
        f"reliability coverage: {s.coverage:.4f} (mean gap {s.mean_gap:+.3f} m, {s.verdict})",
    ]
    if not rep.reliability_present:
        lines.append("note: estimate has no reliability column; a zero radius was used")
    lines += [
        f"standard deviation: {r['std_formula']} formula",
        "gradient std: interpreted as std(error) / duration",
        "",
        "config:",
        echo(cfg).rstrip("\n"),
    ]
    return "\n".join(lines) + "\n"
