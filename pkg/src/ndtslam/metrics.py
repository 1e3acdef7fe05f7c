"""Positioning error, heading-frame projection, error gradients and run summaries.

Headings are compass angles: radians clockwise from north, wrapped to
(-pi, pi]. Trajectory CSVs carry ``t,e,n,u,heading`` and optionally a
trailing ``reliability`` column.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import wrap_angle

TRAJECTORY_HEADER = ("t", "e", "n", "u", "heading")
JOIN_TOLERANCE = 0.05  # s


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EnuPose:
    e: float
    n: float
    u: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class EpochError:
    lateral: float
    longitudinal: float
    altitude: float
    err2d: float
    err3d: float
    reliability: float = math.nan


def project_heading(dE, dN, heading):
    """(lateral, longitudinal) components of a horizontal offset for a compass heading."""
    s, c = np.sin(heading), np.cos(heading)
    lon = dE * s + dN * c
    lat = dE * c - dN * s
    return lat, lon


def epoch_error(estimate: EnuPose, truth: EnuPose, reliability: float = math.nan) -> EpochError:
    dE, dN, dU = estimate.e - truth.e, estimate.n - truth.n, estimate.u - truth.u
    lat, lon = project_heading(dE, dN, truth.heading)
    return EpochError(float(lat), float(lon), float(dU), math.hypot(dE, dN),
                      math.sqrt(dE * dE + dN * dN + dU * dU), reliability)


def epoch_errors(estimate: np.ndarray, truth: np.ndarray) -> dict:
    """Vectorized epoch errors for matched (N, >=5) ``t,e,n,u,heading`` rows.

    The truth heading defines the lateral/longitudinal frame.
    """
    d = estimate[:, 1:4] - truth[:, 1:4]
    lat, lon = project_heading(d[:, 0], d[:, 1], truth[:, 4])
    return {
        "lateral": lat,
        "longitudinal": lon,
        "altitude": d[:, 2],
        "err2d": np.hypot(d[:, 0], d[:, 1]),
        "err3d": np.sqrt(np.einsum("ij,ij->i", d, d)),
    }


def error_gradient(mean_error: float, duration: float) -> float:
    """Mean error divided by run duration (m/s)."""
    if not (duration > 0 and math.isfinite(duration)):
        raise MetricsError("invalid duration")
    return mean_error / duration


@dataclass(frozen=True)
class Coverage:
    fraction: float
    mean_gap: float  # mean of (reliability - err3d)
    verdict: str  # "underestimated" | "overestimated" | "exact"


def reliability_coverage(errors) -> Coverage:
    """Share of epochs whose reliability radius covers the 3D error."""
    rel, e3 = _rel_err3d(errors)
    if len(e3) == 0:
        raise MetricsError("no epochs")
    fraction = float(np.mean(rel >= e3))
    gap = float(np.mean(rel - e3))
    verdict = "underestimated" if gap < 0 else ("overestimated" if gap > 0 else "exact")
    return Coverage(fraction, gap, verdict)


def _rel_err3d(errors):
    if isinstance(errors, dict):
        return np.asarray(errors["reliability"], float), np.asarray(errors["err3d"], float)
    rel = np.array([e.reliability for e in errors], dtype=float)
    e3 = np.array([e.err3d for e in errors], dtype=float)
    return rel, e3


@dataclass(frozen=True)
class RunSummary:
    lateral_mean: float
    lateral_std: float
    longitudinal_mean: float
    longitudinal_std: float
    altitude_mean: float
    altitude_std: float
    reliability_mean: float
    reliability_std: float
    err2d_mean: float
    err2d_std: float
    gradient2d: float
    gradient2d_std: float
    err3d_mean: float
    err3d_std: float
    gradient3d: float
    gradient3d_std: float
    duration: float
    epochs: int
    coverage: float
    mean_gap: float
    verdict: str


def _series(errors) -> dict:
    if isinstance(errors, dict):
        return {k: np.asarray(v, dtype=float) for k, v in errors.items()}
    keys = ("lateral", "longitudinal", "altitude", "err2d", "err3d", "reliability")
    return {k: np.array([getattr(e, k) for e in errors], dtype=float) for k in keys}


def summarize_run(errors, duration: float, ddof: int = 0) -> RunSummary:
    """Means and standard deviations per direction, gradients and coverage.

    ``errors`` is a sequence of EpochError or a dict of arrays as returned by
    :func:`epoch_errors` plus a ``reliability`` array. ``ddof=0`` is the
    population formula; gradient std is std / duration.
    """
    s = _series(errors)
    n = len(s["err3d"])
    if n == 0:
        raise MetricsError("no epochs")
    if ddof >= n:
        raise MetricsError("not enough epochs for the sample standard deviation")
    if not (duration > 0):
        raise MetricsError("invalid duration")

    def ms(v):
        return float(np.mean(v)), float(np.std(v, ddof=ddof))

    lat = ms(np.abs(s["lateral"]))
    lon = ms(np.abs(s["longitudinal"]))
    alt = ms(np.abs(s["altitude"]))
    rel_arr = s.get("reliability", np.full(n, math.nan))
    rel = ms(rel_arr) if np.all(np.isfinite(rel_arr)) else (math.nan, math.nan)
    e2 = ms(s["err2d"])
    e3 = ms(s["err3d"])
    if np.all(np.isfinite(rel_arr)):
        cov = reliability_coverage({"reliability": rel_arr, "err3d": s["err3d"]})
    else:
        cov = Coverage(math.nan, math.nan, "unknown")
    return RunSummary(
        lat[0], lat[1], lon[0], lon[1], alt[0], alt[1], rel[0], rel[1],
        e2[0], e2[1], error_gradient(e2[0], duration), e2[1] / duration,
        e3[0], e3[1], error_gradient(e3[0], duration), e3[1] / duration,
        float(duration), n, cov.fraction, cov.mean_gap, cov.verdict,
    )


def run_duration(t: np.ndarray) -> float:
    """Span of uniformly sampled epochs, counting one sample period per epoch."""
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        raise MetricsError("invalid duration")
    return float((t[-1] - t[0]) * len(t) / (len(t) - 1))


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    t: np.ndarray
    enu: np.ndarray  # (N, 3)
    heading: np.ndarray
    reliability: np.ndarray | None = None

    def __len__(self):
        return len(self.t)

    def rows(self) -> np.ndarray:
        return np.column_stack([self.t, self.enu, self.heading])


def write_trajectory(path, rows, reliability=None) -> None:
    """Write ``t,e,n,u,heading`` rows (and an optional reliability column)."""
    rows = np.asarray(rows, dtype=float).reshape(-1, 5)
    cols = [rows]
    header = list(TRAJECTORY_HEADER)
    if reliability is not None:
        cols.append(np.asarray(reliability, dtype=float).reshape(-1, 1))
        header.append("reliability")
    data = np.hstack(cols)
    if not np.all(np.isfinite(data)):
        raise MetricsError(f"refusing to write non-finite values to {path}")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join("%.6f" % v for v in row) + "\n")


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MetricsError(f"{path}: empty file") from None
        if tuple(header[:5]) != TRAJECTORY_HEADER or header[5:] not in ([], ["reliability"]):
            raise MetricsError(f"{path}: expected header t,e,n,u,heading[,reliability], got {','.join(header)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise MetricsError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                raise MetricsError(f"{path}:{lineno}: non-numeric field") from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    if not np.all(np.isfinite(data)):
        raise MetricsError(f"{path}: non-finite values")
    if len(data) and np.any(np.diff(data[:, 0]) <= 0):
        raise MetricsError(f"{path}: timestamps must be strictly increasing")
    rel = data[:, 5].copy() if len(header) == 6 else None
    return Trajectory(data[:, 0].copy(), data[:, 1:4].copy(), wrap_angle(data[:, 4]), rel)


def join_nearest(t_est: np.ndarray, t_truth: np.ndarray, tol: float = JOIN_TOLERANCE):
    """Pair each estimate epoch with the nearest truth epoch within ``tol`` seconds.

    Returns (estimate indices, truth indices, number of dropped estimate epochs).
    """
    t_est = np.asarray(t_est, dtype=float)
    t_truth = np.asarray(t_truth, dtype=float)
    if len(t_truth) == 0 or len(t_est) == 0:
        return np.zeros(0, int), np.zeros(0, int), len(t_est)
    pos = np.clip(np.searchsorted(t_truth, t_est), 1, len(t_truth) - 1) if len(t_truth) > 1 \
        else np.zeros(len(t_est), dtype=int)
    if len(t_truth) > 1:
        left = pos - 1
        pick = np.where(np.abs(t_truth[left] - t_est) <= np.abs(t_truth[pos] - t_est), left, pos)
    else:
        pick = pos
    ok = np.abs(t_truth[pick] - t_est) <= tol + 1e-12
    idx = np.flatnonzero(ok)
    return idx, pick[ok], int(len(t_est) - len(idx))


# ---------------------------------------------------------------- summary table

SUMMARY_COLUMNS = (
    "run", "urbanization", "traffic",
    "lateral_mean", "lateral_std", "longitudinal_mean", "longitudinal_std",
    "altitude_mean", "altitude_std", "reliability_mean", "reliability_std",
    "2d_mean", "2d_std", "2d_gradient", "2d_gradient_std",
    "3d_mean", "3d_std", "3d_gradient", "3d_gradient_std",
    "duration", "epochs", "dropped_epochs", "coverage", "mean_gap", "reliability_verdict",
    "c_t", "c_n", "c_p", "c_r", "std_formula", "gradient_std_reading",
)


def summary_row(summary: RunSummary, run: str, urbanization: str, traffic: str,
                coeffs, dropped: int = 0, ddof: int = 0) -> dict:
    s = summary
    vals = [s.lateral_mean, s.lateral_std, s.longitudinal_mean, s.longitudinal_std,
            s.altitude_mean, s.altitude_std, s.reliability_mean, s.reliability_std,
            s.err2d_mean, s.err2d_std, s.gradient2d, s.gradient2d_std,
            s.err3d_mean, s.err3d_std, s.gradient3d, s.gradient3d_std, s.duration]
    row = {"run": run, "urbanization": urbanization, "traffic": traffic}
    row.update({k: "%.6f" % v for k, v in zip(SUMMARY_COLUMNS[3:20], vals)})
    row.update({
        "epochs": str(s.epochs), "dropped_epochs": str(dropped),
        "coverage": "%.6f" % s.coverage, "mean_gap": "%.6f" % s.mean_gap,
        "reliability_verdict": s.verdict,
        "c_t": "%g" % coeffs.c_t, "c_n": "%g" % coeffs.c_n,
        "c_p": "%g" % coeffs.c_p, "c_r": "%g" % coeffs.c_r,
        "std_formula": "population" if ddof == 0 else "sample",
        "gradient_std_reading": "std/duration",
    })
    return row


def append_summary(path, row: dict) -> None:
    """Append one row to a summary CSV, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    if not new:
        with open(path, newline="") as fh:
            head = next(csv.reader(fh), [])
        if tuple(head) != SUMMARY_COLUMNS:
            raise MetricsError(f"{path}: existing summary table has a different layout")
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- figures


def emit_error_svg(t, errors: dict, path, width: int = 640, height: int = 420) -> Path:
    """Two panels: per-direction errors over time, and 3D error against reliability."""
    t = np.asarray(t, dtype=float)
    path = Path(path)
    pad, gap = 40.0, 30.0
    ph = (height - 2 * pad - gap) / 2.0
    pw = width - 2 * pad
    t0, t1 = (float(t[0]), float(t[-1])) if len(t) else (0.0, 1.0)
    span = max(t1 - t0, 1e-9)

    def panel(top, series, colors, labels):
        vals = np.concatenate([np.asarray(v, float) for v in series]) if series else np.zeros(1)
        vals = vals[np.isfinite(vals)]
        lo = min(0.0, float(vals.min())) if len(vals) else 0.0
        hi = max(1e-9, float(vals.max())) if len(vals) else 1.0
        out = [f'<rect x="{pad:.1f}" y="{top:.1f}" width="{pw:.1f}" height="{ph:.1f}" '
               f'fill="none" stroke="black"/>',
               f'<text x="{pad - 4:.1f}" y="{top + 10:.1f}" font-size="9" text-anchor="end">{hi:.2f}</text>',
               f'<text x="{pad - 4:.1f}" y="{top + ph:.1f}" font-size="9" text-anchor="end">{lo:.2f}</text>']
        for k, (v, col, lab) in enumerate(zip(series, colors, labels)):
            v = np.asarray(v, float)
            xs = pad + (t - t0) / span * pw
            ys = top + ph - (v - lo) / (hi - lo) * ph
            pts = " ".join("%.2f,%.2f" % (a, b) for a, b in zip(xs, ys) if np.isfinite(b))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1"/>')
            out.append(f'<text x="{pad + 6 + 90 * k:.1f}" y="{top + 12:.1f}" font-size="10" '
                       f'fill="{col}">{lab}</text>')
        return out

    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']
    body += panel(pad, [errors["lateral"], errors["longitudinal"], errors["altitude"]],
                  ["#1f77b4", "#ff7f0e", "#2ca02c"], ["lateral", "longitudinal", "altitude"])
    bottom = [errors["err3d"]]
    labels = ["3D error"]
    if "reliability" in errors and errors["reliability"] is not None:
        bottom.append(errors["reliability"])
        labels.append("reliability")
    body += panel(pad + ph + gap, bottom, ["#d62728", "#1f3fbf"], labels)
    body.append(f'<text x="{width / 2:.1f}" y="{height - 8:.1f}" font-size="10" '
                f'text-anchor="middle">time (s)</text>')
    body.append("</svg>")
    path.write_text("\n".join(body) + "\n")
    return path


__all__ = [
    "EnuPose", "EpochError", "Coverage", "RunSummary", "Trajectory", "MetricsError",
    "project_heading", "epoch_error", "epoch_errors", "error_gradient",
    "reliability_coverage", "summarize_run", "run_duration", "write_trajectory",
    "read_trajectory", "join_nearest", "summary_row", "append_summary", "read_summary",
    "emit_error_svg", "SUMMARY_COLUMNS",
]
