"""Skyplot building masks and the mean-mask-elevation urbanization degree.

Azimuths are degrees clockwise from north; a ray at azimuth ``az`` runs along
``(east, north) = (sin az, cos az)``. Building heights are measured from the
vehicle's ground plane; the sensor sits ``sensor_height`` above it.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPARSE = "sparse"
SUB_URBAN = "sub-urban"
DENSE_URBAN = "dense-urban"
CLASSES = (SPARSE, SUB_URBAN, DENSE_URBAN)

SPARSE_UPPER = 15.0
DENSE_LOWER = 46.0
MAX_RANGE = 500.0
SENSOR_HEIGHT = 2.0


class OriginInsideBuilding(ValueError):
    pass


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


@dataclass
class Building:
    """Extruded footprint; vertices stored counterclockwise."""

    footprint: np.ndarray
    height: float

    def __post_init__(self):
        poly = np.asarray(self.footprint, dtype=float).reshape(-1, 2)
        if len(poly) > 3 and np.allclose(poly[0], poly[-1]):
            poly = poly[:-1]
        if len(poly) < 3:
            raise ValueError("building footprint needs at least 3 vertices")
        if not self.height > 0:
            raise ValueError("building height must be positive")
        n = len(poly)
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                    raise ValueError("building footprint is self-intersecting")
        if _signed_area(poly) < 0:
            poly = poly[::-1].copy()
        self.footprint = poly
        self.height = float(self.height)

    @classmethod
    def box(cls, e0, n0, e1, n1, height) -> "Building":
        return cls([[e0, n0], [e1, n0], [e1, n1], [e0, n1]], height)

    def contains(self, e: float, n: float) -> bool:
        """Strictly inside (boundary points are outside)."""
        poly = self.footprint
        x, y = poly[:, 0], poly[:, 1]
        x2, y2 = np.roll(x, -1), np.roll(y, -1)
        # on an edge -> not strictly inside
        cross = (x2 - x) * (n - y) - (y2 - y) * (e - x)
        within = (np.minimum(x, x2) <= e) & (e <= np.maximum(x, x2)) \
            & (np.minimum(y, y2) <= n) & (n <= np.maximum(y, y2))
        if np.any((np.abs(cross) < 1e-12) & within):
            return False
        straddle = (y > n) != (y2 > n)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x + (n - y) * (x2 - x) / (y2 - y)
        return bool(np.count_nonzero(straddle & (e < xint)) % 2)


def read_buildings(path) -> list[Building]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("buildings", [])
    out = []
    for i, item in enumerate(data):
        try:
            out.append(Building(item["footprint"], item["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: building {i}: {exc}") from exc
    return out


def write_buildings(path, buildings) -> None:
    doc = [
        {"footprint": [[round(float(e), 6), round(float(n), 6)] for e, n in b.footprint],
         "height": round(float(b.height), 6)}
        for b in buildings
    ]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _edges(buildings):
    starts, ends, heights = [], [], []
    for b in buildings:
        starts.append(b.footprint)
        ends.append(np.roll(b.footprint, -1, axis=0))
        heights.append(np.full(len(b.footprint), b.height))
    if not starts:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    return np.concatenate(starts), np.concatenate(ends), np.concatenate(heights)


def _check_origin(buildings, origin):
    e, n = origin[0], origin[1]
    for b in buildings:
        if b.contains(e, n):
            raise OriginInsideBuilding("origin inside building")


def mask_profile(buildings, origin, azimuths, sensor_height: float = SENSOR_HEIGHT,
                 max_range: float = MAX_RANGE) -> np.ndarray:
    """Mask elevation (deg) for each azimuth (deg), vectorized over rays and edges."""
    origin = np.asarray(origin, dtype=float)
    up = origin[2] if origin.size > 2 else 0.0
    _check_origin(buildings, origin)
    az = np.radians(np.asarray(azimuths, dtype=float))
    out = np.zeros(az.shape)
    p, q, h = _edges(buildings)
    if len(h) == 0:
        return out
    rise = h - up - sensor_height
    keep = rise > 0
    p, q, rise = p[keep], q[keep], rise[keep]
    if len(rise) == 0:
        return out
    d = np.stack([np.sin(az), np.cos(az)], axis=-1)  # (A, 2)
    s = q - p  # (E, 2)
    w = p - origin[:2]  # (E, 2)
    # origin + t d = p + u s  ->  t d - u s = w
    den = d[:, None, 0] * (-s[None, :, 1]) - d[:, None, 1] * (-s[None, :, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * (-s[None, :, 1]) - w[None, :, 1] * (-s[None, :, 0])) / den
        u = (d[:, None, 0] * w[None, :, 1] - d[:, None, 1] * w[None, :, 0]) / den
    ok = (np.abs(den) > 1e-12) & (t > 1e-9) & (t <= max_range) & (u >= -1e-12) & (u <= 1 + 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        ang = np.where(ok, np.degrees(np.arctan2(rise[None, :], t)), 0.0)
    return ang.max(axis=1)


def mask_elevation(buildings, origin, azimuth: float, sensor_height: float = SENSOR_HEIGHT,
                   max_range: float = MAX_RANGE) -> float:
    """Largest atan(H / W) over footprint edges crossed by the ray at ``azimuth``."""
    return float(mask_profile(buildings, origin, [azimuth], sensor_height, max_range)[0])


@dataclass
class Skyplot:
    origin: tuple
    mask: np.ndarray  # 360 elevations (deg), index = azimuth in whole degrees

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=float)
        if self.mask.shape != (360,):
            raise ValueError("skyplot mask must have 360 entries")


def build_skyplot(buildings, origin, sensor_height: float = SENSOR_HEIGHT,
                  max_range: float = MAX_RANGE) -> Skyplot:
    origin = tuple(float(c) for c in origin) + (0.0,) * (3 - len(origin))
    mask = mask_profile(buildings, origin, np.arange(360), sensor_height, max_range)
    return Skyplot(origin, mask)


def urbanization_degree(plot: Skyplot) -> float:
    return float(np.sum(plot.mask) / 360.0)


@dataclass(frozen=True)
class UrbanizationClass:
    degree: float
    label: str


def classify_label(degree: float) -> str:
    if degree < SPARSE_UPPER:
        return SPARSE
    if degree <= DENSE_LOWER:
        return SUB_URBAN
    return DENSE_URBAN


def classify(degree: float) -> UrbanizationClass:
    """Bands: sparse [0, 15), sub-urban [15, 46], dense-urban above 46 degrees."""
    return UrbanizationClass(float(degree), classify_label(degree))


@dataclass
class TrajectoryUrbanization:
    degrees: list
    classes: list
    mean_degree: float
    majority: str
    skipped: int = 0
    skipped_indices: list = field(default_factory=list)


def trajectory_urbanization(buildings, trajectory, sensor_height: float = SENSOR_HEIGHT
                            ) -> TrajectoryUrbanization:
    """Per-pose degree and class plus run mean and majority class.

    Poses inside a footprint are skipped and counted.
    """
    degrees, classes, skipped = [], [], []
    for i, origin in enumerate(trajectory):
        try:
            plot = build_skyplot(buildings, origin, sensor_height)
        except OriginInsideBuilding:
            skipped.append(i)
            continue
        deg = urbanization_degree(plot)
        degrees.append(deg)
        classes.append(classify(deg))
    if not degrees:
        return TrajectoryUrbanization([], [], math.nan, "", len(skipped), skipped)
    counts = Counter(c.label for c in classes)
    # ties go to the more urban class
    majority = max(CLASSES, key=lambda lbl: (counts.get(lbl, 0), CLASSES.index(lbl)))
    return TrajectoryUrbanization(degrees, classes, float(np.mean(degrees)), majority,
                                  len(skipped), skipped)


def emit_skyplot_svg(plot: Skyplot, path, size: int = 400) -> Path:
    """Polar skyplot: north up, rings at 0/30/60/90 deg, blocked sky shaded."""
    path = Path(path)
    c = size / 2.0
    R = size / 2.0 - 20.0

    def xy(az_deg, el_deg):
        r = R * (90.0 - el_deg) / 90.0
        a = math.radians(az_deg)
        return c + r * math.sin(a), c - r * math.cos(a)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    mask = plot.mask
    if np.max(mask) > 0:
        outer = " ".join("%.3f,%.3f" % xy(a, 0.0) for a in range(360))
        inner = " ".join("%.3f,%.3f" % xy(a, mask[a]) for a in range(359, -1, -1))
        out.append(f'<path d="M {outer} Z M {inner} Z" fill="#7f7f7f" '
                   f'fill-opacity="0.6" fill-rule="evenodd" stroke="none"/>')
    for el in (0, 30, 60):
        r = R * (90.0 - el) / 90.0
        out.append(f'<circle cx="{c:.3f}" cy="{c:.3f}" r="{r:.3f}" fill="none" '
                   f'stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{c + 3:.3f}" y="{c - r + 12:.3f}" font-size="10">{el}</text>')
    out.append(f'<circle cx="{c:.3f}" cy="{c:.3f}" r="2" fill="black"/>')
    out.append(f'<text x="{c - 4:.3f}" y="14" font-size="12">N</text>')
    out.append("</svg>")
    try:
        path.write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write skyplot to {path}: {exc}") from exc
    return path
