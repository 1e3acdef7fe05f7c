"""Deterministic street-canyon scenes and ray-cast multi-beam LiDAR scans.

Scene frame = local ENU: x east, y north, z up, ground plane z = 0. The
street runs along +x. Every random draw comes from a generator seeded by the
scenario seed (plus the scan index for range noise), so a config fully
determines every output byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import euler_to_matrix, wrap_angle
from .ndt import PointCloud, write_cloud
from .urbanization import (Building, classify_label, mask_profile, write_buildings,
                           DENSE_LOWER, SPARSE_UPPER)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Preset:
    heights: tuple  # building height range (m)
    street_width: tuple  # facade-to-facade (m), sampled per run
    frontage: tuple  # building length along the street (m)
    gap: tuple  # spacing between buildings (m)
    gap_probability: float  # chance a gap is left after a building
    setback: tuple  # extra distance from the street edge (m)
    depth: tuple
    pole_spacing: float  # 0 disables poles/trees
    band: tuple  # accepted run-mean urbanization degree [lo, hi)
    sign_spacing: float = 0.0  # projecting shop signs along the facades; 0 disables


PRESETS = {
    "sparse": Preset((5.0, 10.0), (16.0, 16.0), (8.0, 14.0), (10.0, 22.0), 1.0,
                     (1.0, 5.0), (8.0, 14.0), 12.0, (0.0, SPARSE_UPPER)),
    "sub-urban": Preset((10.0, 25.0), (16.0, 20.0), (14.0, 28.0), (4.0, 10.0), 0.8,
                        (0.0, 2.0), (12.0, 20.0), 20.0, (SPARSE_UPPER, DENSE_LOWER + 1e-9)),
    "dense-urban": Preset((50.0, 175.0), (16.0, 20.0), (10.0, 25.0), (3.0, 5.0), 0.4,
                          (0.0, 3.0), (20.0, 35.0), 15.0, (DENSE_LOWER + 1e-9, 90.0), 10.0),
}

TRAFFIC = {"normal": (2, 5), "dense": (8, 12)}

BUS = (12.0, 2.5, 4.4)
CAR = (4.5, 1.8, 1.5)
LANE_WIDTH = 3.5
SIDEWALK = 2.0
TRAFFIC_WINDOW = 40.0  # vehicles stay within +-40 m of the ego along the street


@dataclass(frozen=True)
class LidarModel:
    beams: int = 32
    min_elevation: float = -30.0  # deg
    max_elevation: float = 10.0
    horizontal_resolution: float = 0.5  # deg
    max_range: float = 80.0
    noise: float = 0.02  # range sigma (m)
    rate: float = 10.0  # Hz
    sensor_height: float = 2.0

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, (beams * azimuths, 3), beam-major."""
        el = np.radians(np.linspace(self.min_elevation, self.max_elevation, self.beams))
        n_az = int(round(360.0 / self.horizontal_resolution))
        az = np.radians(np.arange(n_az) * self.horizontal_resolution)
        E, A = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return np.ascontiguousarray(d.reshape(-1, 3))


@dataclass(frozen=True)
class ScenarioConfig:
    urbanization: str = "sparse"
    traffic: str = "normal"
    street_width: float | None = None
    height_min: float | None = None
    height_max: float | None = None
    duration: float = 64.0
    speed: float = 8.0
    seed: int = 0
    vehicle_count: int | None = None
    lane_change_amplitude: float = 1.0
    lane_change_period: float = 30.0
    ramp_time: float = 4.0
    body_sway: float = 0.5  # roll/pitch amplitude of the vehicle body (deg)
    lidar: LidarModel = field(default_factory=LidarModel)

    def __post_init__(self):
        if self.urbanization not in PRESETS:
            raise ScenarioError(f"unknown urbanization preset {self.urbanization!r}")
        if self.traffic not in TRAFFIC:
            raise ScenarioError(f"unknown traffic preset {self.traffic!r}")
        if self.duration < 0 or self.speed < 0 or self.ramp_time < 0:
            raise ScenarioError("duration, speed and ramp_time must be non-negative")


@dataclass(frozen=True)
class DynamicVehicle:
    """Box moving parallel to the street; its offset from the ego wraps
    inside the traffic window so the vehicle count around the ego is constant."""

    length: float
    width: float
    height: float
    lane_y: float
    offset: float  # along-street offset from the ego at t = 0 (m)
    relative_speed: float  # m/s relative to the ego

    def center_x(self, t: float, ego_x: float) -> float:
        w = TRAFFIC_WINDOW
        rel = (self.offset + self.relative_speed * t + w) % (2 * w) - w
        return ego_x + rel

    def box(self, t: float, ego_x: float) -> np.ndarray:
        cx = self.center_x(t, ego_x)
        return np.array([cx - self.length / 2, self.lane_y - self.width / 2, 0.0,
                         cx + self.length / 2, self.lane_y + self.width / 2, self.height])


@dataclass
class Scene:
    config: ScenarioConfig
    street_width: float
    buildings: list  # urbanization.Building
    building_boxes: np.ndarray  # (B, 6) AABBs
    poles: np.ndarray  # (P, 6) AABBs of street furniture (poles, trees, signs)
    vehicles: list  # DynamicVehicle
    urbanization_degree: float = math.nan

    def static_boxes(self) -> np.ndarray:
        return np.concatenate([self.building_boxes, self.poles]).reshape(-1, 6)


def ego_distance(cfg: ScenarioConfig, t: float) -> float:
    """Distance along the street: constant acceleration for ``ramp_time``, then cruise."""
    T = cfg.ramp_time
    if T <= 0:
        return cfg.speed * t
    if t < T:
        return 0.5 * cfg.speed / T * t * t
    return 0.5 * cfg.speed * T + cfg.speed * (t - T)


def ego_state(cfg: ScenarioConfig, t: float):
    """Ego sensor position (x, y, z) and yaw (rad, CCW from east) at time t.

    The lane-change sinusoid is a function of distance travelled (one period
    per ``speed * lane_change_period`` meters), so heading stays defined at
    low speed.
    """
    x = ego_distance(cfg, t)
    if cfg.speed > 0:
        k = 2 * math.pi / (cfg.speed * cfg.lane_change_period)
        y = cfg.lane_change_amplitude * math.sin(k * x)
        yaw = math.atan(cfg.lane_change_amplitude * k * math.cos(k * x))
    else:
        y, yaw = 0.0, 0.0
    return np.array([x, y, cfg.lidar.sensor_height]), yaw


def ego_speed(cfg: ScenarioConfig, t: float) -> float:
    if cfg.ramp_time > 0 and t < cfg.ramp_time:
        return cfg.speed * max(t, 0.0) / cfg.ramp_time
    return cfg.speed


def ego_attitude(cfg: ScenarioConfig, t: float) -> tuple[float, float]:
    """Body (roll, pitch) in radians: two-tone suspension sway, phases fixed by
    the seed, scaled by the current fraction of cruise speed (none at rest)."""
    if cfg.body_sway <= 0 or cfg.speed <= 0:
        return 0.0, 0.0
    ph = np.random.default_rng([cfg.seed, 4]).uniform(0.0, 2 * math.pi, 4)
    a = math.radians(cfg.body_sway) * ego_speed(cfg, t) / cfg.speed
    roll = a * (0.6 * math.sin(2 * math.pi * 1.1 * t + ph[0])
                + 0.4 * math.sin(2 * math.pi * 2.3 * t + ph[1]))
    pitch = a * (0.6 * math.sin(2 * math.pi * 1.3 * t + ph[2])
                 + 0.4 * math.sin(2 * math.pi * 2.5 * t + ph[3]))
    return roll, pitch


def ego_pose(cfg: ScenarioConfig, t: float) -> np.ndarray:
    """Full sensor pose (x, y, z, roll, pitch, yaw) in the scene frame."""
    pos, yaw = ego_state(cfg, t)
    roll, pitch = ego_attitude(cfg, t)
    return np.array([pos[0], pos[1], pos[2], roll, pitch, yaw])


def heading_from_yaw(yaw: float) -> float:
    """Compass heading (clockwise from north) for a yaw measured CCW from east."""
    return wrap_angle(math.pi / 2 - yaw)


def _building_row(rng, preset, side, x0, x1, half_width):
    boxes = []
    x = x0 - rng.uniform(0.0, preset.gap[1])
    while x < x1:
        f = rng.uniform(*preset.frontage)
        setback = rng.uniform(*preset.setback)
        depth = rng.uniform(*preset.depth)
        h = rng.uniform(*preset.heights)
        near = half_width + setback
        far = near + depth
        y0, y1 = (near, far) if side > 0 else (-far, -near)
        boxes.append([x, y0, 0.0, x + f, y1, h])
        x += f
        if rng.uniform() < preset.gap_probability:
            x += rng.uniform(*preset.gap)
    return boxes


def _poles(rng, spacing, x0, x1, half_width):
    out = []
    if spacing <= 0:
        return out
    for side in (1.0, -1.0):
        x = x0 + rng.uniform(0, spacing)
        while x < x1:
            y = side * (half_width - 0.8)
            h = rng.uniform(4.0, 8.0)
            out.append([x - 0.25, y - 0.25, 0.0, x + 0.25, y + 0.25, h])
            x += spacing * rng.uniform(0.7, 1.3)
    return out


def _signs(rng, spacing, x0, x1, half_width):
    """Signboards hanging over the sidewalk from the street edge."""
    out = []
    if spacing <= 0:
        return out
    for side in (1.0, -1.0):
        x = x0 + rng.uniform(0, spacing)
        while x < x1:
            w = rng.uniform(0.8, 3.0)
            proj = rng.uniform(0.5, 1.5)
            z0 = rng.uniform(2.5, 5.0)
            y0, y1 = (half_width - proj, half_width) if side > 0 else (-half_width, -half_width + proj)
            out.append([x, y0, z0, x + w, y1, z0 + rng.uniform(0.6, 2.5)])
            x += spacing * rng.uniform(0.5, 1.5)
    return out


def lanes(street_width: float) -> np.ndarray:
    road = street_width - 2 * SIDEWALK
    n = max(1, int(road // LANE_WIDTH))
    return (np.arange(n) - (n - 1) / 2.0) * LANE_WIDTH


def sample_poses(cfg: ScenarioConfig, count: int = 12) -> np.ndarray:
    """Mid-street poses along the driven segment used to check the preset band."""
    length = max(ego_distance(cfg, cfg.duration), 1.0)
    xs = np.linspace(0.0, length, count)
    return np.stack([xs, np.zeros(count), np.zeros(count)], axis=-1)


def generate_scene(cfg: ScenarioConfig) -> Scene:
    preset = PRESETS[cfg.urbanization]
    rng = np.random.default_rng([cfg.seed, 1])
    width = cfg.street_width if cfg.street_width is not None else rng.uniform(*preset.street_width)
    heights = (cfg.height_min if cfg.height_min is not None else preset.heights[0],
               cfg.height_max if cfg.height_max is not None else preset.heights[1])
    if not 0 < heights[0] <= heights[1]:
        raise ScenarioError(f"invalid building height range {heights}")
    preset = Preset(heights, preset.street_width, preset.frontage, preset.gap,
                    preset.gap_probability, preset.setback, preset.depth,
                    preset.pole_spacing, preset.band, preset.sign_spacing)
    half = width / 2.0
    reach = cfg.lidar.max_range + 20.0
    x0, x1 = -reach, cfg.speed * cfg.duration + reach
    boxes = _building_row(rng, preset, 1, x0, x1, half) + _building_row(rng, preset, -1, x0, x1, half)
    boxes = np.array(boxes, dtype=float).reshape(-1, 6)
    buildings = [Building.box(b[0], b[1], b[3], b[4], b[5]) for b in boxes]
    poles = _poles(rng, preset.pole_spacing, x0, x1, half)
    poles += _signs(np.random.default_rng([cfg.seed, 5]), preset.sign_spacing, x0, x1, half)
    poles = np.array(poles, dtype=float).reshape(-1, 6)

    vehicles = _traffic(cfg, np.random.default_rng([cfg.seed, 2]), width)
    degree = float(np.mean([
        np.mean(mask_profile(buildings, p, np.arange(360), cfg.lidar.sensor_height))
        for p in sample_poses(cfg)
    ]))
    lo, hi = preset.band
    if not lo <= degree < hi:
        raise ScenarioError(
            f"preset {cfg.urbanization!r} produced urbanization degree {degree:.2f} deg "
            f"({classify_label(degree)}), outside [{lo:g}, {hi:g})")
    return Scene(cfg, width, buildings, boxes, poles, vehicles, degree)


def _traffic(cfg: ScenarioConfig, rng, width) -> list:
    lo, hi = TRAFFIC[cfg.traffic]
    count = cfg.vehicle_count if cfg.vehicle_count is not None else int(math.ceil((lo + hi) / 2))
    lane_ys = lanes(width)
    ego_lane = int(np.argmin(np.abs(lane_ys)))
    others = [i for i in range(len(lane_ys)) if i != ego_lane]
    vehicles = []
    ego_slots = [14.0, -14.0, 30.0, -30.0]
    for k in range(count):
        dims = BUS if k % 3 == 0 else CAR
        # every third vehicle shares the ego lane at a fixed gap
        if (k % 3 == 2 or not others) and ego_slots:
            slot = ego_slots.pop(0)
            vehicles.append(DynamicVehicle(*dims, lane_ys[ego_lane], slot, 0.0))
            continue
        lane = lane_ys[others[k % len(others)]]
        offset = rng.uniform(-TRAFFIC_WINDOW, TRAFFIC_WINDOW)
        rel = rng.uniform(-5.0, 5.0)
        vehicles.append(DynamicVehicle(*dims, lane, offset, rel))
    return vehicles


def scene_boxes(scene: Scene, t: float) -> tuple[np.ndarray, int]:
    """All boxes at time t; returns (boxes, index of first vehicle box)."""
    ego_pos, _ = ego_state(scene.config, t)
    static = scene.static_boxes()
    veh = np.array([v.box(t, ego_pos[0]) for v in scene.vehicles]).reshape(-1, 6)
    return np.concatenate([static, veh]), len(static)


def simulate_scan(scene: Scene, t: float, pose=None, lidar: LidarModel | None = None,
                  seed: int = 0, scan_index: int = 0, return_hits: bool = False):
    """Ray-cast one scan; points are returned in the sensor frame.

    ``pose`` is (x, y, z, yaw) or (x, y, z, roll, pitch, yaw) of the sensor
    in the scene frame (defaults to the ego pose at time t). Range noise comes from a generator seeded by
    (seed, scan_index) and is drawn in beam-major ray order.
    """
    lidar = lidar or scene.config.lidar
    if pose is None:
        pose = ego_pose(scene.config, t)
    pose = np.asarray(pose, dtype=float)
    if pose.size == 4:
        pose = np.array([pose[0], pose[1], pose[2], 0.0, 0.0, pose[3]])
    pos = pose[:3]
    boxes, first_vehicle = scene_boxes(scene, t)
    # cull boxes out of range
    lo, hi = boxes[:, :3], boxes[:, 3:]
    nearest = np.clip(pos, lo, hi)
    keep = np.linalg.norm(nearest - pos, axis=1) <= lidar.max_range
    ids = np.flatnonzero(keep)
    boxes = np.ascontiguousarray(boxes[keep])

    d_s = lidar.directions()
    d_w = np.ascontiguousarray(d_s @ euler_to_matrix(pose[3:]).T)
    ranges, hit = kernels.raycast_boxes(np.ascontiguousarray(pos), d_w, boxes, 0.0,
                                        lidar.max_range)
    noise = np.random.default_rng([seed, scan_index, 3]).standard_normal(len(ranges))
    noisy = ranges + lidar.noise * noise
    ok = np.isfinite(ranges) & (noisy > 0.0) & (noisy <= lidar.max_range)
    pts = d_s[ok] * noisy[ok, None]
    cloud = PointCloud(pts, timestamp=t, frame_id=scan_index)
    if not return_hits:
        return cloud
    h = hit[ok]
    global_ids = np.where(h >= 0, ids[np.maximum(h, 0)], h)
    kind = np.where(global_ids >= first_vehicle, "vehicle",
                    np.where(global_ids >= 0, "static", "ground"))
    return cloud, kind


@dataclass
class RunOutput:
    directory: Path
    manifest: Path
    n_scans: int
    truth: np.ndarray  # (N, 5): t, e, n, u, heading


def scan_times(cfg: ScenarioConfig) -> np.ndarray:
    n = int(round(cfg.duration * cfg.lidar.rate))
    return np.arange(n) / cfg.lidar.rate


def truth_trajectory(cfg: ScenarioConfig) -> np.ndarray:
    rows = []
    for t in scan_times(cfg):
        pos, yaw = ego_state(cfg, t)
        rows.append([t, pos[0], pos[1], pos[2], heading_from_yaw(yaw)])
    return np.array(rows).reshape(-1, 5)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)


def generate_run(cfg: ScenarioConfig, out_dir, workers: int = 1) -> RunOutput:
    """Write scans, ground truth, building models and a manifest into ``out_dir``.

    Scans are independent (each has its own noise stream), so ``workers > 1``
    casts them on a thread pool without changing any output byte.
    """
    from .metrics import write_trajectory  # local: metrics imports nothing from here

    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    scene = generate_scene(cfg)
    truth = truth_trajectory(cfg)
    files = [f"scans/scan_{k:06d}.txt" for k in range(len(truth))]

    def one(k):
        cloud = simulate_scan(scene, float(truth[k, 0]), seed=cfg.seed, scan_index=k)
        write_cloud(out / files[k], cloud)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(len(files))))
    else:
        for k in range(len(files)):
            one(k)
    write_trajectory(out / "truth.csv", truth)
    write_buildings(out / "buildings.json", scene.buildings)
    scene_doc = {
        "street_width": round(scene.street_width, 6),
        "urbanization_degree": round(scene.urbanization_degree, 6),
        "poles": np.round(scene.poles, 6).tolist(),
        "vehicles": [asdict(v) for v in scene.vehicles],
    }
    (out / "scene.json").write_text(json.dumps(scene_doc, indent=1, sort_keys=True) + "\n")
    listed = ["truth.csv", "buildings.json", "scene.json"] + files
    manifest = {
        "config": scenario_to_dict(cfg),
        "seed": cfg.seed,
        "scan_rate": cfg.lidar.rate,
        "n_scans": len(files),
        "scans": files,
        "truth": "truth.csv",
        "buildings": "buildings.json",
        "scene": "scene.json",
        "initial_pose": [round(float(v), 9) for v in truth[0, 1:]] if len(truth) else [],
        "initial_attitude": [round(float(v), 9) for v in ego_attitude(cfg, 0.0)],
        "urbanization": cfg.urbanization,
        "traffic": cfg.traffic,
        "sha256": {name: _sha256(out / name) for name in listed},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return RunOutput(out, mpath, len(files), truth)
