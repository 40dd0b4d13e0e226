"""
Synthetic industrial-yard scenes with exact per-point labels.

A scene is a list of analytic primitives in the vehicle frame. Every rig sensor
casts one ray per pixel center of its range-image grid; the nearest primitive
hit becomes that pixel's point, labeled by the primitive's class. Points are
emitted in the sensor frame as float32, exactly like a `.bin` scan.
"""
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from src.exceptions import InvalidSpec
from src.layer1.class_map import ClassMap, default_class_map
from src.layer1.scan_io import (ManifestEntry, PointCloud, SensorId, write_labels,
                                write_manifest, write_scan)
from src.layer1.sensor_rig import SensorConfig, SensorRig, default_rig, save_rig

logger = logging.getLogger("SceneGenerator")

T_MIN = 1e-6
MEMBERSHIP_EPS = 1e-6
CURB_HEIGHT = 0.15

# Base reflectivity per class; lane paint is retro-reflective
REFLECTIVITY = {
    "car": 0.35, "forklift": 0.45, "person": 0.25, "object": 0.30,
    "driveable ground": 0.12, "other ground": 0.20, "lane marking": 0.85,
    "vegetation": 0.15, "building": 0.40,
}


@dataclass(frozen=True)
class SceneSpec:
    extent: float = 20.0
    enclosed: bool = True
    roof_height: float = 8.0
    clear_radius: float = 4.0
    reflectivity_noise: float = 0.03
    curbs: int = 2
    lane_stripes: int = 4
    buildings: int = 3
    objects: int = 4
    persons: int = 3
    forklifts: int = 2
    cars: int = 2
    vegetation: int = 3

    def __post_init__(self):
        if self.extent <= 0 or self.roof_height <= 0:
            raise InvalidSpec("extent and roof_height must be positive")
        if self.clear_radius < 0 or self.reflectivity_noise < 0:
            raise InvalidSpec("clear_radius and reflectivity_noise must be non-negative")
        counts = (self.curbs, self.lane_stripes, self.buildings, self.objects, self.persons,
                  self.forklifts, self.cars, self.vegetation)
        if any(c < 0 for c in counts):
            raise InvalidSpec(f"primitive counts must be non-negative, got {counts}")

    @classmethod
    def plane_only(cls, extent: float = 20.0) -> "SceneSpec":
        return cls(extent=extent, enclosed=False, reflectivity_noise=0.0, curbs=0, lane_stripes=0,
                   buildings=0, objects=0, persons=0, forklifts=0, cars=0, vegetation=0)


def load_scene_spec(path: str = "config/scene.yaml") -> SceneSpec:
    with open(path, 'r') as f:
        config = yaml.safe_load(f) or {}
    fields = config.get('scene', {})
    try:
        return SceneSpec(**fields)
    except TypeError as e:
        raise InvalidSpec(f"{path}: {e}")


# --- Primitives ---

class Primitive:
    """A labeled surface. `intersect` returns the first hit distance per ray (inf on a miss)."""
    class_name: str = ""

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, points: np.ndarray, eps: float = MEMBERSHIP_EPS) -> np.ndarray:
        raise NotImplementedError


def _cap_hits(origin, dirs, z, cx, cy, radius):
    with np.errstate(divide='ignore', invalid='ignore'):
        t = (z - origin[2]) / dirs[:, 2]
    x = origin[0] + t * dirs[:, 0] - cx
    y = origin[1] + t * dirs[:, 1] - cy
    ok = np.isfinite(t) & (t > T_MIN) & (x * x + y * y <= radius * radius)
    return np.where(ok, t, np.inf)


@dataclass
class GroundRect(Primitive):
    """Axis-aligned rectangle on the plane z = `z` (the yard floor or a painted stripe)."""
    x0: float
    x1: float
    y0: float
    y1: float
    class_name: str = "driveable ground"
    z: float = 0.0

    def intersect(self, origin, dirs):
        with np.errstate(divide='ignore', invalid='ignore'):
            t = (self.z - origin[2]) / dirs[:, 2]
        x = origin[0] + t * dirs[:, 0]
        y = origin[1] + t * dirs[:, 1]
        ok = np.isfinite(t) & (t > T_MIN) & (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)
        return np.where(ok, t, np.inf)

    def contains(self, points, eps=MEMBERSHIP_EPS):
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        return ((np.abs(z - self.z) <= eps) & (x >= self.x0 - eps) & (x <= self.x1 + eps)
                & (y >= self.y0 - eps) & (y <= self.y1 + eps))


@dataclass
class Box(Primitive):
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    class_name: str = "object"

    def intersect(self, origin, dirs):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        t_near = np.minimum(t1, t2)
        t_far = np.maximum(t1, t2)
        parallel = dirs == 0.0
        inside_slab = (origin >= lo) & (origin <= hi)
        t_near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t_near)
        t_far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t_far)
        near = t_near.max(axis=1)
        far = t_far.min(axis=1)
        ok = (near <= far) & (near > T_MIN)
        return np.where(ok, near, np.inf)

    def contains(self, points, eps=MEMBERSHIP_EPS):
        lo = np.asarray(self.lo) - eps
        hi = np.asarray(self.hi) + eps
        return np.all((points >= lo) & (points <= hi), axis=1)


@dataclass
class Cylinder(Primitive):
    """Vertical cylinder between z0 and z1."""
    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    class_name: str = "person"

    def intersect(self, origin, dirs):
        ox, oy = origin[0] - self.cx, origin[1] - self.cy
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - 4.0 * a * c
        with np.errstate(divide='ignore', invalid='ignore'):
            t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
        z = origin[2] + t * dirs[:, 2]
        side_ok = (a > 0) & (disc >= 0) & (t > T_MIN) & (z >= self.z0) & (z <= self.z1)
        best = np.where(side_ok, t, np.inf)
        best = np.minimum(best, _cap_hits(origin, dirs, self.z1, self.cx, self.cy, self.radius))
        return np.minimum(best, _cap_hits(origin, dirs, self.z0, self.cx, self.cy, self.radius))

    def contains(self, points, eps=MEMBERSHIP_EPS):
        d2 = (points[:, 0] - self.cx) ** 2 + (points[:, 1] - self.cy) ** 2
        return (d2 <= (self.radius + eps) ** 2) & (points[:, 2] >= self.z0 - eps) & (points[:, 2] <= self.z1 + eps)


@dataclass
class Frustum(Primitive):
    """Vertical cone frustum: radius r0 at z0 tapering linearly to r1 at z1."""
    cx: float
    cy: float
    r0: float
    r1: float
    z0: float
    z1: float
    class_name: str = "vegetation"

    def _radius_at(self, z):
        return self.r0 + (self.r1 - self.r0) * (z - self.z0) / (self.z1 - self.z0)

    def intersect(self, origin, dirs):
        k = (self.r1 - self.r0) / (self.z1 - self.z0)
        ox, oy = origin[0] - self.cx, origin[1] - self.cy
        rad0 = self.r0 + k * (origin[2] - self.z0)
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        a = dx * dx + dy * dy - k * k * dz * dz
        b = 2.0 * (ox * dx + oy * dy - k * rad0 * dz)
        c = ox * ox + oy * oy - rad0 * rad0
        disc = b * b - 4.0 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        linear = np.abs(a) < 1e-12
        with np.errstate(divide='ignore', invalid='ignore'):
            r1 = np.where(linear, -c / b, (-b - sq) / (2.0 * a))
            r2 = np.where(linear, np.inf, (-b + sq) / (2.0 * a))
        best = np.full(dirs.shape[0], np.inf)
        for t in (r1, r2):
            z = origin[2] + t * dz
            ok = ((disc >= 0) | linear) & np.isfinite(t) & (t > T_MIN) & (z >= self.z0) & (z <= self.z1)
            best = np.where(ok & (t < best), t, best)
        best = np.minimum(best, _cap_hits(origin, dirs, self.z1, self.cx, self.cy, self.r1))
        return np.minimum(best, _cap_hits(origin, dirs, self.z0, self.cx, self.cy, self.r0))

    def contains(self, points, eps=MEMBERSHIP_EPS):
        z = points[:, 2]
        in_z = (z >= self.z0 - eps) & (z <= self.z1 + eps)
        radius = self._radius_at(np.clip(z, self.z0, self.z1))
        d2 = (points[:, 0] - self.cx) ** 2 + (points[:, 1] - self.cy) ** 2
        return in_z & (d2 <= (radius + eps) ** 2)


@dataclass
class Sphere(Primitive):
    """Sphere seen from outside or inside; the first surface crossing counts."""
    center: Tuple[float, float, float]
    radius: float
    class_name: str = "building"

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        b = 2.0 * dirs @ oc
        a = np.sum(dirs * dirs, axis=1)
        c = float(oc @ oc) - self.radius ** 2
        disc = b * b - 4.0 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_in = (-b - sq) / (2.0 * a)
        t_out = (-b + sq) / (2.0 * a)
        t = np.where(t_in > T_MIN, t_in, t_out)
        return np.where((disc >= 0) & (t > T_MIN), t, np.inf)

    def contains(self, points, eps=MEMBERSHIP_EPS):
        d = np.linalg.norm(points - np.asarray(self.center), axis=1)
        return np.abs(d - self.radius) <= eps


@dataclass
class Enclosure(Primitive):
    """Hall walls at |x| = |y| = extent and a flat roof, hit from inside."""
    extent: float
    height: float
    class_name: str = "building"

    def intersect(self, origin, dirs):
        e = self.extent
        with np.errstate(divide='ignore', invalid='ignore'):
            tx = np.where(dirs[:, 0] > 0, (e - origin[0]) / dirs[:, 0],
                          np.where(dirs[:, 0] < 0, (-e - origin[0]) / dirs[:, 0], np.inf))
            ty = np.where(dirs[:, 1] > 0, (e - origin[1]) / dirs[:, 1],
                          np.where(dirs[:, 1] < 0, (-e - origin[1]) / dirs[:, 1], np.inf))
            tz = np.where(dirs[:, 2] > 0, (self.height - origin[2]) / dirs[:, 2], np.inf)
        t = np.minimum(np.minimum(tx, ty), tz)
        z = origin[2] + t * dirs[:, 2]
        ok = np.isfinite(t) & (t > T_MIN) & (z >= 0.0)
        return np.where(ok, t, np.inf)

    def contains(self, points, eps=MEMBERSHIP_EPS):
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        e = self.extent
        inside = (np.abs(x) <= e + eps) & (np.abs(y) <= e + eps) & (z >= -eps) & (z <= self.height + eps)
        on_wall = (np.abs(np.abs(x) - e) <= eps) | (np.abs(np.abs(y) - e) <= eps)
        on_roof = np.abs(z - self.height) <= eps
        return inside & (on_wall | on_roof)


# --- Layout ---

@dataclass
class SceneLayout:
    """Primitives ordered by label priority (first wins on a tie)."""
    primitives: List[Primitive] = field(default_factory=list)
    stats: Dict[str, int] = field(default_factory=dict)


class _FootprintSampler:
    """Rejection sampling of non-overlapping rectangular footprints."""

    def __init__(self, rng: np.random.Generator, extent: float, clear_radius: float,
                 margin: float = 0.3, attempts: int = 200):
        self.rng = rng
        self.extent = extent
        self.clear_radius = clear_radius
        self.margin = margin
        self.attempts = attempts
        self.taken: List[Tuple[float, float, float, float]] = []
        self.rejected = 0

    def _clear_of_vehicle(self, x0, x1, y0, y1) -> bool:
        # Distance from the sensor mast (~0.9 m ahead of the origin) to the rectangle
        dx = max(x0 - 0.9, 0.0, 0.9 - x1)
        dy = max(y0, 0.0, -y1)
        return math.hypot(dx, dy) >= self.clear_radius

    def place(self, size_x: float, size_y: float) -> Optional[Tuple[float, float]]:
        lim = self.extent - 1.0
        for _ in range(self.attempts):
            cx = self.rng.uniform(-lim + size_x / 2, lim - size_x / 2)
            cy = self.rng.uniform(-lim + size_y / 2, lim - size_y / 2)
            rect = (cx - size_x / 2, cx + size_x / 2, cy - size_y / 2, cy + size_y / 2)
            if not self._clear_of_vehicle(*rect):
                continue
            m = self.margin
            if any(rect[0] < o[1] + m and o[0] < rect[1] + m and rect[2] < o[3] + m and o[2] < rect[3] + m
                   for o in self.taken):
                continue
            self.taken.append(rect)
            return cx, cy
        self.rejected += 1
        return None


def _oriented(rng, length, width):
    return (length, width) if rng.random() < 0.5 else (width, length)


def build_layout(seed: int, spec: SceneSpec) -> SceneLayout:
    """Deterministic primitive layout for (seed, spec)."""
    rng = np.random.default_rng(seed)
    sampler = _FootprintSampler(rng, spec.extent, spec.clear_radius)
    max_h = spec.roof_height - 0.5 if spec.enclosed else 10.0
    objects: List[Primitive] = []

    for _ in range(spec.buildings):
        sx, sy = rng.uniform(3.0, 6.0), rng.uniform(3.0, 6.0)
        h = min(rng.uniform(3.0, 6.0), max_h)
        pos = sampler.place(sx, sy)
        if pos:
            objects.append(Box((pos[0] - sx / 2, pos[1] - sy / 2, 0.0), (pos[0] + sx / 2, pos[1] + sy / 2, h), "building"))

    for _ in range(spec.objects):
        sx, sy, h = rng.uniform(0.8, 1.5), rng.uniform(0.8, 1.5), rng.uniform(0.5, 1.5)
        pos = sampler.place(sx, sy)
        if pos:
            objects.append(Box((pos[0] - sx / 2, pos[1] - sy / 2, 0.0), (pos[0] + sx / 2, pos[1] + sy / 2, h), "object"))

    for _ in range(spec.persons):
        r, h = rng.uniform(0.25, 0.35), rng.uniform(1.6, 1.9)
        pos = sampler.place(2 * r, 2 * r)
        if pos:
            objects.append(Cylinder(pos[0], pos[1], r, 0.0, h, "person"))

    for _ in range(spec.forklifts):
        along_x = rng.random() < 0.5
        length, width, body_h, mast_h = rng.uniform(2.2, 2.8), rng.uniform(1.0, 1.3), 1.4, rng.uniform(2.5, 3.2)
        sx, sy = (length + 0.2, width) if along_x else (width, length + 0.2)
        pos = sampler.place(sx, sy)
        if pos:
            cx, cy = pos
            if along_x:
                body = Box((cx - sx / 2, cy - width / 2, 0.0), (cx + sx / 2 - 0.2, cy + width / 2, body_h), "forklift")
                mast = Box((cx + sx / 2 - 0.2, cy - width / 2 + 0.1, 0.0), (cx + sx / 2, cy + width / 2 - 0.1, mast_h), "forklift")
            else:
                body = Box((cx - width / 2, cy - sy / 2, 0.0), (cx + width / 2, cy + sy / 2 - 0.2, body_h), "forklift")
                mast = Box((cx - width / 2 + 0.1, cy + sy / 2 - 0.2, 0.0), (cx + width / 2 - 0.1, cy + sy / 2, mast_h), "forklift")
            objects.extend([body, mast])

    for _ in range(spec.cars):
        sx, sy = _oriented(rng, rng.uniform(3.8, 4.6), rng.uniform(1.7, 1.9))
        pos = sampler.place(sx, sy)
        if pos:
            cx, cy = pos
            objects.append(Box((cx - sx / 2, cy - sy / 2, 0.0), (cx + sx / 2, cy + sy / 2, 0.9), "car"))
            objects.append(Box((cx - sx / 4, cy - sy / 4, 0.9), (cx + sx / 4, cy + sy / 4, 1.5), "car"))

    for _ in range(spec.vegetation):
        r0, r1, h = rng.uniform(0.8, 1.5), rng.uniform(0.1, 0.5), rng.uniform(1.5, 4.0)
        pos = sampler.place(2 * r0, 2 * r0)
        if pos:
            objects.append(Frustum(pos[0], pos[1], r0, r1, 0.0, min(h, max_h), "vegetation"))

    curbs: List[Primitive] = []
    for _ in range(spec.curbs):
        sx, sy = _oriented(rng, rng.uniform(4.0, 10.0), rng.uniform(1.0, 2.5))
        pos = sampler.place(sx, sy)
        if pos:
            curbs.append(Box((pos[0] - sx / 2, pos[1] - sy / 2, 0.0), (pos[0] + sx / 2, pos[1] + sy / 2, CURB_HEIGHT), "other ground"))

    # Stripes may run under the vehicle; they do not occupy a footprint
    stripes: List[Primitive] = []
    lim = spec.extent - 1.0
    for _ in range(spec.lane_stripes):
        sx, sy = _oriented(rng, rng.uniform(3.0, 8.0), rng.uniform(0.15, 0.3))
        cx = rng.uniform(-lim + sx / 2, lim - sx / 2)
        cy = rng.uniform(-lim + sy / 2, lim - sy / 2)
        stripes.append(GroundRect(cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, "lane marking"))

    e = spec.extent
    ground: List[Primitive] = [GroundRect(-e, e, -e, e, "driveable ground")]
    hall: List[Primitive] = [Enclosure(e, spec.roof_height, "building")] if spec.enclosed else []

    layout = SceneLayout(primitives=objects + curbs + stripes + ground + hall)
    layout.stats = {"primitives": len(layout.primitives), "placement_failures": sampler.rejected}
    if sampler.rejected:
        logger.warning(f"seed {seed}: {sampler.rejected} primitives could not be placed")
    return layout


# --- Raycasting ---

def sensor_ray_directions(sensor: SensorConfig) -> np.ndarray:
    """(rows * cols, 3) unit directions through every pixel center, sensor frame, row-major."""
    phi, theta = sensor.model.pixel_center_angles()
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1).reshape(-1, 3)


def raycast_sensor(sensor: SensorConfig, primitives: Sequence[Primitive], class_map: ClassMap,
                   rng: Optional[np.random.Generator] = None, reflectivity_noise: float = 0.0,
                   timestamp: int = 0) -> Tuple[PointCloud, np.ndarray]:
    """
    One ray per pixel center from the sensor's pose.

    Returns the labeled sensor-frame cloud (float32-quantized, pixels in
    row-major order) and the exact vehicle-frame hit points.
    """
    dirs_sensor = sensor_ray_directions(sensor)
    dirs = dirs_sensor @ sensor.extrinsic.rotation.T
    origin = sensor.extrinsic.translation

    best_t = np.full(dirs.shape[0], np.inf)
    best_i = np.full(dirs.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        t = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)

    hit = np.isfinite(best_t)
    t = best_t[hit]
    prim_idx = best_i[hit]
    vehicle_points = origin + t[:, None] * dirs[hit]

    class_ids = np.array([class_map.id_of(p.class_name) for p in primitives], dtype=np.int32)
    base = np.array([REFLECTIVITY[p.class_name] for p in primitives])
    labels = class_ids[prim_idx] if len(primitives) else np.zeros(0, dtype=np.int32)
    refl = base[prim_idx] if len(primitives) else np.zeros(0)
    if reflectivity_noise > 0 and rng is not None:
        refl = refl + rng.normal(0.0, reflectivity_noise, size=refl.shape)
    refl = np.clip(refl, 0.0, 1.0)

    points = np.concatenate([t[:, None] * dirs_sensor[hit], refl[:, None]], axis=1)
    points = points.astype(np.float32).astype(np.float64)
    cloud = PointCloud(points=points, labels=labels, sensor_id=sensor.sensor_id, timestamp=timestamp)
    cloud.stats = {"rays": int(dirs.shape[0]), "hits": int(hit.sum())}
    return cloud, vehicle_points


def membership_labels(points: np.ndarray, primitives: Sequence[Primitive], class_map: ClassMap,
                      eps: float = MEMBERSHIP_EPS) -> np.ndarray:
    """Labels vehicle-frame points by the first primitive (in priority order) whose surface holds them."""
    labels = np.full(points.shape[0], class_map.ignore_id, dtype=np.int32)
    open_ = np.ones(points.shape[0], dtype=bool)
    for prim in primitives:
        inside = open_ & prim.contains(points, eps)
        labels[inside] = class_map.id_of(prim.class_name)
        open_ &= ~inside
    return labels


@dataclass
class SyntheticScene:
    seed: int
    spec: SceneSpec
    layout: SceneLayout
    clouds: Dict[SensorId, PointCloud]
    vehicle_points: Dict[SensorId, np.ndarray]

    def labels(self, sensor_id) -> np.ndarray:
        return self.clouds[SensorId(sensor_id)].labels


def synth_scene(seed: int, spec: SceneSpec, rig: Optional[SensorRig] = None,
                class_map: Optional[ClassMap] = None) -> SyntheticScene:
    """Pure function of (seed, spec, rig): layout, raycast per sensor, reflectivity noise."""
    rig = rig or default_rig()
    class_map = class_map or default_class_map()
    layout = build_layout(seed, spec)
    noise_rng = np.random.default_rng([seed, 1])

    clouds, vehicle_points = {}, {}
    for sensor in rig:
        cloud, pts = raycast_sensor(sensor, layout.primitives, class_map, noise_rng,
                                    spec.reflectivity_noise, timestamp=seed)
        clouds[sensor.sensor_id] = cloud
        vehicle_points[sensor.sensor_id] = pts
    return SyntheticScene(seed=seed, spec=spec, layout=layout, clouds=clouds, vehicle_points=vehicle_points)


def write_dataset(root: str, spec: SceneSpec, rig: Optional[SensorRig] = None,
                  class_map: Optional[ClassMap] = None, train_scenes: int = 4,
                  test_scenes: int = 1, seed: int = 0, test_sequence: str = "0000",
                  train_sequence: str = "0001") -> str:
    """
    Writes synthetic scenes in the KITTI-style layout.

    Args:
        root: Dataset root; created if missing.
        spec: Scene contents shared by every generated scene.
        rig: Sensors to raycast through. Defaults to `default_rig()`.
        class_map: Class table used to write raw label ids. Defaults to `default_class_map()`.
        train_scenes: Number of scenes written to `train_sequence`.
        test_scenes: Number of scenes written to `test_sequence`.
        seed: Scene k of the run is generated with seed + k (test scenes first).
        test_sequence: Sequence reserved for testing; recorded in the manifest.
        train_sequence: Sequence holding the training scenes.

    Returns:
        Path of the written `manifest.yaml`.
    """
    if train_scenes < 0 or test_scenes < 0 or train_scenes + test_scenes == 0:
        raise InvalidSpec("need at least one scene")
    if test_sequence == train_sequence:
        raise InvalidSpec(f"sequence {test_sequence} cannot hold both train and test scenes")
    rig = rig or default_rig()
    class_map = class_map or default_class_map()
    os.makedirs(root, exist_ok=True)

    plan = ([(test_sequence, "test", i) for i in range(test_scenes)]
            + [(train_sequence, "train", i) for i in range(train_scenes)])
    entries = []
    for k, (sequence, split, i) in enumerate(plan):
        frame = f"{i:06d}"
        scene = synth_scene(seed + k, spec, rig, class_map)
        for sid, cloud in scene.clouds.items():
            base = os.path.join(root, "sequences", sequence, sid.value)
            scan_path = os.path.join(base, "velodyne", f"{frame}.bin")
            label_path = os.path.join(base, "labels", f"{frame}.label")
            write_scan(scan_path, cloud)
            write_labels(label_path, cloud.labels, class_map)
            entries.append(ManifestEntry(sequence, frame, sid, scan_path, label_path, split))
        logger.info(f"scene {sequence}/{frame} ({split}): "
                    + ", ".join(f"{sid.value} {len(c)} pts" for sid, c in scene.clouds.items()))

    save_rig(rig, os.path.join(root, "rig.yaml"))
    with open(os.path.join(root, "scene.yaml"), 'w') as f:
        yaml.safe_dump({"scene": asdict(spec), "seed": seed}, f, sort_keys=False)
    return write_manifest(root, entries, rig_file="rig.yaml", test_sequences=(test_sequence,))
