import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import EmptyScan, ShapeMismatch, ZeroRange
from src.layer1.scan_io import PointCloud, SensorId

logger = logging.getLogger("Projection")


class Frame(str, Enum):
    SENSOR = "sensor"
    VEHICLE = "vehicle"


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round-half-away-from-zero, identical on every platform."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class ProjectionModel:
    """
    Spherical image geometry.

        u = phi / delta_phi + c_phi          (phi = 0 lands on column c_phi = cols / 2)
        v = -theta / delta_theta + c_theta   (rows grow downward; row 0 starts at fov_up)

    Pixel (u, v) covers the angular cell centered on its integer coordinates, so
    the top row's center sits at fov_up - delta_theta / 2.
    """
    rows: int
    cols: int
    fov_up: float     # radians
    fov_down: float   # radians

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ShapeMismatch("ProjectionModel", (self.rows, self.cols), detail="rows and cols must be positive")
        if not self.fov_up > self.fov_down:
            raise ShapeMismatch("ProjectionModel", (self.fov_up, self.fov_down), detail="fov_up must exceed fov_down")

    @classmethod
    def from_degrees(cls, rows: int, cols: int, fov_up_deg: float, fov_down_deg: float) -> "ProjectionModel":
        return cls(rows=int(rows), cols=int(cols),
                   fov_up=math.radians(fov_up_deg), fov_down=math.radians(fov_down_deg))

    @classmethod
    def from_sensor(cls, sensor) -> "ProjectionModel":
        return cls.from_degrees(sensor.rows, sensor.cols, sensor.fov_up_deg, sensor.fov_down_deg)

    @property
    def delta_phi(self) -> float:
        return 2.0 * math.pi / self.cols

    @property
    def delta_theta(self) -> float:
        return (self.fov_up - self.fov_down) / self.rows

    @property
    def c_phi(self) -> float:
        return self.cols / 2.0

    @property
    def c_theta(self) -> float:
        return self.fov_up / self.delta_theta - 0.5

    def pixel_coords(self, phi: np.ndarray, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Continuous (u, v); u is not wrapped yet."""
        return phi / self.delta_phi + self.c_phi, -theta / self.delta_theta + self.c_theta

    def pixel_center_angles(self) -> Tuple[np.ndarray, np.ndarray]:
        """(rows, cols) grids of the azimuth and inclination at every pixel center."""
        u = np.arange(self.cols, dtype=np.float64)
        v = np.arange(self.rows, dtype=np.float64)
        phi = (u - self.c_phi) * self.delta_phi
        theta = (self.c_theta - v) * self.delta_theta
        return np.meshgrid(phi, theta)


@dataclass
class SphericalImageSet:
    """Aligned H x W planes of one scan. `valid` is the single source of truth."""
    xyz: np.ndarray            # (H, W, 3) meters
    range: np.ndarray          # (H, W) meters, sensor frame
    reflectivity: np.ndarray   # (H, W)
    labels: np.ndarray         # (H, W) class ids, ignore where invalid
    valid: np.ndarray          # (H, W) bool
    point_index: np.ndarray    # (H, W) source point index, -1 where absent
    frame_tag: Frame = Frame.SENSOR
    ignore_id: int = 255
    normals: Optional[np.ndarray] = None        # (H, W, 3) unit vectors
    normals_valid: Optional[np.ndarray] = None  # (H, W) bool
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sensor_id: SensorId = SensorId.FRONT
    stats: dict = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape

    @classmethod
    def empty(cls, rows: int, cols: int, ignore_id: int = 255,
              sensor_id: SensorId = SensorId.FRONT) -> "SphericalImageSet":
        return cls(
            xyz=np.zeros((rows, cols, 3)),
            range=np.zeros((rows, cols)),
            reflectivity=np.zeros((rows, cols)),
            labels=np.full((rows, cols), ignore_id, dtype=np.int32),
            valid=np.zeros((rows, cols), dtype=bool),
            point_index=np.full((rows, cols), -1, dtype=np.int64),
            ignore_id=ignore_id,
            sensor_id=sensor_id,
        )

    def copy(self) -> "SphericalImageSet":
        return replace(
            self,
            xyz=self.xyz.copy(), range=self.range.copy(), reflectivity=self.reflectivity.copy(),
            labels=self.labels.copy(), valid=self.valid.copy(), point_index=self.point_index.copy(),
            normals=None if self.normals is None else self.normals.copy(),
            normals_valid=None if self.normals_valid is None else self.normals_valid.copy(),
            viewpoint=self.viewpoint.copy(), stats=dict(self.stats),
        )

    def consistency_errors(self) -> List[str]:
        """Mask invariants; an empty list means the image set is consistent."""
        errors = []
        h, w = self.shape
        planes = {"xyz": self.xyz.shape[:2], "range": self.range.shape,
                  "reflectivity": self.reflectivity.shape, "labels": self.labels.shape,
                  "point_index": self.point_index.shape}
        if self.normals is not None:
            planes["normals"] = self.normals.shape[:2]
        for name, shape in planes.items():
            if tuple(shape) != (h, w):
                errors.append(f"{name} plane has shape {shape}, expected {(h, w)}")
        if errors:
            return errors
        inv = ~self.valid
        if np.any(self.range[inv] != 0):
            errors.append("invalid pixels with non-zero range")
        if np.any(self.point_index[inv] != -1):
            errors.append("invalid pixels with a point index")
        if np.any(self.labels[inv] != self.ignore_id):
            errors.append("invalid pixels with a label")
        if self.frame_tag == Frame.SENSOR and np.any(self.valid):
            norms = np.linalg.norm(self.xyz[self.valid], axis=1)
            rng = self.range[self.valid]
            if np.any(np.abs(norms - rng) > 1e-5 * np.maximum(rng, 1e-12)):
                errors.append("range differs from |xyz|")
        if self.normals_valid is not None and np.any(self.normals_valid & inv):
            errors.append("normals defined on invalid pixels")
        return errors


def spherical_coords(p: Sequence[float]) -> Tuple[float, float, float]:
    """(phi, theta, r) of one point: azimuth in (-pi, pi], inclination, range."""
    x, y, z = (float(c) for c in p)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise ZeroRange("point at the sensor origin has no direction")
    return math.atan2(y, x), math.asin(max(-1.0, min(1.0, z / r))), r


def spherical_coords_array(xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized spherical_coords; callers must drop r == 0 first."""
    r = np.linalg.norm(xyz, axis=-1)
    phi = np.arctan2(xyz[..., 1], xyz[..., 0])
    theta = np.arcsin(np.clip(xyz[..., 2] / r, -1.0, 1.0))
    return phi, theta, r


def project(cloud: PointCloud, model: ProjectionModel, ignore_id: int = 255) -> SphericalImageSet:
    """
    Projects a sensor-frame cloud into spherical planes.

    Out-of-FOV and zero-range points are dropped and counted. On a pixel
    collision the nearest return wins (ties keep the lower point index).
    """
    if len(cloud) == 0:
        raise EmptyScan("cannot project an empty cloud")

    xyz = cloud.xyz
    r_all = np.linalg.norm(xyz, axis=1)
    nonzero = r_all > 0.0
    idx = np.flatnonzero(nonzero)
    phi, theta, r = spherical_coords_array(xyz[idx])

    u_cont, v_cont = model.pixel_coords(phi, theta)
    u = np.mod(round_half_away(u_cont).astype(np.int64), model.cols)
    v = round_half_away(v_cont).astype(np.int64)
    keep = (v >= 0) & (v < model.rows) & (theta <= model.fov_up) & (theta >= model.fov_down)

    idx, u, v, r = idx[keep], u[keep], v[keep], r[keep]
    # Farthest first, so the nearest return is written last
    order = np.argsort(r, kind="stable")[::-1]
    idx, u, v, r = idx[order], u[order], v[order], r[order]

    img = SphericalImageSet.empty(model.rows, model.cols, ignore_id=ignore_id, sensor_id=cloud.sensor_id)
    img.xyz[v, u] = xyz[idx]
    img.range[v, u] = r
    img.reflectivity[v, u] = cloud.reflectivity[idx]
    img.point_index[v, u] = idx
    img.valid[v, u] = True
    if cloud.labels is not None:
        img.labels[v, u] = cloud.labels[idx]

    n_valid = int(img.valid.sum())
    img.stats = {
        "zero_range": int((~nonzero).sum()),
        "out_of_fov": int((~keep).sum()),
        "collisions": int(len(idx) - n_valid),
        "valid_pixels": n_valid,
    }
    if img.stats["out_of_fov"]:
        logger.info(f"{cloud.sensor_id.value}: {img.stats['out_of_fov']} points outside the vertical FOV dropped")
    return img


def _shift_indices(rows: int, cols: int, shifts: np.ndarray) -> np.ndarray:
    return np.mod(np.arange(cols)[None, :] - shifts[:, None], cols)


def destagger(img: SphericalImageSet, shifts: Sequence[int]) -> SphericalImageSet:
    """Circularly shifts row v by shifts[v] columns; negated shifts undo it."""
    rows, cols = img.shape
    shifts = np.asarray(shifts, dtype=np.int64).reshape(-1)
    if shifts.shape[0] != rows:
        raise ShapeMismatch("destagger", shifts.shape, (rows,), "one shift per row")
    if not np.any(shifts % cols):
        return img.copy()

    src = _shift_indices(rows, cols, shifts)

    def _take(plane):
        if plane is None:
            return None
        if plane.ndim == 3:
            return np.take_along_axis(plane, src[:, :, None], axis=1)
        return np.take_along_axis(plane, src, axis=1)

    out = img.copy()
    out.xyz = _take(img.xyz)
    out.range = _take(img.range)
    out.reflectivity = _take(img.reflectivity)
    out.labels = _take(img.labels)
    out.valid = _take(img.valid)
    out.point_index = _take(img.point_index)
    out.normals = _take(img.normals)
    out.normals_valid = _take(img.normals_valid)
    return out


def unproject(img: SphericalImageSet) -> PointCloud:
    """One point per valid pixel in row-major order, carrying xyz, reflectivity and label."""
    mask = img.valid
    points = np.concatenate([img.xyz[mask], img.reflectivity[mask][:, None]], axis=1)
    cloud = PointCloud(points=points, labels=img.labels[mask], sensor_id=img.sensor_id)
    cloud.stats = {"pixel_rows": np.nonzero(mask)[0], "pixel_cols": np.nonzero(mask)[1]}
    return cloud
