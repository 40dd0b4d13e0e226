import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from src.exceptions import FrameMismatch, NotARigidTransform, ShapeMismatch
from src.layer1.scan_io import SensorId
from src.layer2.projection import Frame, SphericalImageSet

logger = logging.getLogger("Geometry")

RIGID_TOL = 1e-6
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation mapping sensor coordinates into the ISO 8855 vehicle frame."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("RigidTransform", r.shape, t.shape, "expected (3, 3) rotation and (3,) translation")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise NotARigidTransform("non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > RIGID_TOL or abs(np.linalg.det(r) - 1.0) > RIGID_TOL:
            raise NotARigidTransform(f"rotation is not orthonormal with det +1 (det={np.linalg.det(r):.6f})")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, repair_tol: float = 1e-3) -> "RigidTransform":
        """
        Builds a transform from a 4x4 homogeneous matrix.

        A rotation block within `repair_tol` of orthonormal is snapped to the
        nearest rotation (SVD projection); anything worse is rejected.
        """
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeMismatch("from_matrix", m.shape, (4, 4))
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > repair_tol:
            raise NotARigidTransform(f"bottom row must be [0 0 0 1], got {m[3].tolist()}")
        r = m[:3, :3]
        err = max(np.max(np.abs(r.T @ r - np.eye(3))), abs(np.linalg.det(r) - 1.0))
        if err > repair_tol:
            raise NotARigidTransform(f"rotation deviates from orthonormal by {err:.2e} (tolerance {repair_tol:.0e})")
        if err > RIGID_TOL:
            u, _, vt = np.linalg.svd(r)
            repaired = u @ vt
            if np.linalg.det(repaired) < 0:
                u[:, 2] *= -1
                repaired = u @ vt
            logger.info(f"orthonormalized rotation block (deviation {err:.2e})")
            r = repaired
        return cls(r, m[:3, 3].copy())

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float,
                   translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """Z-Y-X (yaw, pitch, roll) angles in radians, R = Rz(yaw) Ry(pitch) Rx(roll)."""
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        return cls(rz @ ry @ rx, np.asarray(translation, dtype=np.float64))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """R p + t for an (N, 3) array."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """(a o b)(p) = a(b(p))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply(tf: RigidTransform, img: SphericalImageSet) -> SphericalImageSet:
    """
    Moves every valid pixel's xyz into the vehicle frame.

    The range plane stays in the sensor frame; it defines the image grid.
    Normals, when present, are rotated along.
    """
    if img.frame_tag != Frame.SENSOR:
        raise FrameMismatch(f"image set is already in the {img.frame_tag.value} frame")
    out = img.copy()
    mask = img.valid
    out.xyz[mask] = tf.apply_points(img.xyz[mask])
    if img.normals is not None:
        nmask = img.normals_valid if img.normals_valid is not None else mask
        out.normals[nmask] = img.normals[nmask] @ tf.rotation.T
    out.viewpoint = tf.apply_points(img.viewpoint[None, :])[0]
    out.frame_tag = Frame.VEHICLE
    return out


def surface_normals(img: SphericalImageSet) -> SphericalImageSet:
    """
    Finite-difference normals on the range-image grid.

    With P_c = xyz[v, u], P_b = xyz[v, u+1] (wrapping at the seam) and
    P_a = xyz[v+1, u], n = (P_b - P_c) x (P_a - P_c), normalized and flipped to
    face the sensor. The last row has no lower neighbor and stays undefined.
    """
    if img.frame_tag != Frame.VEHICLE:
        raise FrameMismatch("surface normals are estimated in the vehicle frame; apply the extrinsic first")
    rows, cols = img.shape
    xyz = img.xyz
    valid = img.valid

    p_c = xyz[:-1]
    p_b = np.roll(xyz, -1, axis=1)[:-1]
    p_a = xyz[1:]
    stencil = valid[:-1] & np.roll(valid, -1, axis=1)[:-1] & valid[1:]

    n = np.cross(p_b - p_c, p_a - p_c)
    norm = np.linalg.norm(n, axis=-1)
    degenerate = stencil & (norm < DEGENERATE_NORM)
    defined = stencil & ~degenerate

    safe = np.where(defined, norm, 1.0)
    n = n / safe[..., None]
    facing = np.einsum("hwc,hwc->hw", n, img.viewpoint[None, None, :] - p_c)
    n = np.where((facing < 0)[..., None], -n, n)
    n[~defined] = 0.0

    out = img.copy()
    out.normals = np.zeros((rows, cols, 3))
    out.normals[:-1] = n
    out.normals_valid = np.zeros((rows, cols), dtype=bool)
    out.normals_valid[:-1] = defined

    n_degenerate = int(degenerate.sum())
    out.stats = dict(img.stats)
    out.stats.update({
        "normals_defined": int(defined.sum()),
        "normals_degenerate": n_degenerate,
        "normals_missing_neighbors": int(valid.sum() - defined.sum() - n_degenerate),
    })
    if n_degenerate:
        logger.info(f"{img.sensor_id.value}: {n_degenerate} degenerate normals marked invalid")
    return out


@dataclass
class FusedCloud:
    """Vehicle-frame points of several sensors in one joint coordinate system."""
    points: np.ndarray        # (N, 4) x, y, z, reflectivity
    labels: np.ndarray        # (N,)
    sensor_ids: np.ndarray    # (N,) sensor name per point
    normals: Optional[np.ndarray] = None
    stats: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.points.shape[0]


def fuse(images: Iterable[SphericalImageSet]) -> FusedCloud:
    points, labels, sensors, normals = [], [], [], []
    with_normals = True
    stats = {}
    for img in images:
        if img.frame_tag != Frame.VEHICLE:
            raise FrameMismatch(f"{img.sensor_id.value} image is in the {img.frame_tag.value} frame")
        mask = img.valid
        points.append(np.concatenate([img.xyz[mask], img.reflectivity[mask][:, None]], axis=1))
        labels.append(img.labels[mask])
        sensors.append(np.full(int(mask.sum()), SensorId(img.sensor_id).value))
        if img.normals is None:
            with_normals = False
        else:
            normals.append(img.normals[mask])
        stats[SensorId(img.sensor_id).value] = int(mask.sum())
    if not points:
        raise ShapeMismatch("fuse", (0,), detail="no image sets to fuse")
    return FusedCloud(
        points=np.concatenate(points),
        labels=np.concatenate(labels),
        sensor_ids=np.concatenate(sensors),
        normals=np.concatenate(normals) if with_normals else None,
        stats=stats,
    )
