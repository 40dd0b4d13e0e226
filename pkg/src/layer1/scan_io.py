import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from src.exceptions import EmptyScan, LengthMismatch, MalformedFile
from src.layer1.class_map import ClassMap

logger = logging.getLogger("ScanIO")

# SemanticKITTI conventions: 4 x float32 per point, uint32 per label word
POINT_DTYPE = np.dtype('<f4')
LABEL_DTYPE = np.dtype('<u4')
BYTES_PER_POINT = 16


class SensorId(str, Enum):
    FRONT = "front"
    DOWN = "down"


@dataclass
class PointCloud:
    """
    One LiDAR revolution.

    points: (N, 4) float64 array of x, y, z [m] and reflectivity in [0, 1].
    labels: optional (N,) class ids (ClassMap ids or ignore_id).
    """
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    sensor_id: SensorId = SensorId.FRONT
    timestamp: int = 0
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
            if len(self.labels) != len(self.points):
                raise LengthMismatch(
                    f"{len(self.labels)} labels for {len(self.points)} points")
        if not np.all(np.isfinite(self.points)):
            raise MalformedFile("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectivity(self) -> np.ndarray:
        return self.points[:, 3]


def load_scan(path: str, sensor_id: SensorId = SensorId.FRONT, timestamp: int = 0) -> PointCloud:
    """
    Reads a `.bin` scan (little-endian float32 x, y, z, reflectivity per point).

    Non-finite points are dropped and reported; reflectivity is clamped into [0, 1].
    """
    size = os.path.getsize(path)
    if size % BYTES_PER_POINT != 0:
        raise MalformedFile(f"{path}: {size} bytes is not a multiple of {BYTES_PER_POINT}")
    if size == 0:
        raise EmptyScan(f"{path}: no points")

    raw = np.fromfile(path, dtype=POINT_DTYPE).reshape(-1, 4)
    finite = np.all(np.isfinite(raw), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        logger.warning(f"{os.path.basename(path)}: dropped {dropped} non-finite points")
    points = raw[finite].astype(np.float64)
    if points.shape[0] == 0:
        raise EmptyScan(f"{path}: every point was non-finite")
    clamped = int(((points[:, 3] < 0.0) | (points[:, 3] > 1.0)).sum())
    np.clip(points[:, 3], 0.0, 1.0, out=points[:, 3])

    cloud = PointCloud(points=points, sensor_id=SensorId(sensor_id), timestamp=timestamp)
    cloud.stats = {"raw_count": int(raw.shape[0]), "dropped_non_finite": dropped,
                   "clamped_reflectivity": clamped, "kept_mask": finite}
    return cloud


def write_scan(path: str, cloud: PointCloud):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    cloud.points.astype(POINT_DTYPE).tofile(path)


def decode_label_words(words: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Splits uint32 label words into (semantic low 16 bits, instance high 16 bits)."""
    words = np.asarray(words, dtype=np.uint32)
    return (words & 0xFFFF).astype(np.int32), (words >> 16).astype(np.int32)


def _read_labels(path: str, n_points: int, class_map: ClassMap) -> Tuple[np.ndarray, np.ndarray]:
    """Class ids and the mask of labels whose raw id the class map does not know."""
    size = os.path.getsize(path)
    if size % LABEL_DTYPE.itemsize != 0:
        raise MalformedFile(f"{path}: {size} bytes is not a multiple of 4")
    if size // LABEL_DTYPE.itemsize != n_points:
        raise LengthMismatch(f"{path}: {size // 4} labels for {n_points} points")

    semantic, _ = decode_label_words(np.fromfile(path, dtype=LABEL_DTYPE))
    ids = class_map.lookup_table()[semantic]
    unknown = ~np.isin(semantic, class_map.known_raw_ids())
    if unknown.any():
        logger.info(f"{os.path.basename(path)}: {int(unknown.sum())} labels with unknown raw ids -> ignore")
    return ids, unknown


def load_labels(path: str, n_points: int, class_map: ClassMap) -> np.ndarray:
    """
    Reads a `.label` file and remaps raw semantic ids through the class map.

    Unknown raw ids map to `ignore_id` and are reported.
    """
    return _read_labels(path, n_points, class_map)[0]


def write_labels(path: str, class_ids: np.ndarray, class_map: ClassMap,
                 instances: Optional[np.ndarray] = None):
    raw = class_map.to_raw(class_ids).astype(np.uint32)
    if instances is not None:
        raw = raw | (np.asarray(instances, dtype=np.uint32) << 16)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    raw.astype(LABEL_DTYPE).tofile(path)


def load_labeled_scan(scan_path: str, label_path: Optional[str], class_map: ClassMap,
                      sensor_id: SensorId = SensorId.FRONT) -> PointCloud:
    """
    Scan plus its labels; labels of dropped non-finite points are discarded with them.

    `stats["unknown_raw_ids"]` counts kept points whose raw id fell back to ignore.
    """
    cloud = load_scan(scan_path, sensor_id=sensor_id)
    if label_path:
        ids, unknown = _read_labels(label_path, cloud.stats["raw_count"], class_map)
        kept = cloud.stats["kept_mask"]
        cloud.labels = ids[kept]
        cloud.stats["unknown_raw_ids"] = int(unknown[kept].sum())
    return cloud


@dataclass(frozen=True)
class ManifestEntry:
    sequence: str
    frame: str
    sensor_id: SensorId
    scan_path: str
    label_path: Optional[str]
    split: str


@dataclass
class Manifest:
    """
    Index of a KITTI-style dataset: sequences/<seq>/<sensor>/velodyne|labels/<frame>.

    Frames of a `test_sequences` sequence may only sit in the test split.
    """
    root: str
    entries: List[ManifestEntry]
    rig_path: Optional[str] = None
    test_sequences: Tuple[str, ...] = ("0000",)

    def __post_init__(self):
        leaked = sorted({f"{e.sequence}/{e.frame}" for e in self.entries
                         if e.sequence in self.test_sequences and e.split != "test"})
        if leaked:
            raise MalformedFile(f"{self.root}: test sequence frames outside the test split: {leaked}")

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def frames(self, split: Optional[str] = None) -> List[Dict[SensorId, ManifestEntry]]:
        """Entries grouped per (sequence, frame), in file order."""
        grouped: Dict[Tuple[str, str], Dict[SensorId, ManifestEntry]] = {}
        for e in self.entries:
            if split is None or e.split == split:
                grouped.setdefault((e.sequence, e.frame), {})[e.sensor_id] = e
        return list(grouped.values())


MANIFEST_VERSION = 1


def write_manifest(root: str, entries: List[ManifestEntry], rig_file: Optional[str] = None,
                   test_sequences=("0000",)) -> str:
    def rel(p):
        return None if p is None else os.path.relpath(p, root)

    doc = {
        "version": MANIFEST_VERSION,
        "rig": rig_file,
        "test_sequences": list(test_sequences),
        "entries": [
            {"sequence": e.sequence, "frame": e.frame, "sensor": e.sensor_id.value,
             "scan": rel(e.scan_path), "label": rel(e.label_path), "split": e.split}
            for e in entries
        ],
    }
    path = os.path.join(root, "manifest.yaml")
    with open(path, 'w') as f:
        yaml.safe_dump(doc, f, sort_keys=False)
    return path


def load_manifest(path: str) -> Manifest:
    """Accepts the manifest file or the dataset root that holds `manifest.yaml`."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.yaml")
    if not os.path.exists(path):
        raise MalformedFile(f"{path}: manifest not found")
    with open(path, 'r') as f:
        doc = yaml.safe_load(f) or {}
    if doc.get("version") != MANIFEST_VERSION:
        raise MalformedFile(f"{path}: unsupported manifest version {doc.get('version')}")
    root = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return None if p is None else os.path.join(root, p)

    entries = [
        ManifestEntry(sequence=str(e["sequence"]), frame=str(e["frame"]), sensor_id=SensorId(e["sensor"]),
                      scan_path=resolve(e["scan"]), label_path=resolve(e.get("label")), split=e["split"])
        for e in doc.get("entries") or []
    ]
    return Manifest(root=root, entries=entries, rig_path=resolve(doc.get("rig")),
                    test_sequences=tuple(str(s) for s in doc.get("test_sequences") or ()))
