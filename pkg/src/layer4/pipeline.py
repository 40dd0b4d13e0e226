import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.layer1.class_map import ClassMap
from src.layer1.scan_io import Manifest, PointCloud, SensorId, load_labeled_scan, load_scan
from src.layer1.sensor_rig import SensorConfig, SensorRig
from src.layer2.geometry import apply, surface_normals
from src.layer2.projection import SphericalImageSet, destagger, project, round_half_away, spherical_coords_array
from src.layer3.autograd import Tensor, no_grad
from src.layer3.segnet import SegModel, make_input
from src.layer4.metrics import ConfusionMatrix, MetricReport

logger = logging.getLogger("Pipeline")


def preprocess(cloud: PointCloud, sensor: SensorConfig, ignore_id: int = 255) -> SphericalImageSet:
    """project -> destagger -> sensor-to-vehicle transform -> surface normals."""
    img = project(cloud, sensor.model, ignore_id=ignore_id)
    img = destagger(img, sensor.destagger_shifts)
    img = apply(sensor.extrinsic, img)
    return surface_normals(img)


@dataclass
class DualPrediction:
    labels: Dict[SensorId, np.ndarray]
    images: Dict[SensorId, SphericalImageSet]
    logits: Optional[np.ndarray] = None
    stats: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, sensor_id) -> np.ndarray:
        return self.labels[SensorId(sensor_id)]


def predict_images(model: SegModel, images: List[SphericalImageSet]) -> Tuple[List[np.ndarray], np.ndarray]:
    """One forward pass over the stacked image sets. Returns class-id planes and the logits."""
    pairs = [make_input(img, model.config) for img in images]
    inputs = np.stack([p[0] for p in pairs])
    geometry = np.stack([p[1] for p in pairs])
    with no_grad():
        logits = model.forward_batch(Tensor(inputs), Tensor(geometry)).data
    ids = np.argmax(logits, axis=1)
    planes = [np.where(img.valid, ids[i], model.config.ignore_id).astype(np.int32) for i, img in enumerate(images)]
    return planes, logits


def infer_clouds(model: SegModel, clouds: Dict[SensorId, PointCloud], rig: SensorRig) -> DualPrediction:
    """Preprocesses each sensor concurrently, then runs both as one batch."""
    order = [sid for sid in SensorId if sid in clouds]
    ignore_id = model.config.ignore_id
    with ThreadPoolExecutor(max_workers=len(order)) as pool:
        futures = {sid: pool.submit(preprocess, clouds[sid], rig[sid], ignore_id) for sid in order}
        images = {sid: f.result() for sid, f in futures.items()}
    planes, logits = predict_images(model, [images[sid] for sid in order])
    return DualPrediction(labels=dict(zip(order, planes)), images=images, logits=logits)


def infer_dual(model: SegModel, front_path: str, down_path: str, rig: SensorRig) -> DualPrediction:
    clouds = {SensorId.FRONT: load_scan(front_path, SensorId.FRONT),
              SensorId.DOWN: load_scan(down_path, SensorId.DOWN)}
    return infer_clouds(model, clouds, rig)


def _evaluate_frame(model: SegModel, frame: dict, rig: SensorRig, class_map: ClassMap) -> Tuple[ConfusionMatrix, int]:
    clouds = {sid: load_labeled_scan(e.scan_path, e.label_path, class_map, sid) for sid, e in frame.items()}
    result = infer_clouds(model, clouds, rig)
    cm = ConfusionMatrix(class_map.num_classes, class_map.ignore_id)
    for sid, pred in result.labels.items():
        cm.add(pred, result.images[sid].labels)
    return cm, len(result.labels)


def evaluate(model: SegModel, manifest: Manifest, rig: SensorRig, class_map: ClassMap,
             split: Optional[str] = "test", workers: int = 2, extra: Optional[dict] = None) -> MetricReport:
    """
    Runs inference over every frame of `split` (all frames for None) and scores the range-image labels.
    Frames are sharded across workers; their matrices merge by addition.
    """
    frames = manifest.frames(split)
    if not frames:
        logger.warning(f"no '{split}' frames in {manifest.root}")
    total = ConfusionMatrix(class_map.num_classes, class_map.ignore_id)
    scans = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for cm, n in pool.map(lambda fr: _evaluate_frame(model, fr, rig, class_map), frames):
            total = total.merge(cm)
            scans += n
    report = MetricReport.from_confusion(total, class_map.names(), scans=scans, extra=extra)
    logger.info(f"evaluated {scans} scans: mIoU {report.miou:.4f}")
    return report


def point_labels(cloud: PointCloud, sensor: SensorConfig, plane: np.ndarray, ignore_id: int = 255) -> np.ndarray:
    """
    Per-point class ids read back from a destaggered label plane: each point takes
    the label of the pixel it projects to. Zero-range and out-of-FOV points get ignore_id.
    """
    model = sensor.model
    labels = np.full(len(cloud), ignore_id, dtype=np.int32)
    xyz = cloud.xyz
    idx = np.flatnonzero(np.linalg.norm(xyz, axis=1) > 0.0)
    if len(idx) == 0:
        return labels
    phi, theta, _ = spherical_coords_array(xyz[idx])
    u_cont, v_cont = model.pixel_coords(phi, theta)
    u = np.mod(round_half_away(u_cont).astype(np.int64), model.cols)
    v = round_half_away(v_cont).astype(np.int64)
    keep = (v >= 0) & (v < model.rows) & (theta <= model.fov_up) & (theta >= model.fov_down)
    idx, u, v = idx[keep], u[keep], v[keep]
    shifts = np.asarray(sensor.destagger_shifts, dtype=np.int64)
    u = np.mod(u + shifts[v], model.cols)
    labels[idx] = plane[v, u]
    return labels
