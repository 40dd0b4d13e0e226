import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from src.exceptions import EmptyScan, InvalidConfig
from src.layer1.class_map import ClassMap, class_statistics
from src.layer1.scan_io import Manifest, SensorId, load_labeled_scan
from src.layer1.sensor_rig import SensorRig
from src.layer3.segnet import NetConfig, make_input
from src.layer4.pipeline import preprocess

logger = logging.getLogger("ScanDataset")


@dataclass
class Sample:
    """Cached network inputs of one scan."""
    key: str
    sensor_id: SensorId
    inputs: np.ndarray       # (C_in, H, W)
    geometry: np.ndarray     # (6, H, W)
    labels: np.ndarray       # (H, W) class ids or ignore
    valid: np.ndarray        # (H, W)


@dataclass
class ScanDataset:
    samples: List[Sample]
    class_map: ClassMap
    stats: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def sensor_pools(self) -> Dict[SensorId, List[int]]:
        pools: Dict[SensorId, List[int]] = {}
        for i, s in enumerate(self.samples):
            pools.setdefault(s.sensor_id, []).append(i)
        return pools

    def batch(self, indices) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (inputs, geometry, labels) for the given sample indices."""
        chosen = [self.samples[i] for i in indices]
        return (np.stack([s.inputs for s in chosen]),
                np.stack([s.geometry for s in chosen]),
                np.stack([s.labels for s in chosen]))

    def class_counts(self) -> np.ndarray:
        return class_statistics([s.labels for s in self.samples], self.class_map)

    @classmethod
    def from_manifest(cls, manifest: Manifest, rig: SensorRig, class_map: ClassMap,
                      net_config: NetConfig, split: Optional[str] = "train",
                      progress: bool = False) -> "ScanDataset":
        """Loads and preprocesses every scan of `split` once (None = every split)."""
        entries = manifest.split(split) if split else list(manifest.entries)
        if not entries:
            raise EmptyScan(f"manifest {manifest.root} has no '{split}' scans")
        samples = []
        for e in tqdm(entries, desc=f"Loading {split or 'all'}", disable=not progress):
            cloud = load_labeled_scan(e.scan_path, e.label_path, class_map, e.sensor_id)
            img = preprocess(cloud, rig[e.sensor_id], class_map.ignore_id)
            inputs, geometry = make_input(img, net_config)
            samples.append(Sample(key=f"{e.sequence}/{e.sensor_id.value}/{e.frame}", sensor_id=e.sensor_id,
                                  inputs=inputs, geometry=geometry, labels=img.labels, valid=img.valid))
        shapes = {s.labels.shape for s in samples}
        if len(shapes) != 1:
            raise InvalidConfig(f"scans project to different image sizes {sorted(shapes)}; batches need one size")
        dataset = cls(samples=samples, class_map=class_map,
                      stats={"scans": len(samples), "image_shape": list(shapes.pop())})
        logger.info(f"{len(samples)} '{split}' scans cached "
                    f"({', '.join(f'{k.value}: {len(v)}' for k, v in dataset.sensor_pools().items())})")
        return dataset
