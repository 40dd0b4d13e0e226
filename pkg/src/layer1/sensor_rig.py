import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import yaml

from src.exceptions import InvalidConfig, MissingSensor
from src.layer1.scan_io import SensorId
from src.layer2.geometry import RigidTransform
from src.layer2.projection import ProjectionModel

logger = logging.getLogger("SensorRig")

# Placeholder mounting: both sensors on the roof at 2.4 m, Down pitched 30 degrees below horizontal
DEFAULT_HEIGHT = 2.4
DEFAULT_DOWN_PITCH_DEG = 30.0


@dataclass(frozen=True, eq=False)
class SensorConfig:
    sensor_id: SensorId
    extrinsic: RigidTransform
    fov_up_deg: float = 45.0
    fov_down_deg: float = -45.0
    rows: int = 32
    cols: int = 256
    destagger_shifts: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise InvalidConfig(f"{self.sensor_id.value}: rows and cols must be positive")
        if not self.fov_up_deg > self.fov_down_deg:
            raise InvalidConfig(f"{self.sensor_id.value}: fov_up_deg must exceed fov_down_deg")
        if not self.destagger_shifts:
            object.__setattr__(self, "destagger_shifts", (0,) * self.rows)
        if len(self.destagger_shifts) != self.rows:
            raise InvalidConfig(
                f"{self.sensor_id.value}: {len(self.destagger_shifts)} destagger shifts for {self.rows} rows")

    @property
    def model(self) -> ProjectionModel:
        return ProjectionModel.from_sensor(self)

    def to_dict(self) -> dict:
        return {
            "extrinsic": self.extrinsic.as_matrix().tolist(),
            "fov_up_deg": float(self.fov_up_deg),
            "fov_down_deg": float(self.fov_down_deg),
            "rows": int(self.rows),
            "cols": int(self.cols),
            "destagger_shifts": [int(s) for s in self.destagger_shifts],
        }


@dataclass(frozen=True, eq=False)
class SensorRig:
    """The Front and Down sensors with their sensor -> vehicle extrinsics."""
    sensors: Dict[SensorId, SensorConfig] = field(default_factory=dict)

    def __post_init__(self):
        for sid in SensorId:
            if sid not in self.sensors:
                raise MissingSensor(f"rig has no '{sid.value}' sensor")

    def __getitem__(self, sensor_id) -> SensorConfig:
        return self.sensors[SensorId(sensor_id)]

    def __iter__(self) -> Iterator[SensorConfig]:
        return (self.sensors[sid] for sid in SensorId)

    @property
    def front(self) -> SensorConfig:
        return self.sensors[SensorId.FRONT]

    @property
    def down(self) -> SensorConfig:
        return self.sensors[SensorId.DOWN]

    def with_resolution(self, rows: int, cols: int) -> "SensorRig":
        """Same extrinsics and FOVs at another grid size (shifts reset to zeros)."""
        return SensorRig({
            s.sensor_id: SensorConfig(s.sensor_id, s.extrinsic, s.fov_up_deg, s.fov_down_deg, rows, cols)
            for s in self
        })


def default_rig(rows: int = 32, cols: int = 256, fov_up_deg: float = 45.0,
                fov_down_deg: float = -45.0) -> SensorRig:
    front = RigidTransform(np.eye(3), np.array([0.8, 0.0, DEFAULT_HEIGHT]))
    # Positive pitch about y tilts the x axis toward -z (downward)
    down = RigidTransform.from_euler(0.0, math.radians(DEFAULT_DOWN_PITCH_DEG), 0.0,
                                     (1.0, 0.0, DEFAULT_HEIGHT))
    return SensorRig({
        SensorId.FRONT: SensorConfig(SensorId.FRONT, front, fov_up_deg, fov_down_deg, rows, cols),
        SensorId.DOWN: SensorConfig(SensorId.DOWN, down, fov_up_deg, fov_down_deg, rows, cols),
    })


def load_rig(path: str = "config/rig.yaml", defaults: Optional[dict] = None) -> SensorRig:
    """
    Reads the rig file. Fields a sensor omits fall back to `defaults`
    (normally the `projection` section of config.yaml).

    Args:
        path: YAML file with a `sensors` mapping keyed by sensor id.
        defaults: Fallback rows, cols, fov_up_deg and fov_down_deg.

    Returns:
        SensorRig holding both sensors.

    Raises:
        MissingSensor: a sensor entry is absent.
        InvalidConfig: a sensor has no extrinsic.
        NotARigidTransform: an extrinsic is too far from a rotation plus translation.
    """
    with open(path, 'r') as f:
        config = yaml.safe_load(f) or {}
    defaults = defaults or {}
    entries = config.get('sensors') or {}

    sensors = {}
    for sid in SensorId:
        entry = entries.get(sid.value)
        if entry is None:
            raise MissingSensor(f"{path}: no '{sid.value}' sensor")
        if 'extrinsic' not in entry:
            raise InvalidConfig(f"{path}: sensor '{sid.value}' has no extrinsic")
        sensors[sid] = SensorConfig(
            sensor_id=sid,
            extrinsic=RigidTransform.from_matrix(entry['extrinsic']),
            fov_up_deg=float(entry.get('fov_up_deg', defaults.get('fov_up_deg', 45.0))),
            fov_down_deg=float(entry.get('fov_down_deg', defaults.get('fov_down_deg', -45.0))),
            rows=int(entry.get('rows', defaults.get('rows', 32))),
            cols=int(entry.get('cols', defaults.get('cols', 256))),
            destagger_shifts=tuple(int(s) for s in (entry.get('destagger_shifts') or ())),
        )
    logger.info(f"loaded rig from {path}")
    return SensorRig(sensors)


def save_rig(rig: SensorRig, path: str):
    with open(path, 'w') as f:
        yaml.safe_dump({"sensors": {s.sensor_id.value: s.to_dict() for s in rig}}, f, sort_keys=False)
