import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.exceptions import EmptyScan, InvalidConfig
from src.layer1.scan_io import PointCloud, SensorId
from src.layer1.sensor_rig import SensorRig
from src.layer3.objectives import loss_config_from_config
from src.layer3.segnet import SegModel, build, net_config_from_config
from src.layer4.pipeline import evaluate, infer_clouds, predict_images, preprocess
from src.layer4.trainer import train, train_config_from_config

logger = logging.getLogger("Benchmark")

MIN_REPETITIONS = 30


class BenchMode(str, Enum):
    SINGLE = "single"   # one sensor, batch of one
    DUAL = "dual"       # both sensors, batch of two


def nearest_rank(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile (1-based rank ceil(p * n)) of unsorted values."""
    ordered = sorted(values)
    if not ordered:
        return float("nan")
    rank = min(len(ordered), max(1, math.ceil(p * len(ordered))))
    return float(ordered[rank - 1])


@dataclass
class LatencyReport:
    times_ms: List[float]
    median_ms: float
    p95_ms: float
    mode: BenchMode
    budget_ms: float
    warmup: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def within_budget(self) -> bool:
        return self.p95_ms <= self.budget_ms

    @classmethod
    def from_times(cls, times_ms: Sequence[float], mode, budget_ms: float, warmup: int = 0,
                   extra: Optional[dict] = None) -> "LatencyReport":
        if not times_ms:
            raise InvalidConfig("latency report needs at least one timed run")
        times = [float(t) for t in times_ms]
        return cls(times_ms=times, median_ms=float(np.median(times)), p95_ms=nearest_rank(times, 0.95),
                   mode=BenchMode(mode), budget_ms=float(budget_ms), warmup=warmup, extra=dict(extra or {}))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "repetitions": len(self.times_ms),
            "warmup": self.warmup,
            "median_ms": round(self.median_ms, 4),
            "p95_ms": round(self.p95_ms, 4),
            "min_ms": round(min(self.times_ms), 4),
            "max_ms": round(max(self.times_ms), 4),
            "budget_ms": round(self.budget_ms, 4),
            "within_budget": self.within_budget,
            **self.extra,
            "times_ms": [round(t, 4) for t in self.times_ms],
        }


def realtime_budget_ms(config: dict) -> float:
    """Per-frame budget of the control loop, checked against the sensor scan period."""
    rt = config.get('realtime', {})
    loop_hz = float(rt.get('control_loop_hz', 30.0))
    sensor_hz = float(rt.get('sensor_rate_hz', 10.0))
    if loop_hz <= 0 or sensor_hz <= 0:
        raise InvalidConfig("realtime rates must be positive")
    budget = 1000.0 / loop_hz
    period = 1000.0 / sensor_hz
    if budget > period:
        logger.warning(f"control loop budget {budget:.1f} ms exceeds the {period:.1f} ms scan period")
    return budget


def time_stage(fn: Callable[[], object], repetitions: int, warmup: int = 5) -> List[float]:
    """Wall time of `repetitions` calls in milliseconds, after `warmup` untimed calls."""
    if repetitions < 1 or warmup < 0:
        raise InvalidConfig("repetitions must be >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1000.0)
    return times


def bench(model: SegModel, scans: Sequence[Dict[SensorId, PointCloud]], mode, rig: SensorRig,
          repetitions: int = MIN_REPETITIONS, warmup: int = 5, budget_ms: float = 1000.0 / 30.0,
          sensor: SensorId = SensorId.FRONT) -> LatencyReport:
    """
    Times preprocessing plus inference over preloaded frames (file I/O excluded).
    Run k uses frame k mod len(scans). Single mode runs `sensor` alone; dual mode
    runs both sensors as one batch.
    """
    mode = BenchMode(mode)
    if repetitions < MIN_REPETITIONS:
        raise InvalidConfig(f"bench needs at least {MIN_REPETITIONS} repetitions, got {repetitions}")
    if not scans:
        raise EmptyScan("bench needs at least one frame")
    ignore_id = model.config.ignore_id
    cursor = {"k": 0}

    def next_frame() -> Dict[SensorId, PointCloud]:
        frame = scans[cursor["k"] % len(scans)]
        cursor["k"] += 1
        return frame

    if mode == BenchMode.SINGLE:
        def stage():
            frame = next_frame()
            predict_images(model, [preprocess(frame[sensor], rig[sensor], ignore_id)])
    else:
        def stage():
            infer_clouds(model, next_frame(), rig)

    times = time_stage(stage, repetitions, warmup)
    report = LatencyReport.from_times(times, mode, budget_ms, warmup,
                                      extra={"parameters": model.param_count,
                                             "image_shape": [rig[sensor].rows, rig[sensor].cols]})
    verdict = "within" if report.within_budget else "over"
    logger.info(f"{mode.value}: median {report.median_ms:.2f} ms, p95 {report.p95_ms:.2f} ms "
                f"({verdict} the {budget_ms:.1f} ms budget)")
    return report


def compare_presets(config: dict, presets: Sequence[str], train_set, manifest, rig: SensorRig, class_map,
                    frames: Sequence[Dict[SensorId, PointCloud]], train_overrides: Optional[dict] = None,
                    repetitions: int = MIN_REPETITIONS, warmup: int = 5) -> List[dict]:
    """
    Trains each backbone preset with the same curriculum, scores it on the test
    split and times it in both modes. One row per preset.
    """
    budget = realtime_budget_ms(config)
    train_cfg = train_config_from_config(config, **dict(train_overrides or {}, checkpoint_dir=None))
    loss_cfg = loss_config_from_config(config, train_set.class_counts())
    rows = []
    for preset in presets:
        net_cfg = net_config_from_config(config, preset)
        model = build(net_cfg, seed=train_cfg.seed)
        logger.info(f"--- preset '{preset}': {model.param_count} parameters ---")
        train(model, train_set, train_cfg, loss_cfg)
        report = evaluate(model, manifest, rig, class_map, split="test")
        single = bench(model, frames, BenchMode.SINGLE, rig, repetitions, warmup, budget)
        dual = bench(model, frames, BenchMode.DUAL, rig, repetitions, warmup, budget)
        rows.append({
            "preset": preset,
            "parameters": int(model.param_count),
            "miou": None if np.isnan(report.miou) else float(report.miou),
            "single_ms": float(single.median_ms),
            "dual_ms": float(dual.median_ms),
            "dual_p95_ms": float(dual.p95_ms),
            "within_budget": bool(dual.within_budget),
        })
    return rows
