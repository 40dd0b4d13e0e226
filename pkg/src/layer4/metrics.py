import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ShapeMismatch

logger = logging.getLogger("Metrics")


class ConfusionMatrix:
    """C x C counts, rows = ground truth, cols = prediction. Ignore-labeled pixels are skipped."""

    def __init__(self, num_classes: int, ignore_id: int = 255, counts: Optional[np.ndarray] = None):
        self.num_classes = int(num_classes)
        self.ignore_id = int(ignore_id)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes):
            raise ShapeMismatch("ConfusionMatrix", counts.shape, (self.num_classes, self.num_classes))
        self.counts = counts
        self.skipped = 0

    def add(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """In-place accumulation of one labeling."""
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ShapeMismatch("accumulate", pred.shape, gt.shape)
        evaluated = gt != self.ignore_id
        # A prediction outside the class range on a labeled pixel cannot be placed in the matrix
        in_range = (pred >= 0) & (pred < self.num_classes)
        bad = evaluated & ~in_range
        if np.any(bad):
            self.skipped += int(bad.sum())
            logger.warning(f"{int(bad.sum())} labeled pixels without a class prediction skipped")
        keep = evaluated & in_range
        index = self.num_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
        self.counts += np.bincount(index, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatch("merge", self.counts.shape, other.counts.shape)
        merged = ConfusionMatrix(self.num_classes, self.ignore_id, self.counts + other.counts)
        merged.skipped = self.skipped + other.skipped
        return merged

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> Tuple[np.ndarray, float]:
        """Per-class IoU (nan where TP + FP + FN = 0) and the mean over defined classes."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(divide='ignore', invalid='ignore'):
            per_class = np.where(union > 0, tp / union, np.nan)
        defined = ~np.isnan(per_class)
        miou = float(per_class[defined].mean()) if np.any(defined) else float("nan")
        return per_class, miou

    def pixel_accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts) / total) if total else float("nan")


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """New matrix with one more labeling counted; `cm` is left unchanged."""
    return ConfusionMatrix(cm.num_classes, cm.ignore_id, cm.counts.copy()).add(pred, gt)


def iou(cm: ConfusionMatrix) -> Tuple[List[float], float]:
    per_class, miou = cm.iou()
    return per_class.tolist(), miou


@dataclass
class MetricReport:
    """Per-class IoU table plus mIoU; undefined classes stay nan and are listed."""
    class_names: List[str]
    per_class_iou: List[float]
    miou: float
    pixel_accuracy: float
    evaluated_pixels: int
    scans: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, class_names: Sequence[str], scans: int = 0,
                       extra: Optional[dict] = None) -> "MetricReport":
        per_class, miou = cm.iou()
        return cls(class_names=list(class_names), per_class_iou=per_class.tolist(), miou=miou,
                   pixel_accuracy=cm.pixel_accuracy(), evaluated_pixels=cm.total, scans=scans,
                   extra=dict(extra or {}))

    @property
    def undefined_classes(self) -> List[str]:
        return [n for n, v in zip(self.class_names, self.per_class_iou) if np.isnan(v)]

    def iou_of(self, name: str) -> float:
        return self.per_class_iou[self.class_names.index(name)]

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)
        return {
            "miou": clean(self.miou),
            "pixel_accuracy": clean(self.pixel_accuracy),
            "evaluated_pixels": int(self.evaluated_pixels),
            "scans": int(self.scans),
            "per_class_iou": {n: clean(v) for n, v in zip(self.class_names, self.per_class_iou)},
            "undefined_classes": self.undefined_classes,
            **self.extra,
        }

    def to_markdown(self, title: str = "Segmentation Results") -> str:
        def pct(v):
            return "n/a" if np.isnan(v) else f"{100.0 * v:.2f}"
        lines = [f"# {title}", ""]
        for k, v in self.extra.items():
            lines.append(f"- **{k}**: {v}")
        lines += [f"- **scans**: {self.scans}", f"- **evaluated pixels**: {self.evaluated_pixels}",
                  f"- **pixel accuracy**: {pct(self.pixel_accuracy)} %", ""]
        lines.append("| " + " | ".join(self.class_names + ["mIoU"]) + " |")
        lines.append("|" + "---|" * (len(self.class_names) + 1))
        lines.append("| " + " | ".join([pct(v) for v in self.per_class_iou] + [pct(self.miou)]) + " |")
        if self.undefined_classes:
            lines += ["", f"Undefined (absent from prediction and ground truth, excluded from mIoU): "
                          f"{', '.join(self.undefined_classes)}"]
        return "\n".join(lines) + "\n"
