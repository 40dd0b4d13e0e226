from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import yaml

from src.exceptions import InvalidConfig

TAXONOMY = (
    "car", "forklift", "person", "object", "driveable ground",
    "other ground", "lane marking", "vegetation", "building",
)


@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    color: Tuple[int, int, int]
    raw_id: int


@dataclass(frozen=True)
class ClassMap:
    """
    The nine industrial-yard classes plus one ignore id.

    Raw ids are the low 16 bits of a `.label` word. `learning_map` folds extra
    raw ids onto trainable classes; every other raw id maps to `ignore_id`.
    `ignore_raw_ids` are ignored on purpose (unlabeled, outlier) and do not count as unknown.
    """
    classes: Tuple[SemanticClass, ...]
    ignore_id: int = 255
    learning_map: Dict[int, int] = field(default_factory=dict)
    ignore_raw_ids: Tuple[int, ...] = (0, 1)

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise InvalidConfig(f"class ids must be dense from 0, got {ids}")
        if tuple(c.name for c in self.classes) != TAXONOMY:
            raise InvalidConfig(f"class table must list {TAXONOMY}")
        if self.ignore_id in ids:
            raise InvalidConfig(f"ignore_id {self.ignore_id} collides with a class id")
        claimed = set(self.learning_map) | {c.raw_id for c in self.classes}
        if claimed & set(self.ignore_raw_ids):
            raise InvalidConfig(f"ignore_raw_ids {sorted(claimed & set(self.ignore_raw_ids))} are mapped to classes")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def names(self) -> List[str]:
        return [c.name for c in self.classes]

    def id_of(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise KeyError(name)

    def lookup_table(self) -> np.ndarray:
        """Total 65536-entry table: raw semantic id -> class id (or ignore_id)."""
        table = np.full(1 << 16, self.ignore_id, dtype=np.int32)
        for raw, cid in self.learning_map.items():
            table[raw] = cid
        for c in self.classes:
            table[c.raw_id] = c.id
        return table

    def known_raw_ids(self) -> np.ndarray:
        """Raw ids the map has an opinion on: class ids, learning_map keys and ignore_raw_ids."""
        known = set(self.learning_map) | {c.raw_id for c in self.classes} | set(self.ignore_raw_ids)
        return np.array(sorted(known), dtype=np.int32)

    def to_raw(self, class_ids: np.ndarray) -> np.ndarray:
        """Class ids back to raw ids for writing `.label` files. Ignore maps to raw 0."""
        inverse = np.zeros(max(self.ignore_id, self.num_classes) + 1, dtype=np.uint32)
        for c in self.classes:
            inverse[c.id] = c.raw_id
        return inverse[np.asarray(class_ids)]

    def colors(self) -> np.ndarray:
        """(ignore_id + 1, 3) uint8 palette; ignore and unknown ids render black."""
        palette = np.zeros((max(self.ignore_id, self.num_classes) + 1, 3), dtype=np.uint8)
        for c in self.classes:
            palette[c.id] = c.color
        return palette

    def is_valid(self, class_ids: np.ndarray) -> bool:
        ids = np.asarray(class_ids)
        return bool(np.all(((ids >= 0) & (ids < self.num_classes)) | (ids == self.ignore_id)))


def load_class_map(config_path: str = "config/config.yaml") -> ClassMap:
    with open(config_path, 'r') as f:
        config = yaml.safe_load(f)
    return class_map_from_config(config)


def class_map_from_config(config: dict) -> ClassMap:
    ds = config.get('dataset', {})
    entries = ds.get('classes')
    if not entries:
        raise InvalidConfig("dataset.classes is missing")
    classes = tuple(
        SemanticClass(id=int(e['id']), name=str(e['name']),
                      color=tuple(int(v) for v in e['color']), raw_id=int(e['raw_id']))
        for e in entries
    )
    learning_map = {int(k): int(v) for k, v in (ds.get('learning_map') or {}).items()}
    return ClassMap(classes=classes, ignore_id=int(ds.get('ignore_id', 255)),
                    learning_map=learning_map,
                    ignore_raw_ids=tuple(int(r) for r in ds.get('ignore_raw_ids', (0, 1))))


def class_statistics(label_arrays, class_map: ClassMap) -> np.ndarray:
    """Per-class point counts over a collection of class-id arrays (ignore excluded)."""
    counts = np.zeros(class_map.num_classes, dtype=np.int64)
    for labels in label_arrays:
        ids = np.asarray(labels).ravel()
        ids = ids[ids != class_map.ignore_id]
        counts += np.bincount(ids, minlength=class_map.num_classes)[:class_map.num_classes]
    return counts


def default_class_map() -> ClassMap:
    # Same table as config/config.yaml, for code paths that run without a config file
    colors = [(100, 150, 245), (250, 140, 30), (230, 30, 30), (255, 240, 150), (150, 150, 150),
              (75, 0, 175), (170, 0, 255), (0, 175, 0), (0, 200, 255)]
    raw = [10, 16, 30, 99, 40, 49, 60, 70, 50]
    classes = tuple(SemanticClass(i, n, colors[i], raw[i]) for i, n in enumerate(TAXONOMY))
    return ClassMap(classes=classes, ignore_id=255, learning_map={44: 4, 48: 5, 52: 8})

