import logging
import os
from enum import Enum
from typing import Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from src.exceptions import MissingNormals, ShapeMismatch
from src.layer1.class_map import ClassMap, default_class_map
from src.layer2.projection import SphericalImageSet

logger = logging.getLogger("Render")


class Channel(str, Enum):
    REFLECTIVITY = "reflectivity"
    RANGE = "range"
    LABELS = "labels"
    NORMALS = "normals"
    PREDICTION = "prediction"


def _grayscale(plane: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros(plane.shape + (3,))
    if np.any(valid):
        lo, hi = plane[valid].min(), plane[valid].max()
        scaled = (plane - lo) / (hi - lo) if hi > lo else np.ones_like(plane)
        out[valid] = np.clip(scaled[valid], 0.0, 1.0)[:, None]
    return out


def _class_colors(ids: np.ndarray, class_map: ClassMap) -> np.ndarray:
    palette = class_map.colors()
    ids = np.clip(np.asarray(ids), 0, palette.shape[0] - 1)
    return palette[ids].astype(np.float64) / 255.0


def channel_rgb(img: SphericalImageSet, channel, class_map: Optional[ClassMap] = None,
                prediction: Optional[np.ndarray] = None) -> np.ndarray:
    """H x W x 3 float image in [0, 1] for one channel. Invalid pixels are black."""
    channel = Channel(channel)
    class_map = class_map or default_class_map()
    if channel == Channel.REFLECTIVITY:
        return _grayscale(img.reflectivity, img.valid)
    if channel == Channel.RANGE:
        return _grayscale(img.range, img.valid)
    if channel == Channel.LABELS:
        return _class_colors(img.labels, class_map)
    if channel == Channel.NORMALS:
        if img.normals is None:
            raise MissingNormals("render the normals channel after surface_normals")
        rgb = (img.normals + 1.0) / 2.0
        rgb[~img.normals_valid] = 0.0
        return rgb
    if prediction is None:
        raise ShapeMismatch("render_png", (0,), img.shape, "prediction channel needs a prediction plane")
    if prediction.shape != img.shape:
        raise ShapeMismatch("render_png", prediction.shape, img.shape)
    return _class_colors(np.where(img.valid, prediction, class_map.ignore_id), class_map)


def render_png(img: SphericalImageSet, channel, path: str, class_map: Optional[ClassMap] = None,
               prediction: Optional[np.ndarray] = None) -> str:
    """Writes one H x W channel as a PNG, one pixel per range-image cell."""
    rgb = channel_rgb(img, channel, class_map, prediction)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    plt.imsave(path, rgb)
    return path


def render_stack(img: SphericalImageSet, path: str, class_map: Optional[ClassMap] = None,
                 prediction: Optional[np.ndarray] = None, dpi: int = 150) -> str:
    """Reflectivity, labels and normals (plus prediction if given) stacked in one figure."""
    panels = [Channel.REFLECTIVITY, Channel.LABELS]
    if img.normals is not None:
        panels.append(Channel.NORMALS)
    if prediction is not None:
        panels.append(Channel.PREDICTION)

    h, w = img.shape
    fig, axes = plt.subplots(len(panels), 1, figsize=(max(6.0, w / 64), len(panels) * max(1.2, h / 32)))
    axes = np.atleast_1d(axes)
    for ax, ch in zip(axes, panels):
        ax.imshow(channel_rgb(img, ch, class_map, prediction), interpolation='nearest', aspect='auto')
        ax.set_title(f"{img.sensor_id.value}: {ch.value}", fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    logger.info(f"figure saved to {path}")
    return path
