import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src.exceptions import InvalidConfig, ShapeMismatch
from src.layer3.autograd import (Tensor, div, log_softmax, mean, mul, reshape, softmax, sub,
                                 tensor_sum, transpose)

logger = logging.getLogger("Objectives")


@dataclass(frozen=True)
class LossConfig:
    """
    combined = ce_weight * CE + tversky_weight * (1 - mean_c TI_c)

    TI_c = (TP_c + smooth) / (TP_c + alpha * FP_c + beta * FN_c + smooth) on soft counts.
    """
    ce_weight: float = 1.0
    tversky_weight: float = 1.0
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    smooth: float = 1.0
    class_weights: Optional[Tuple[float, ...]] = None
    ignore_id: int = 255

    def __post_init__(self):
        if self.ce_weight < 0 or self.tversky_weight < 0 or self.ce_weight + self.tversky_weight <= 0:
            raise InvalidConfig("loss weights must be non-negative with a positive sum")
        if not (0.0 <= self.tversky_alpha <= 1.0 and 0.0 <= self.tversky_beta <= 1.0):
            raise InvalidConfig("tversky_alpha and tversky_beta must lie in [0, 1]")
        if self.smooth < 0:
            raise InvalidConfig("smooth must be non-negative")
        if self.class_weights is not None:
            weights = tuple(float(w) for w in self.class_weights)
            if any(w < 0 for w in weights):
                raise InvalidConfig("class weights must be non-negative")
            object.__setattr__(self, "class_weights", weights)


def class_weights_from_frequency(counts: Sequence[int], mode: str = "uniform") -> np.ndarray:
    """`uniform` -> all ones; `inverse_log` -> 1 / ln(1.02 + f_c) with f_c the class frequency."""
    counts = np.asarray(counts, dtype=np.float64)
    if mode == "uniform":
        return np.ones_like(counts)
    if mode == "inverse_log":
        total = counts.sum()
        freq = counts / total if total > 0 else np.zeros_like(counts)
        return 1.0 / np.log(1.02 + freq)
    raise InvalidConfig(f"unknown class weight mode '{mode}'")


def loss_config_from_config(config: dict, class_counts: Optional[Sequence[int]] = None) -> LossConfig:
    loss = config.get('loss', {})
    mode = loss.get('class_weight_mode', 'uniform')
    weights = None
    if mode != "uniform":
        if class_counts is None:
            raise InvalidConfig(f"class_weight_mode '{mode}' needs class statistics of the training set")
        weights = tuple(class_weights_from_frequency(class_counts, mode).tolist())
    return LossConfig(
        ce_weight=float(loss.get('ce_weight', 1.0)),
        tversky_weight=float(loss.get('tversky_weight', 1.0)),
        tversky_alpha=float(loss.get('tversky_alpha', 0.3)),
        tversky_beta=float(loss.get('tversky_beta', 0.7)),
        smooth=float(loss.get('smooth', 1.0)),
        class_weights=weights,
        ignore_id=int(config.get('dataset', {}).get('ignore_id', 255)),
    )


def _as_nchw(scores: Tensor, target: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """Accepts (H, W, C) with (H, W) targets or (N, C, H, W) with (N, H, W) targets."""
    target = np.asarray(target)
    if scores.ndim == 3:
        h, w, c = scores.shape
        scores = reshape(transpose(scores, (2, 0, 1)), (1, c, h, w))
        target = target[None]
    if scores.ndim != 4 or target.shape != (scores.shape[0],) + scores.shape[2:]:
        raise ShapeMismatch("loss", scores.shape, target.shape, "targets must match the spatial shape")
    return scores, target


def _one_hot(target: np.ndarray, num_classes: int, ignore_id: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    valid = target != ignore_id
    if np.any(valid & ((target < 0) | (target >= num_classes))):
        raise ShapeMismatch("loss", target.shape, detail=f"targets must be < {num_classes} or the ignore id")
    safe = np.where(valid, target, 0)
    onehot = (np.arange(num_classes)[None, :, None, None] == safe[:, None]) & valid[:, None]
    return onehot.astype(dtype), valid


def cross_entropy(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean over non-ignored pixels of -w_c * log softmax(logits)[c]."""
    logits, target = _as_nchw(logits, target)
    c = logits.shape[1]
    onehot, valid = _one_hot(target, c, cfg.ignore_id, logits.dtype)
    n_valid = int(valid.sum())
    logp = log_softmax(logits, axis=1)
    if n_valid == 0:
        return mul(tensor_sum(logp), 0.0)
    if cfg.class_weights is not None:
        if len(cfg.class_weights) != c:
            raise ShapeMismatch("cross_entropy", (len(cfg.class_weights),), (c,), "one weight per class")
        onehot = onehot * np.asarray(cfg.class_weights, dtype=logits.dtype)[None, :, None, None]
    picked = tensor_sum(mul(logp, Tensor(onehot, dtype=logits.dtype)))
    return mul(picked, -1.0 / n_valid)


def tversky(probs: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """1 - mean_c TI_c over soft counts of the non-ignored pixels, batch-global."""
    probs, target = _as_nchw(probs, target)
    c = probs.shape[1]
    onehot, valid = _one_hot(target, c, cfg.ignore_id, probs.dtype)
    mask = np.broadcast_to(valid[:, None], probs.shape).astype(probs.dtype)
    axes = (0, 2, 3)

    tp = tensor_sum(mul(probs, Tensor(onehot, dtype=probs.dtype)), axis=axes)
    fp = tensor_sum(mul(probs, Tensor(mask - onehot, dtype=probs.dtype)), axis=axes)
    fn = sub(Tensor(onehot.sum(axis=axes), dtype=probs.dtype), tp)

    numerator = tp + cfg.smooth
    denominator = tp + mul(fp, cfg.tversky_alpha) + mul(fn, cfg.tversky_beta) + cfg.smooth
    return sub(1.0, mean(div(numerator, denominator)))


def combined_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    logits, target = _as_nchw(logits, target)
    total = None
    if cfg.ce_weight > 0:
        total = mul(cross_entropy(logits, target, cfg), cfg.ce_weight)
    if cfg.tversky_weight > 0:
        term = mul(tversky(softmax(logits, axis=1), target, cfg), cfg.tversky_weight)
        total = term if total is None else total + term
    return total
