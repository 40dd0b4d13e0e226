import glob
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from tqdm import tqdm

from src.exceptions import DivergenceDetected, EmptyScan, InvalidConfig
from src.layer3.autograd import Tensor
from src.layer3.objectives import LossConfig, combined_loss
from src.layer3.segnet import SegModel, save_checkpoint
from src.layer4.dataset import ScanDataset

logger = logging.getLogger("Trainer")

LOSS_CURVE_FILE = "loss_curve.yaml"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 30
    step_period: Optional[int] = None      # None -> a third of the epochs
    step_factor: float = 0.5
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    mix_sensors: bool = True
    checkpoint_dir: Optional[str] = None
    keep_checkpoints: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        # 0 freezes the parameters
        if not self.learning_rate >= 0:
            raise InvalidConfig(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.step_period is not None and self.step_period < 1:
            raise InvalidConfig(f"scheduler step_period must be >= 1, got {self.step_period}")
        if not 0.0 < self.step_factor <= 1.0:
            raise InvalidConfig(f"scheduler step_factor must lie in (0, 1], got {self.step_factor}")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0) or self.adam_eps <= 0:
            raise InvalidConfig("adam betas must lie in [0, 1) and adam_eps must be positive")
        if self.keep_checkpoints < 1:
            raise InvalidConfig("keep_checkpoints must be >= 1")
        object.__setattr__(self, "adam_betas", (float(b1), float(b2)))

    @property
    def scheduler_period(self) -> int:
        return self.step_period or max(1, self.epochs // 3)


def train_config_from_config(config: dict, **overrides) -> TrainConfig:
    tr = config.get('training', {})
    sched = tr.get('scheduler', {}) or {}
    fields = dict(
        batch_size=int(tr.get('batch_size', 8)),
        learning_rate=float(tr.get('learning_rate', 1e-3)),
        epochs=int(tr.get('epochs', 30)),
        step_period=sched.get('step_period'),
        step_factor=float(sched.get('step_factor', 0.5)),
        adam_betas=tuple(tr.get('adam_betas', (0.9, 0.999))),
        adam_eps=float(tr.get('adam_eps', 1e-8)),
        seed=int(tr.get('seed', 0)),
        mix_sensors=bool(tr.get('mix_sensors', True)),
        checkpoint_dir=tr.get('checkpoint_dir'),
        keep_checkpoints=int(tr.get('keep_checkpoints', 2)),
    )
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**fields)


class Adam:
    """Adam with bias-corrected first and second moment estimates."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


class StepScheduler:
    """Multiplies the optimizer rate by `factor` every `period` epochs."""

    def __init__(self, optimizer: Adam, period: int, factor: float = 0.5):
        self.optimizer = optimizer
        self.period = int(period)
        self.factor = float(factor)
        self.base_lr = optimizer.lr
        self.epoch = 0

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.period)

    def step(self) -> float:
        self.epoch += 1
        self.optimizer.lr = self.lr_at(self.epoch)
        return self.optimizer.lr


@dataclass
class TrainResult:
    model: SegModel
    loss_curve: List[float]
    checkpoints: List[str] = field(default_factory=list)
    stats: Dict[str, object] = field(default_factory=dict)


class Trainer:
    """
    Mini-batch training over a cached ScanDataset.

    With `mix_sensors`, every batch slot picks a sensor uniformly and then a scan
    of that sensor's pool uniformly; otherwise an epoch is a shuffled pass. Both
    draws come from one generator seeded with `TrainConfig.seed`.
    """

    def __init__(self, model: SegModel, dataset: ScanDataset, train_cfg: TrainConfig, loss_cfg: LossConfig):
        if len(dataset) == 0:
            raise EmptyScan("training set is empty")
        self.model = model
        self.dataset = dataset
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.optimizer = Adam(model.parameters(), train_cfg.learning_rate, train_cfg.adam_betas, train_cfg.adam_eps)
        self.scheduler = StepScheduler(self.optimizer, train_cfg.scheduler_period, train_cfg.step_factor)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.batches_per_epoch = math.ceil(len(dataset) / train_cfg.batch_size)

    def epoch_batches(self) -> List[np.ndarray]:
        n, bs = len(self.dataset), self.cfg.batch_size
        pools = self.dataset.sensor_pools()
        if self.cfg.mix_sensors and len(pools) > 1:
            sensors = sorted(pools, key=lambda s: s.value)
            batches = []
            for _ in range(self.batches_per_epoch):
                picks = self.rng.integers(len(sensors), size=bs)
                batches.append(np.array([pools[sensors[k]][self.rng.integers(len(pools[sensors[k]]))] for k in picks]))
            return batches
        order = self.rng.permutation(n)
        return [order[i:i + bs] for i in range(0, n, bs)]

    def train_step(self, indices: np.ndarray, batch_id: int) -> float:
        inputs, geometry, labels = self.dataset.batch(indices)
        self.model.zero_grad()
        logits = self.model.forward_batch(Tensor(inputs), Tensor(geometry))
        loss = combined_loss(logits, labels, self.loss_cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceDetected(batch_id, value)
        loss.backward()
        self.optimizer.step()
        return value

    def _save(self, epoch: int, mean_loss: float, curve: List[float]) -> Optional[str]:
        out_dir = self.cfg.checkpoint_dir
        if not out_dir:
            return None
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt")
        save_checkpoint(self.model, path, extra={"epoch": epoch, "loss": mean_loss, "seed": self.cfg.seed})
        for old in sorted(glob.glob(os.path.join(out_dir, "epoch_*.ckpt")))[:-self.cfg.keep_checkpoints]:
            os.remove(old)
        with open(os.path.join(out_dir, LOSS_CURVE_FILE), 'w') as f:
            yaml.safe_dump({"epochs": len(curve), "loss": [float(v) for v in curve]}, f, sort_keys=False)
        return path

    def run(self, progress: bool = True) -> TrainResult:
        curve, checkpoints = [], []
        batch_id = 0
        logger.info(f"training {self.model.param_count} parameters on {len(self.dataset)} scans: "
                    f"{self.cfg.epochs} epochs x {self.batches_per_epoch} batches of {self.cfg.batch_size}")
        for epoch in range(1, self.cfg.epochs + 1):
            losses = []
            bar = tqdm(self.epoch_batches(), desc=f"Epoch {epoch}/{self.cfg.epochs}", disable=not progress, leave=False)
            for indices in bar:
                losses.append(self.train_step(indices, batch_id))
                batch_id += 1
                bar.set_postfix(loss=f"{losses[-1]:.4f}")
            curve.append(float(np.mean(losses)))
            lr = self.optimizer.lr
            self.scheduler.step()
            path = self._save(epoch, curve[-1], curve)
            if path:
                checkpoints.append(path)
            logger.info(f"epoch {epoch}: mean loss {curve[-1]:.5f} (lr {lr:.2e})")
        kept = [p for p in checkpoints if os.path.exists(p)]
        return TrainResult(model=self.model, loss_curve=curve, checkpoints=kept,
                           stats={"batches": batch_id, "final_lr": self.optimizer.lr})


def train(model: SegModel, dataset: ScanDataset, train_cfg: TrainConfig, loss_cfg: LossConfig,
          progress: bool = False) -> TrainResult:
    """Trains `model` in place and returns it with the per-epoch mean loss curve."""
    return Trainer(model, dataset, train_cfg, loss_cfg).run(progress=progress)
