"""Mini-batch Adam training with two learning rates and a validation-driven plateau schedule."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .assign import TargetGrids, build_targets, stack_targets
from .constants import ConfigError, NonFiniteError, TrainingDivergedError, UsageError
from .diffcore import AdamState, Graph, Tensor, adam_step, backward, stable_sigmoid, zero_grad
from .gridnet import Checkpoint, GridNet, load_checkpoint
from .objloss import flat_loss, total_loss
from .oodmetrics import macro_ap
from .oodscore import class_probabilities
from .settings import NetworkConfig, ResponsibilityConfig, TrainConfig
from .splitmix import SplitMix64
from .synthscenes import Dataset, Scene

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    obj_loss: float
    cls_loss: float
    total_loss: float
    val_macro_ap: float
    lr_backbone: float
    lr_heads: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def write(self, path: str | Path) -> None:
        """One JSON object per epoch."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in self.records:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        with open(path, "r") as f:
            return cls([EpochRecord(**json.loads(line)) for line in f if line.strip()])


class PlateauScheduler:
    """Signals a learning-rate reduction after ``patience`` epochs without a strictly better metric."""

    def __init__(self, factor: float, patience: int, best: float = -math.inf) -> None:
        self.factor = factor
        self.patience = patience
        self.best = best
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            self.reductions += 1
            return True
        return False


class Trainer:
    def __init__(self, dataset: Dataset, net_config: NetworkConfig, train_config: TrainConfig,
                 responsibility: Optional[ResponsibilityConfig] = None) -> None:
        if not dataset.train or not dataset.val:
            raise UsageError(f"training needs nonempty train and val splits "
                             f"(got {len(dataset.train)} and {len(dataset.val)})")
        self.dataset = dataset
        self.net_config = net_config
        self.config = train_config
        self.responsibility = responsibility or ResponsibilityConfig()
        self.mode = train_config.mode
        self.network = GridNet(net_config, seed=train_config.seed)
        self.backbone_state = AdamState(lr=train_config.lr_backbone)
        self.head_state = AdamState(lr=train_config.lr_heads)
        self.scheduler = PlateauScheduler(train_config.plateau_factor, train_config.plateau_patience)
        self.log = TrainLog()
        self.start_epoch = 0
        self.epoch = 0

        self._targets: List[TargetGrids] = []
        if self.mode == "yolood":
            self._targets = [build_targets(scene, net_config, self.responsibility) for scene in dataset.train]
        self._labels = np.stack([scene.labels(net_config.num_classes) for scene in dataset.train])

        if train_config.resume_from:
            self._resume(train_config.resume_from)
        self.last_good = self.checkpoint(self.start_epoch)

    def _resume(self, path: str) -> None:
        checkpoint = load_checkpoint(path)
        if checkpoint.config != self.net_config:
            raise ConfigError(f"train.resume_from: network configuration of {path} differs from network "
                              f"(checkpoint has num_classes={checkpoint.config.num_classes}, "
                              f"image_size={checkpoint.config.image_size})")
        if checkpoint.mode != self.mode:
            raise ConfigError(f"train.resume_from: {path} was trained in mode {checkpoint.mode}, not {self.mode}")
        self.network = GridNet.from_checkpoint(checkpoint)
        meta = checkpoint.metadata
        self.start_epoch = int(meta.get("epoch", 0))
        self.epoch = self.start_epoch
        self.backbone_state.lr = float(meta.get("lr_backbone", self.backbone_state.lr))
        self.head_state.lr = float(meta.get("lr_heads", self.head_state.lr))
        if meta.get("best_val_macro_ap") is not None:
            self.scheduler.best = float(meta["best_val_macro_ap"])
        logger.info(f"Resuming from {path} at epoch {self.start_epoch}")

    def checkpoint(self, epoch: int) -> Checkpoint:
        best = self.scheduler.best
        metadata = {
            "epoch": epoch,
            "seed": self.config.seed,
            "mode": self.mode,
            "p": list(self.responsibility.p),
            "best_val_macro_ap": None if math.isinf(best) else best,
            "lr_backbone": self.backbone_state.lr,
            "lr_heads": self.head_state.lr,
        }
        return Checkpoint(config=self.net_config, params=self.network.state_dict(), metadata=metadata)

    def _images(self, scenes: Sequence[Scene]) -> Tensor:
        return Tensor(np.stack([scene.image.data for scene in scenes]))

    def train_step(self, indices: Sequence[int]) -> Dict[str, float]:
        """One Adam step on the training scenes at ``indices``; returns the batch losses."""
        backbone_params = self.network.backbone_parameters()
        head_params = self.network.head_parameters(self.mode)
        zero_grad(list(backbone_params.values()) + list(head_params.values()))
        images = self._images([self.dataset.train[i] for i in indices])
        with Graph() as graph:
            if self.mode == "yolood":
                grids = self.network.forward(images)
                breakdown = total_loss(grids, stack_targets(self._targets[i] for i in indices))
                loss, losses = breakdown.total, breakdown.as_dict()
            else:
                loss = flat_loss(self.network.forward_flat(images), self._labels[list(indices)])
                losses = {"obj": 0.0, "cls": loss.item(), "total": loss.item()}
            backward(loss, graph)
        adam_step(backbone_params, None, self.backbone_state)
        adam_step(head_params, None, self.head_state)
        return losses

    def run_epoch(self, epoch: int) -> Dict[str, float]:
        """Mean batch losses over one pass of the training split in the epoch's fixed order."""
        order = SplitMix64.for_stream(self.config.seed, epoch).shuffle(list(range(len(self.dataset.train))))
        size = self.config.batch_size
        batches = [order[start:start + size] for start in range(0, len(order), size)]
        totals = {"obj": 0.0, "cls": 0.0, "total": 0.0}
        progress = tqdm(batches, desc=f"epoch {epoch + 1}", leave=False, disable=not self.config.progress)
        for step, batch in enumerate(progress):
            losses = self.train_step(batch)
            for key in totals:
                totals[key] += losses[key]
            logger.debug(f"epoch {epoch + 1} batch {step + 1}/{len(batches)}: loss {losses['total']:.6f}")
        return {key: value / len(batches) for key, value in totals.items()}

    def predict_probabilities(self, scenes: Sequence[Scene]) -> np.ndarray:
        """[len(scenes), N_c] class probabilities without recording a graph."""
        rows = []
        size = self.config.batch_size
        for start in range(0, len(scenes), size):
            images = self._images(scenes[start:start + size])
            if self.mode == "yolood":
                grids = self.network.forward(images)
                rows.extend(class_probabilities(grids.sample(b)) for b in range(images.shape[0]))
            else:
                rows.extend(stable_sigmoid(self.network.forward_flat(images).data))
        return np.stack(rows)

    def validate(self) -> float:
        labels = np.stack([scene.labels(self.net_config.num_classes) for scene in self.dataset.val])
        return macro_ap(self.predict_probabilities(self.dataset.val), labels)

    def _reduce_learning_rates(self) -> None:
        self.backbone_state.lr *= self.scheduler.factor
        self.head_state.lr *= self.scheduler.factor
        logger.info(f"Validation macro-AP plateaued; learning rates now backbone={self.backbone_state.lr:.3g} "
                    f"heads={self.head_state.lr:.3g}")

    def fit(self) -> Tuple[Checkpoint, TrainLog]:
        for epoch in range(self.start_epoch, self.config.epochs):
            lr_backbone, lr_heads = self.backbone_state.lr, self.head_state.lr
            try:
                losses = self.run_epoch(epoch)
                val_ap = self.validate()
            except NonFiniteError as e:
                logger.error(f"Training diverged in epoch {epoch + 1}: {e}")
                raise TrainingDivergedError(f"Training diverged in epoch {epoch + 1}: {e}", last_good=self.last_good)
            if self.scheduler.step(val_ap):
                self._reduce_learning_rates()
            self.epoch = epoch + 1
            self.log.append(EpochRecord(epoch=self.epoch, obj_loss=losses["obj"], cls_loss=losses["cls"],
                                        total_loss=losses["total"], val_macro_ap=val_ap,
                                        lr_backbone=lr_backbone, lr_heads=lr_heads))
            logger.info(f"Epoch {self.epoch}/{self.config.epochs}: loss {losses['total']:.4f} "
                        f"(obj {losses['obj']:.4f}, cls {losses['cls']:.4f}), val macro-AP {val_ap:.4f}")
            self.last_good = self.checkpoint(self.epoch)
        return self.last_good, self.log


def train(dataset: Dataset, net_config: NetworkConfig, train_config: TrainConfig,
          responsibility: Optional[ResponsibilityConfig] = None) -> Tuple[Checkpoint, TrainLog]:
    return Trainer(dataset, net_config, train_config, responsibility).fit()
