"""Training losses: objectness BCE over every candidate plus class BCE on responsible cells."""
import logging
from dataclasses import dataclass

import numpy as np

from .assign import TargetGrids
from .constants import DimensionError
from .diffcore import Tensor, add, bce, scale
from .gridnet import CandidateGrids

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    obj: Tensor
    cls: Tensor
    total: Tensor

    @property
    def obj_loss(self) -> float:
        return self.obj.item()

    @property
    def cls_loss(self) -> float:
        return self.cls.item()

    @property
    def total_loss(self) -> float:
        return self.total.item()

    def as_dict(self) -> dict:
        return {"obj": self.obj_loss, "cls": self.cls_loss, "total": self.total_loss}


def _check(grids: CandidateGrids, targets: TargetGrids) -> None:
    if len(grids.grids) != len(targets.obj) or len(grids.grids) != len(targets.cls):
        raise DimensionError(f"{len(grids.grids)} heads but {len(targets.obj)} target grids")
    for k, (grid, obj_t, cls_t) in enumerate(zip(grids.grids, targets.obj, targets.cls)):
        if grid.shape[:-1] != obj_t.shape or grid.shape[:-1] + (grid.shape[-1] - 1,) != cls_t.shape:
            raise DimensionError(f"head {k}: grid {grid.shape} does not match targets "
                                 f"obj {obj_t.shape}, cls {cls_t.shape}")


def _batch_factor(grids: CandidateGrids) -> float:
    return 1.0 / grids.grids[0].shape[0] if grids.batched else 1.0


def objectness_loss(grids: CandidateGrids, targets: TargetGrids) -> Tensor:
    """Sum of BCE(objectness logit, target) over all candidates of all heads."""
    _check(grids, targets)
    terms = [bce(grid[..., 0], obj_t) for grid, obj_t in zip(grids.grids, targets.obj)]
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, _batch_factor(grids))


def class_loss(grids: CandidateGrids, targets: TargetGrids) -> Tensor:
    """Sum over candidates and classes of target-objectness * BCE(class logit, class target)."""
    _check(grids, targets)
    terms = [bce(grid[..., 1:], cls_t, weight=obj_t[..., None])
             for grid, obj_t, cls_t in zip(grids.grids, targets.obj, targets.cls)]
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, _batch_factor(grids))


def total_loss(grids: CandidateGrids, targets: TargetGrids) -> LossBreakdown:
    obj = objectness_loss(grids, targets)
    cls = class_loss(grids, targets)
    return LossBreakdown(obj=obj, cls=cls, total=add(obj, cls))


def flat_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Multi-label BCE of the flat classifier, averaged over the batch."""
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise DimensionError(f"flat logits {logits.shape} do not match labels {labels.shape}")
    factor = 1.0 / logits.shape[0] if logits.ndim == 2 else 1.0
    return scale(bce(logits, labels), factor)
