"""Ground-truth objectness and class grids built from scene annotations.

For an object whose center falls in cell (x_c, y_c) of a W_k x H_k grid, the
responsible cells of head k are all integer (i, j) with

    x_c - p_k * W_r / 2 <= i <= x_c + p_k * W_r / 2
    y_c - p_k * H_r / 2 <= j <= y_c + p_k * H_r / 2

where (W_r, H_r) is the object's size measured in cells, clipped to the grid.
"""
import math
from dataclasses import dataclass
from typing import Set, Tuple

import numpy as np

from .settings import NetworkConfig, ResponsibilityConfig
from .synthscenes import Scene, SceneObject


@dataclass(frozen=True)
class TargetGrids:
    """Per head: obj [W,H] and cls [W,H,N_c] binary grids (optionally with a leading batch axis)."""
    obj: Tuple[np.ndarray, ...]
    cls: Tuple[np.ndarray, ...]

    @property
    def num_positives(self) -> int:
        return int(sum(o.sum() for o in self.obj))


def center_cell(obj: SceneObject, width: int, height: int) -> Tuple[int, int]:
    cx, cy = obj.center
    x = min(max(math.floor(cx * width), 0), width - 1)
    y = min(max(math.floor(cy * height), 0), height - 1)
    return x, y


def _span(center: int, margin: float, extent: int) -> range:
    low = max(math.ceil(center - margin), 0)
    high = min(math.floor(center + margin), extent - 1)
    return range(low, high + 1)


def responsible_cells(obj: SceneObject, width: int, height: int, p: float) -> Set[Tuple[int, int]]:
    x_center, y_center = center_cell(obj, width, height)
    w_r = obj.size[0] * width
    h_r = obj.size[1] * height
    columns = _span(x_center, p * w_r / 2, width)
    rows = _span(y_center, p * h_r / 2, height)
    return {(i, j) for i in columns for j in rows}


def build_targets(scene: Scene, config: NetworkConfig, responsibility: ResponsibilityConfig) -> TargetGrids:
    """Union of every annotated object's responsible cells; OOD objects contribute nothing."""
    obj_grids, cls_grids = [], []
    for grid, p in zip(config.grid_sizes, responsibility.p):
        obj_t = np.zeros((grid, grid))
        cls_t = np.zeros((grid, grid, config.num_classes))
        for obj in scene.objects:
            if obj.class_id < 0:
                continue
            for i, j in responsible_cells(obj, grid, grid, p):
                obj_t[i, j] = 1.0
                cls_t[i, j, obj.class_id] = 1.0
        obj_grids.append(obj_t)
        cls_grids.append(cls_t)
    return TargetGrids(tuple(obj_grids), tuple(cls_grids))


def stack_targets(targets) -> TargetGrids:
    """Stack per-scene targets along a new leading batch axis."""
    targets = list(targets)
    heads = range(len(targets[0].obj))
    return TargetGrids(
        tuple(np.stack([t.obj[k] for t in targets]) for k in heads),
        tuple(np.stack([t.cls[k] for t in targets]) for k in heads),
    )
