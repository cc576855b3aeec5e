"""Inference-time scores computed from raw head logits or flat-classifier logits.

Every YolOOD-family score starts from the per-head best candidate table

    best[k, n] = max over cells c of head k of sigmoid(c_obj) * sigmoid(c_cls n)

and aggregates it over heads and classes. Higher scores mean "more
in-distribution" for every method.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .constants import ConfigError, UsageError
from .diffcore import stable_sigmoid, softplus
from .gridnet import CandidateGrids

logger = logging.getLogger(__name__)

CLASS_AGGREGATORS = ("max", "sum")
HEAD_AGGREGATORS = ("max", "multiply", "sum")

_REDUCE: Dict[str, Callable[..., np.ndarray]] = {
    "max": np.max,
    "sum": np.sum,
    "multiply": np.prod,
}


class Decision(Enum):
    IN_DISTRIBUTION = "in_distribution"
    OUT_OF_DISTRIBUTION = "out_of_distribution"


@dataclass(frozen=True)
class AggregationChoice:
    class_agg: str
    head_agg: str

    def __post_init__(self) -> None:
        if self.class_agg not in CLASS_AGGREGATORS:
            raise ConfigError(f"Unknown class aggregator {self.class_agg!r}, expected one of {CLASS_AGGREGATORS}")
        if self.head_agg not in HEAD_AGGREGATORS:
            raise ConfigError(f"Unknown head aggregator {self.head_agg!r}, expected one of {HEAD_AGGREGATORS}")

    @property
    def method_name(self) -> str:
        return f"yolood_agg({self.class_agg},{self.head_agg})"


AGGREGATION_CHOICES = tuple(AggregationChoice(c, h) for c in CLASS_AGGREGATORS for h in HEAD_AGGREGATORS)


def _arrays(grids) -> Tuple[np.ndarray, ...]:
    if isinstance(grids, CandidateGrids):
        if grids.batched:
            raise UsageError("scores are computed per sample; pass grids.sample(b) for batched output")
        return grids.arrays()
    return tuple(np.asarray(g, dtype=np.float64) for g in grids)


def _flatten(grid: np.ndarray) -> np.ndarray:
    """[W, H, 1 + N_c] -> [W*H, 1 + N_c] candidates."""
    return grid.reshape(-1, grid.shape[-1])


def best_candidates(grids) -> np.ndarray:
    """[K, N_c] table of the best joint probability per head and class."""
    rows = []
    for grid in _arrays(grids):
        candidates = _flatten(grid)
        joint = stable_sigmoid(candidates[:, :1]) * stable_sigmoid(candidates[:, 1:])
        rows.append(joint.max(axis=0))
    return np.stack(rows)


def class_probabilities(grids) -> np.ndarray:
    """Multi-label probabilities y_n: the best joint probability over all candidates of all heads."""
    return best_candidates(grids).max(axis=0)


def score_agg(grids, choice: AggregationChoice) -> float:
    per_class = _REDUCE[choice.head_agg](best_candidates(grids), axis=0)
    return float(_REDUCE[choice.class_agg](per_class))


def yolood_score(grids) -> float:
    """Max over classes of the per-head best joint probabilities summed over heads."""
    return score_agg(grids, AggregationChoice("max", "sum"))


def score_obj_only(grids) -> float:
    return float(sum(stable_sigmoid(_flatten(grid)[:, 0]).max() for grid in _arrays(grids)))


def score_cls_only(grids) -> float:
    per_head = np.stack([stable_sigmoid(_flatten(grid)[:, 1:]).max(axis=0) for grid in _arrays(grids)])
    return float(per_head.sum(axis=0).max())


def yolood_joint_energy(grids) -> float:
    """Sum over classes and heads of -max_c E(c_obj) * E(c_cls n), with E(z) = -log(1 + e^z)."""
    total = 0.0
    for grid in _arrays(grids):
        candidates = _flatten(grid)
        energy_obj = -softplus(candidates[:, :1])
        energy_cls = -softplus(candidates[:, 1:])
        total += float(np.sum(-(energy_obj * energy_cls).max(axis=0)))
    return total


def joint_energy_flat(logits) -> float:
    return float(np.sum(softplus(logits)))


def maxlogit(logits) -> float:
    return float(np.max(logits))


def msp(logits) -> float:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return float(e.max() / e.sum())


def heatmap(grids, head_index: int) -> np.ndarray:
    """[W_k, H_k] map of sigmoid(c_obj) * max_n sigmoid(c_cls n) for head 1, 2 or 3."""
    arrays = _arrays(grids)
    if not 1 <= head_index <= len(arrays):
        raise UsageError(f"head index must be between 1 and {len(arrays)}, got {head_index}")
    grid = arrays[head_index - 1]
    return stable_sigmoid(grid[..., 0]) * stable_sigmoid(grid[..., 1:]).max(axis=-1)


def decide(score: float, tau: float) -> Decision:
    return Decision.IN_DISTRIBUTION if score >= tau else Decision.OUT_OF_DISTRIBUTION


def calibrate_tau(id_scores: Sequence[float], target_tpr: float = 0.95) -> float:
    """Largest threshold keeping at least ``target_tpr`` of ``id_scores`` at or above it."""
    scores = np.asarray(id_scores, dtype=np.float64)
    if scores.size == 0:
        raise UsageError("calibrate_tau needs at least one in-distribution score")
    if not 0.0 < target_tpr <= 1.0:
        raise UsageError(f"target TPR must lie in (0, 1], got {target_tpr}")
    n = scores.size
    k = min(n, max(1, math.ceil(target_tpr * n - 1e-9)))
    return float(np.sort(scores)[::-1][k - 1])


# name -> (family, scorer); yolood scorers take grids, flat scorers take logits
METHODS: Dict[str, Tuple[str, Callable]] = {
    "yolood": ("yolood", yolood_score),
    "yolood_obj": ("yolood", score_obj_only),
    "yolood_cls": ("yolood", score_cls_only),
    **{choice.method_name: ("yolood", lambda g, c=choice: score_agg(g, c)) for choice in AGGREGATION_CHOICES},
    "yolood_joint_energy": ("yolood", yolood_joint_energy),
    "flat_maxlogit": ("flat", maxlogit),
    "flat_msp": ("flat", msp),
    "flat_joint_energy": ("flat", joint_energy_flat),
}

ABLATION_METHODS = tuple(c.method_name for c in AGGREGATION_CHOICES) + ("yolood_obj", "yolood_cls",
                                                                        "yolood_joint_energy")

_AGG_PATTERN = re.compile(r"^yolood_agg\(\s*(\w+)\s*,\s*(\w+)\s*\)$")


def parse_method(name: str) -> str:
    """Canonical registry name for ``name``; aggregator spellings may carry spaces."""
    name = name.strip()
    match = _AGG_PATTERN.match(name)
    if match:
        return AggregationChoice(match.group(1), match.group(2)).method_name
    if name not in METHODS:
        raise ConfigError(f"Unknown scoring method {name!r}, expected one of {sorted(METHODS)}")
    return name


def method_family(name: str) -> str:
    return METHODS[parse_method(name)][0]


def score_method(name: str, grids=None, logits=None) -> float:
    family, scorer = METHODS[parse_method(name)]
    source = grids if family == "yolood" else logits
    if source is None:
        raise UsageError(f"method {name} needs {'candidate grids' if family == 'yolood' else 'flat logits'}")
    return scorer(source)


@dataclass(frozen=True)
class ScoredSample:
    class_probs: np.ndarray
    ood_scores: Dict[str, float] = field(default_factory=dict)


def score_sample(methods: Sequence[str], grids=None, logits: Optional[np.ndarray] = None) -> ScoredSample:
    """Class probabilities plus every requested OOD score for one sample."""
    if grids is not None:
        probs = class_probabilities(grids)
    elif logits is not None:
        probs = stable_sigmoid(logits)
    else:
        raise UsageError("score_sample needs grids or logits")
    return ScoredSample(class_probs=probs,
                        ood_scores={parse_method(m): score_method(m, grids=grids, logits=logits) for m in methods})
