"""Detection metrics over in-distribution / OOD score lists.

In-distribution samples are the positive class throughout.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import average_precision_score, roc_auc_score

from .constants import DimensionError, UsageError
from .oodscore import calibrate_tau

logger = logging.getLogger(__name__)

METRIC_NAMES = ("fpr95", "auroc", "aupr")


@dataclass(frozen=True)
class MetricReport:
    method: str
    fpr95: float
    auroc: float
    aupr: float
    n_id: int
    n_ood: int
    tau: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)

    def metrics(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _prepare(id_scores: Sequence[float], ood_scores: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    id_scores = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise UsageError(f"metrics need nonempty score lists (got {id_scores.size} ID, {ood_scores.size} OOD)")
    return id_scores, ood_scores


def _labelled(id_scores: np.ndarray, ood_scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    y_true = np.concatenate([np.ones(id_scores.size), np.zeros(ood_scores.size)])
    return y_true, np.concatenate([id_scores, ood_scores])


def fpr_at_tpr(id_scores: Sequence[float], ood_scores: Sequence[float], target_tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or above the threshold that keeps ``target_tpr`` of the ID scores."""
    id_scores, ood_scores = _prepare(id_scores, ood_scores)
    tau = calibrate_tau(id_scores, target_tpr)
    return float(np.count_nonzero(ood_scores >= tau) / ood_scores.size)


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    id_scores, ood_scores = _prepare(id_scores, ood_scores)
    return float(roc_auc_score(*_labelled(id_scores, ood_scores)))


def aupr(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Step-sum average precision with thresholds at the distinct scores."""
    id_scores, ood_scores = _prepare(id_scores, ood_scores)
    return float(average_precision_score(*_labelled(id_scores, ood_scores)))


def per_class_average_precision(probs: np.ndarray, labels: np.ndarray) -> Dict[int, float]:
    """Average precision per class; classes without a positive sample are left out."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise DimensionError(f"probabilities {probs.shape} and labels {labels.shape} must be equal 2-d shapes")
    out = {}
    for n in range(probs.shape[1]):
        if not np.any(labels[:, n] > 0):
            logger.warning(f"Class {n} has no positive sample and is excluded from macro-AP")
            continue
        out[n] = float(average_precision_score(labels[:, n] > 0, probs[:, n]))
    return out


def macro_ap(probs: np.ndarray, labels: np.ndarray) -> float:
    per_class = per_class_average_precision(probs, labels)
    if not per_class:
        raise UsageError("macro-AP is undefined: no class has a positive sample")
    return float(np.mean(list(per_class.values())))


def evaluate_scores(method: str, id_scores: Sequence[float], ood_scores: Sequence[float],
                    target_tpr: float = 0.95) -> MetricReport:
    id_arr, ood_arr = _prepare(id_scores, ood_scores)
    report = MetricReport(
        method=method,
        fpr95=fpr_at_tpr(id_arr, ood_arr, target_tpr),
        auroc=auroc(id_arr, ood_arr),
        aupr=aupr(id_arr, ood_arr),
        n_id=int(id_arr.size),
        n_ood=int(ood_arr.size),
        tau=calibrate_tau(id_arr, target_tpr),
    )
    logger.debug(f"{method}: FPR95={report.fpr95:.4f} AUROC={report.auroc:.4f} AUPR={report.aupr:.4f}")
    return report
