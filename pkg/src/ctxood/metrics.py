"""Evaluation metrics: FPR at fixed TPR, AUROC, accuracy, report assembly.

Scores follow the ID-ness convention: higher means more in-distribution.
The detection threshold is the realized ID-score quantile that keeps at
least the requested fraction of ID samples, with ties at the threshold
counted as false positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import UNLABELED, LabeledFeatureSet
from .errors import EmptySetError, InvalidSpecError, LengthMismatchError, ShapeMismatchError
from .inference import DEFAULT_TAU, score_batch
from .state import ModelState


@dataclass(frozen=True)
class MetricsReport:
    fpr_at_tpr: float
    tpr_level: float
    threshold: float
    auroc: float
    accuracy: float
    n_id: int
    n_ood: int


@dataclass(frozen=True)
class EvaluationResult:
    id_accuracy: float
    per_set: list[tuple[str, MetricsReport]]
    average: MetricsReport


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray, tpr: float = 0.95) -> tuple[float, float]:
    """(false-positive rate, threshold) at the given ID true-positive rate.

    The threshold is the ceil(tpr * n_id)-th largest ID score, so at least a
    tpr fraction of ID scores is >= threshold; OOD scores >= threshold count
    as false positives.
    """
    ids = np.asarray(id_scores, dtype=np.float64).ravel()
    oods = np.asarray(ood_scores, dtype=np.float64).ravel()
    if ids.size == 0 or oods.size == 0:
        raise EmptySetError("fpr_at_tpr needs non-empty ID and OOD scores")
    if not 0 < tpr <= 1:
        raise InvalidSpecError("tpr must lie in (0, 1]")
    # tiny slack so e.g. 0.9 * 30 (27.000000000000004 in floats) stays at 27
    k = math.ceil(tpr * ids.size - 1e-9)
    threshold = float(np.sort(ids)[ids.size - k])
    return float(np.mean(oods >= threshold)), threshold


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg = upper - (counts - 1) / 2.0
    return avg[inverse]


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability a random ID score exceeds a random OOD score, ties 1/2
    (Mann-Whitney via rank sums, O(n log n))."""
    ids = np.asarray(id_scores, dtype=np.float64).ravel()
    oods = np.asarray(ood_scores, dtype=np.float64).ravel()
    if ids.size == 0 or oods.size == 0:
        raise EmptySetError("auroc needs non-empty ID and OOD scores")
    ranks = _average_ranks(np.concatenate([ids, oods]))
    u = np.sum(ranks[: ids.size]) - ids.size * (ids.size + 1) / 2.0
    return float(u / (ids.size * oods.size))


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(predictions).ravel()
    labs = np.asarray(labels).ravel()
    if preds.size != labs.size:
        raise LengthMismatchError(f"{preds.size} predictions vs {labs.size} labels")
    if preds.size == 0:
        raise EmptySetError("accuracy needs at least one prediction")
    return float(np.mean(preds == labs))


def evaluate(
    state: ModelState,
    id_set: LabeledFeatureSet,
    ood_sets: list[tuple[str, LabeledFeatureSet]],
    tpr: float = 0.95,
    tau: float = DEFAULT_TAU,
    perceptual_only: bool = False,
) -> EvaluationResult:
    """Score all samples, compute per-OOD-set metrics and their unweighted
    average. ID accuracy ignores unlabeled ID rows (all-unlabeled -> nan)."""
    if id_set.dim != state.dim:
        raise ShapeMismatchError(f"ID set dim {id_set.dim} != model dim {state.dim}")
    if id_set.n == 0:
        raise EmptySetError("ID set is empty")
    if not ood_sets:
        raise EmptySetError("need at least one OOD set")

    id_scores_batch = score_batch(state, id_set.features, tau=tau, perceptual_only=perceptual_only)
    labeled = id_set.labels != UNLABELED
    if np.any(labeled):
        id_acc = accuracy(id_scores_batch.predicted[labeled], id_set.labels[labeled])
    else:
        id_acc = float("nan")
    # ood_score ascends with OOD-ness (-1 confident ID, -1/C uniform); the
    # detection metrics consume ID-ness scores, so negate (max softmax).
    id_g = -id_scores_batch.ood_scores

    per_set: list[tuple[str, MetricsReport]] = []
    for name, ood in ood_sets:
        if ood.dim != state.dim:
            raise ShapeMismatchError(f"OOD set '{name}' dim {ood.dim} != model dim {state.dim}")
        if ood.n == 0:
            raise EmptySetError(f"OOD set '{name}' is empty")
        ood_g = -score_batch(state, ood.features, tau=tau, perceptual_only=perceptual_only).ood_scores
        fpr, thr = fpr_at_tpr(id_g, ood_g, tpr)
        per_set.append(
            (
                name,
                MetricsReport(
                    fpr_at_tpr=fpr,
                    tpr_level=tpr,
                    threshold=thr,
                    auroc=auroc(id_g, ood_g),
                    accuracy=id_acc,
                    n_id=id_set.n,
                    n_ood=ood.n,
                ),
            )
        )

    avg = MetricsReport(
        fpr_at_tpr=float(np.mean([r.fpr_at_tpr for _, r in per_set])),
        tpr_level=tpr,
        threshold=float(np.mean([r.threshold for _, r in per_set])),
        auroc=float(np.mean([r.auroc for _, r in per_set])),
        accuracy=id_acc,
        n_id=id_set.n,
        n_ood=int(sum(r.n_ood for _, r in per_set)),
    )
    return EvaluationResult(id_accuracy=id_acc, per_set=per_set, average=avg)
