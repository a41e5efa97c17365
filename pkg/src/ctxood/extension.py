"""Category-extensible merging of independently trained models.

Models trained on disjoint tasks under one shared frozen encoder merge by
concatenating their contexts and cached text features; category i of model j
becomes global category offset_j + i. Per-category similarities and
regularizers are untouched by merging, so merged inference only changes the
argmax/softmax aggregation across the larger category set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabeledFeatureSet, concat_feature_sets
from .errors import EncoderMismatchError, InvalidSpecError, ShapeMismatchError
from .inference import DEFAULT_TAU
from .metrics import EvaluationResult, evaluate
from .state import ModelState


def merge_models(models: list[ModelState]) -> ModelState:
    """Concatenate contexts and caches of models sharing one frozen encoder.

    Requires bit-equal encoder weights and mask embeddings and identical
    (d_w, d, m, N_s). The result shares no mutable arrays with its inputs;
    velocity buffers start at zero.
    """
    if not models:
        raise InvalidSpecError("nothing to merge")
    first = models[0]
    for m in models[1:]:
        if m.encoder.kind != first.encoder.kind:
            raise EncoderMismatchError("encoder kinds differ")
        if m.encoder.weights.shape != first.encoder.weights.shape:
            raise ShapeMismatchError(
                f"encoder shapes differ: {m.encoder.weights.shape} vs {first.encoder.weights.shape}"
            )
        if not np.array_equal(m.encoder.weights, first.encoder.weights):
            raise EncoderMismatchError("encoder weights are not bit-equal")
        if not np.array_equal(m.mask_embedding, first.mask_embedding):
            raise EncoderMismatchError("mask embeddings are not bit-equal")
        if m.context_len != first.context_len or m.num_spurious != first.num_spurious:
            raise ShapeMismatchError(
                "context geometry differs: "
                f"(m={m.context_len}, N_s={m.num_spurious}) vs "
                f"(m={first.context_len}, N_s={first.num_spurious})"
            )

    contexts = []
    offset = 0
    for model in models:
        for ctx in model.contexts:
            copied = ctx.copy()
            copied.category_id = offset + ctx.category_id
            contexts.append(copied)
        offset += model.num_categories

    merged = ModelState(
        encoder=first.encoder,
        mask_embedding=first.mask_embedding.copy(),
        contexts=contexts,
        perceptual_cache=np.concatenate([m.perceptual_cache for m in models]).copy(),
        spurious_cache=np.concatenate([m.spurious_cache for m in models]).copy(),
        perceptual_velocity=np.zeros((offset, first.context_len, first.word_dim), dtype=np.float32),
        spurious_velocity=np.zeros(
            (offset, first.num_spurious, first.context_len, first.word_dim), dtype=np.float32
        ),
    )
    return merged


@dataclass(frozen=True)
class CurvePoint:
    cumulative_categories: int
    accuracy: float
    fpr95: float
    auroc: float


def incremental_eval(
    models: list[ModelState],
    id_sets: list[LabeledFeatureSet],
    ood_sets: list[tuple[str, LabeledFeatureSet]],
    tpr: float = 0.95,
    tau: float = DEFAULT_TAU,
) -> list[CurvePoint]:
    """Evaluate merge(models[:j]) on the relabeled union of id_sets[:j] for
    j = 1..J, against the fixed OOD sets; fpr/auroc are the per-set averages."""
    if len(models) != len(id_sets) or not models:
        raise InvalidSpecError("need one id_set per model")
    points = []
    for j in range(1, len(models) + 1):
        merged = merge_models(models[:j])
        union = concat_feature_sets(id_sets[:j], renumber=True)
        result: EvaluationResult = evaluate(merged, union, ood_sets, tpr=tpr, tau=tau)
        points.append(
            CurvePoint(
                cumulative_categories=merged.num_categories,
                accuracy=result.id_accuracy,
                fpr95=result.average.fpr_at_tpr,
                auroc=result.average.auroc,
            )
        )
    return points
