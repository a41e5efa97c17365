"""Spurious-sample synthesis in feature space.

Per category: pick the ID points with the largest k-th-neighbor distance
(the cluster boundary), draw Gaussian candidates around them, and keep only
candidates that are more similar to a perturbed encoding of the category's
perceptual context than to the original encoding. Accepted candidates are
constants for training; no gradient ever flows back through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ZERO_NORM_EPS, LabeledFeatureSet, normalize_rows
from .encoder import Perturbation, PerturbKind, encode, perturb_context, sample_perturbation
from .errors import (
    DimensionMismatchError,
    InvalidSpecError,
    TooFewPointsError,
)
from .state import ModelState


@dataclass(frozen=True)
class SynthesisConfig:
    """Sampling hyperparameters; k is clamped to n-1 for small categories.

    perturb_kinds restricts which one-word perturbations guide the filter
    (None means uniform over all three). Under the mean-pool encoder, swaps
    produce the largest, most directional feature deviations.
    """

    k: int = 20
    boundary_fraction: float = 0.05
    sample_sigma: float = 0.1
    candidates_per_boundary: int = 10
    max_accepted_per_category: int = 64
    rounds: int = 1  # sample->filter passes per call
    perturb_kinds: tuple[PerturbKind, ...] | None = None
    noise_sigma: float = 0.02  # scale of noise-kind word replacements

    def validate(self) -> None:
        if self.k < 1:
            raise InvalidSpecError("k must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be >= 0")
        if not 0 < self.boundary_fraction <= 1:
            raise InvalidSpecError("boundary_fraction must lie in (0, 1]")
        if not self.sample_sigma > 0:
            raise InvalidSpecError("sample_sigma must be positive")
        if self.candidates_per_boundary < 1:
            raise InvalidSpecError("candidates_per_boundary must be >= 1")
        if self.max_accepted_per_category < 1:
            raise InvalidSpecError("max_accepted_per_category must be >= 1")
        if self.rounds < 1:
            raise InvalidSpecError("rounds must be >= 1")
        if self.perturb_kinds is not None and len(self.perturb_kinds) == 0:
            raise InvalidSpecError("perturb_kinds must be None or non-empty")


def knn_distances(points: np.ndarray, k: int) -> np.ndarray:
    """Euclidean distance from each point to its k-th nearest other point.

    k is clamped to n-1; raises TooFewPointsError when fewer than 2 points.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DimensionMismatchError(f"points must be (n, d), got {pts.shape}")
    n = pts.shape[0]
    if n < 2:
        raise TooFewPointsError(f"k-NN distances need >= 2 points, got {n}")
    if k < 1:
        raise InvalidSpecError("k must be >= 1")
    k = min(k, n - 1)
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.clip(d2, 0.0, None, out=d2)
    np.fill_diagonal(d2, np.inf)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return np.sqrt(kth)


def sample_candidates(
    points: np.ndarray,
    distances: np.ndarray,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian candidates around the boundary points, normalized to the sphere.

    Boundary points are the ceil(boundary_fraction * n) points with the largest
    k-NN distance (ties broken by original index). A candidate that lands on
    the origin is redrawn once, then rejected with ZeroVectorError.
    """
    cfg.validate()
    pts = np.asarray(points, dtype=np.float64)
    dist = np.asarray(distances, dtype=np.float64)
    if pts.ndim != 2 or dist.shape != (pts.shape[0],):
        raise DimensionMismatchError(
            f"points {pts.shape} and distances {dist.shape} do not line up"
        )
    n, d = pts.shape
    num_boundary = min(n, math.ceil(cfg.boundary_fraction * n))
    order = np.argsort(-dist, kind="stable")[:num_boundary]
    sources = np.repeat(pts[order], cfg.candidates_per_boundary, axis=0)
    raw = sources + cfg.sample_sigma * rng.standard_normal(sources.shape)
    norms = np.linalg.norm(raw, axis=1)
    degenerate = norms < ZERO_NORM_EPS
    if np.any(degenerate):
        raw[degenerate] = sources[degenerate] + cfg.sample_sigma * rng.standard_normal(
            (int(degenerate.sum()), d)
        )
    return normalize_rows(raw)


def guide_filter(
    candidates: np.ndarray,
    original_feature: np.ndarray,
    perturbed_feature: np.ndarray,
) -> np.ndarray:
    """Keep candidates strictly more similar to the perturbed text feature
    than to the original one; input order is preserved."""
    cands = np.asarray(candidates, dtype=np.float64)
    orig = np.asarray(original_feature, dtype=np.float64)
    pert = np.asarray(perturbed_feature, dtype=np.float64)
    if cands.ndim != 2:
        raise DimensionMismatchError(f"candidates must be (n, d), got {cands.shape}")
    if orig.shape != (cands.shape[1],) or pert.shape != (cands.shape[1],):
        raise DimensionMismatchError(
            f"feature shapes {orig.shape}/{pert.shape} do not match candidate dim {cands.shape[1]}"
        )
    keep = cands @ pert > cands @ orig
    return np.asarray(candidates, dtype=np.float32)[keep]


def synthesize_spurious(
    state: ModelState,
    category: int,
    features: np.ndarray,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    distances: np.ndarray | None = None,
    perturbation: Perturbation | None = None,
) -> LabeledFeatureSet:
    """Full pipeline for one category: boundary selection, candidate sampling,
    perturbation-guided filtering, truncation to max_accepted_per_category.

    `features` are the category's cached ID rows (>= 2 required). `distances`
    may carry a precomputed knn_distances(features, cfg.k) result since the ID
    features never change during a task. An empty result means the category is
    skipped this iteration; it is not an error.
    """
    cfg.validate()
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise TooFewPointsError(
            f"category {category} has {0 if feats.ndim != 2 else feats.shape[0]} cached features, need >= 2"
        )
    if feats.shape[1] != state.dim:
        raise DimensionMismatchError(
            f"features dim {feats.shape[1]} != model dim {state.dim}"
        )
    if distances is None:
        distances = knn_distances(feats, cfg.k)

    ctx = state.contexts[category]
    original = state.perceptual_cache[category]
    accepted: list[np.ndarray] = []
    total = 0
    for _ in range(cfg.rounds):
        candidates = sample_candidates(feats, distances, cfg, rng)
        p = perturbation
        if p is None:
            p = sample_perturbation(
                ctx.num_words,
                state.num_categories,
                category,
                rng,
                noise_sigma=cfg.noise_sigma,
                kinds=cfg.perturb_kinds,
            )
        perturbed_words = perturb_context(ctx, p, state.contexts, state.mask_embedding, rng)
        perturbed = encode(state.encoder, perturbed_words, ctx.class_embedding)
        kept = guide_filter(candidates, original, perturbed)
        if kept.shape[0]:
            assert np.all(
                kept.astype(np.float64) @ perturbed.astype(np.float64)
                > kept.astype(np.float64) @ original.astype(np.float64)
            )
            accepted.append(kept)
            total += kept.shape[0]
        if total >= cfg.max_accepted_per_category:
            break

    if total == 0:
        rows = np.zeros((0, state.dim), dtype=np.float32)
    else:
        rows = np.concatenate(accepted, axis=0)[: cfg.max_accepted_per_category]
        # A candidate colliding bit-for-bit with an ID row is a probability-zero
        # event; drop it anyway so syntheses are always distinct from ID data.
        collisions = (rows[:, None, :] == feats[None, :, :]).all(axis=2).any(axis=1)
        if np.any(collisions):
            rows = rows[~collisions]
    labels = np.full(rows.shape[0], category, dtype=np.int64)
    return LabeledFeatureSet(rows, labels, state.num_categories)
