"""Dense-vector primitives, labeled feature sets, seeded RNG, and the
synthetic mixture-on-sphere benchmark generator.

Features are stored as float32 unit vectors; all reductions that feed
losses or gradients happen in float64 elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidSpecError,
    LabelOutOfRangeError,
    LengthMismatchError,
    ZeroVectorError,
)

#: Label sentinel for samples outside the known category set.
UNLABELED = -1

#: Norms below this are treated as zero and refused by normalize().
ZERO_NORM_EPS = 1e-12

#: Rows whose norm is already within this of 1 are left bit-identical by
#: normalize(); keeps normalization idempotent and file round-trips exact.
UNIT_SKIP_EPS = 1e-6

# Sub-stream tags so independent parts of the pipeline never share a stream.
STREAM_GENERATOR = 10
STREAM_ENCODER = 11
STREAM_MASK = 12
STREAM_CLASS = 13
STREAM_CONTEXT = 14
STREAM_TRAIN = 15
STREAM_SYNTH = 16


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator for a 64-bit seed.

    Extra integers fork a named sub-stream: ``make_rng(s, a, b)`` is
    independent of ``make_rng(s)`` and of any other tag tuple, and the same
    (seed, tags) always yields the same draw sequence.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(int(t) & 0xFFFFFFFFFFFFFFFF for t in stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def normalize(v: np.ndarray) -> np.ndarray:
    """Project a vector onto the unit sphere (float32 result).

    Vectors already unit-norm within UNIT_SKIP_EPS are returned unchanged
    bit-for-bit, so normalize(normalize(v)) == normalize(v) exactly.

    Raises ZeroVectorError when the norm is below ZERO_NORM_EPS.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidSpecError("vector has non-finite entries")
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM_EPS:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm:.3e}")
    if abs(norm - 1.0) <= UNIT_SKIP_EPS:
        return np.asarray(v, dtype=np.float32).copy()
    return (arr / norm).astype(np.float32)


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    """Row-wise normalize, with the same already-unit skip rule as normalize()."""
    arr64 = np.asarray(mat, dtype=np.float64)
    if arr64.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-d matrix, got shape {arr64.shape}")
    if arr64.shape[0] == 0:
        return np.asarray(mat, dtype=np.float32).copy()
    if not np.all(np.isfinite(arr64)):
        raise InvalidSpecError("matrix has non-finite entries")
    norms = np.linalg.norm(arr64, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = int(np.argmax(norms < ZERO_NORM_EPS))
        raise ZeroVectorError(f"row {bad} has norm {norms[bad]:.3e}")
    out32 = np.asarray(mat, dtype=np.float32).copy()
    needs = np.abs(norms - 1.0) > UNIT_SKIP_EPS
    if np.any(needs):
        out32[needs] = (arr64[needs] / norms[needs, None]).astype(np.float32)
    return out32


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise DimensionMismatchError(f"cosine of shapes {av.shape} and {bv.shape}")
    return float(np.clip(np.dot(av, bv), -1.0, 1.0))


@dataclass(frozen=True)
class LabeledFeatureSet:
    """n unit feature rows with integer labels in [0, C) or UNLABELED."""

    features: np.ndarray  # (n, d) float32, unit rows
    labels: np.ndarray  # (n,) int64, UNLABELED for out-of-category rows
    num_categories: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if feats.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-d, got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise LengthMismatchError(
                f"{feats.shape[0]} feature rows but labels of shape {labels.shape}"
            )
        if self.num_categories < 0:
            raise InvalidSpecError("num_categories must be non-negative")
        bad = (labels != UNLABELED) & ((labels < 0) | (labels >= self.num_categories))
        if np.any(bad):
            idx = int(np.argmax(bad))
            raise LabelOutOfRangeError(
                f"label {labels[idx]} at row {idx} outside [0, {self.num_categories})"
            )
        if feats.shape[0] > 0:
            norms = np.linalg.norm(feats.astype(np.float64), axis=1)
            dev = float(np.max(np.abs(norms - 1.0)))
            if dev > 1e-3:
                raise InvalidSpecError(f"feature rows deviate from unit norm by {dev:.3e}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def of_category(self, category: int) -> np.ndarray:
        """Feature rows carrying the given label."""
        return self.features[self.labels == category]


def concat_feature_sets(sets: list[LabeledFeatureSet], renumber: bool = True) -> LabeledFeatureSet:
    """Stack feature sets; with renumber, labels of set j are offset by sum(C_i, i<j)."""
    if not sets:
        raise InvalidSpecError("nothing to concatenate")
    dim = sets[0].dim
    for s in sets:
        if s.dim != dim:
            raise DimensionMismatchError(f"set dims differ: {s.dim} != {dim}")
    feats = np.concatenate([s.features for s in sets], axis=0)
    labels = []
    offset = 0
    for s in sets:
        lab = s.labels.copy()
        if renumber:
            lab[lab != UNLABELED] += offset
        offset += s.num_categories
        labels.append(lab)
    total_c = offset if renumber else max(s.num_categories for s in sets)
    return LabeledFeatureSet(feats, np.concatenate(labels), total_c)


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry of the mixture-on-sphere benchmark.

    ID clusters are normalized Gaussian clouds around random unit mean
    directions; each OOD cluster sits at angular distance spurious_offset
    (radians) from its paired ID mean, so a small offset produces near/spurious
    outliers and a large one produces far outliers.
    """

    num_id_categories: int
    num_ood_clusters: int
    dim: int
    samples_per_cluster: int
    concentration: float = 10.0
    spurious_offset: float = 0.35

    def validate(self) -> None:
        if self.num_id_categories <= 0:
            raise InvalidSpecError("num_id_categories must be positive")
        if self.num_ood_clusters <= 0:
            raise InvalidSpecError("num_ood_clusters must be positive")
        if self.samples_per_cluster <= 0:
            raise InvalidSpecError("samples_per_cluster must be positive")
        if self.dim < 2:
            raise InvalidSpecError("dim must be at least 2")
        if not self.concentration > 0:
            raise InvalidSpecError("concentration must be positive")
        if not 0 <= self.spurious_offset < math.pi:
            raise InvalidSpecError("spurious_offset must lie in [0, pi)")


def _sample_cluster(mean: np.ndarray, count: int, concentration: float, rng: np.random.Generator) -> np.ndarray:
    # Approximate von Mises-Fisher: normalize(kappa * mean + standard Gaussian).
    noise = rng.standard_normal((count, mean.shape[0]))
    return normalize_rows(concentration * mean[None, :] + noise)


def gen_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[LabeledFeatureSet, LabeledFeatureSet]:
    """Draw the (id_set, ood_set) pair described by spec, deterministically.

    OOD cluster k is paired with ID category k mod C; its mean is the paired
    ID mean rotated by spurious_offset radians along a random tangent.
    OOD labels are UNLABELED.
    """
    spec.validate()
    c, d = spec.num_id_categories, spec.dim
    means = normalize_rows(rng.standard_normal((c, d)))

    id_rows, id_labels = [], []
    for cat in range(c):
        id_rows.append(_sample_cluster(means[cat].astype(np.float64), spec.samples_per_cluster, spec.concentration, rng))
        id_labels.append(np.full(spec.samples_per_cluster, cat, dtype=np.int64))

    ood_rows = []
    for k in range(spec.num_ood_clusters):
        mu = means[k % c].astype(np.float64)
        g = rng.standard_normal(d)
        tangent = g - np.dot(g, mu) * mu
        tnorm = np.linalg.norm(tangent)
        if tnorm < ZERO_NORM_EPS:  # probability-zero draw; take any orthogonal axis
            tangent = np.zeros(d)
            tangent[int(np.argmin(np.abs(mu)))] = 1.0
            tangent -= np.dot(tangent, mu) * mu
            tnorm = np.linalg.norm(tangent)
        tangent /= tnorm
        ood_mean = math.cos(spec.spurious_offset) * mu + math.sin(spec.spurious_offset) * tangent
        ood_rows.append(_sample_cluster(ood_mean, spec.samples_per_cluster, spec.concentration, rng))

    id_set = LabeledFeatureSet(np.concatenate(id_rows), np.concatenate(id_labels), c)
    n_ood = spec.num_ood_clusters * spec.samples_per_cluster
    ood_set = LabeledFeatureSet(
        np.concatenate(ood_rows), np.full(n_ood, UNLABELED, dtype=np.int64), c
    )
    return id_set, ood_set
