"""Frozen differentiable text encoder and context perturbation.

The reference encoder maps a word-embedding sequence plus a frozen class
embedding to a unit feature vector: mean-pool over the m+1 embeddings,
optional frozen linear map into feature space, then L2 normalization.
It is differentiable by hand, which is all prompt tuning needs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import ZERO_NORM_EPS
from .errors import (
    DimensionMismatchError,
    InvalidPositionError,
    InvalidSpecError,
    ShapeMismatchError,
    UnknownDonorError,
    ZeroVectorError,
)


class EncoderKind(enum.IntEnum):
    """Wire-stable encoder tags (serialized as a single byte)."""

    MEAN_POOL_LINEAR = 0
    IDENTITY = 1


@dataclass(frozen=True)
class EncoderParams:
    """Frozen encoder weights: a d_w x d linear map applied after mean pooling.

    For IDENTITY the map is the identity (requires word_dim == dim); the
    stored matrix is the identity so serialization is uniform.
    """

    kind: EncoderKind
    weights: np.ndarray  # (d_w, d) float32, read-only

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        if w.ndim != 2:
            raise ShapeMismatchError(f"encoder weights must be 2-d, got {w.shape}")
        if self.kind == EncoderKind.IDENTITY and w.shape[0] != w.shape[1]:
            raise ShapeMismatchError("identity encoder requires word_dim == dim")
        if self.kind == EncoderKind.MEAN_POOL_LINEAR:
            if w.shape[0] < w.shape[1]:
                raise ShapeMismatchError(
                    f"mean-pool-linear needs word_dim >= dim, got {w.shape}"
                )
            if np.linalg.matrix_rank(w.astype(np.float64)) < w.shape[1]:
                raise InvalidSpecError("encoder weights are not full column rank")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def word_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def build_mean_pool_linear(word_dim: int, dim: int, rng: np.random.Generator) -> EncoderParams:
    """Draw a frozen random full-rank linear map (entries ~ N(0, 1/word_dim))."""
    if word_dim < dim:
        raise ShapeMismatchError(f"word_dim {word_dim} must be >= dim {dim}")
    w = (rng.standard_normal((word_dim, dim)) / np.sqrt(word_dim)).astype(np.float32)
    return EncoderParams(EncoderKind.MEAN_POOL_LINEAR, w)


def build_identity(dim: int) -> EncoderParams:
    return EncoderParams(EncoderKind.IDENTITY, np.eye(dim, dtype=np.float32))


@dataclass
class ContextPair:
    """Per-category learnable word sequences plus the frozen class embedding.

    perceptual: (m, d_w) words describing the category itself.
    spurious:   (N_s, m, d_w) words describing its similar-but-not neighbors.
    """

    perceptual: np.ndarray
    spurious: np.ndarray
    class_embedding: np.ndarray  # (d_w,) frozen
    category_id: int

    def __post_init__(self):
        self.perceptual = np.ascontiguousarray(self.perceptual, dtype=np.float32)
        self.spurious = np.ascontiguousarray(self.spurious, dtype=np.float32)
        cls = np.ascontiguousarray(self.class_embedding, dtype=np.float32)
        if self.perceptual.ndim != 2 or self.perceptual.shape[0] < 1:
            raise ShapeMismatchError(f"perceptual words must be (m, d_w), got {self.perceptual.shape}")
        m, d_w = self.perceptual.shape
        if self.spurious.ndim != 3 or self.spurious.shape[1:] != (m, d_w) or self.spurious.shape[0] < 1:
            raise ShapeMismatchError(
                f"spurious words must be (N_s, {m}, {d_w}), got {self.spurious.shape}"
            )
        if cls.shape != (d_w,):
            raise ShapeMismatchError(f"class embedding must be ({d_w},), got {cls.shape}")
        for arr in (self.perceptual, self.spurious, cls):
            if not np.all(np.isfinite(arr)):
                raise InvalidSpecError("context contains non-finite entries")
        cls.flags.writeable = False
        self.class_embedding = cls

    @property
    def num_words(self) -> int:
        return self.perceptual.shape[0]

    @property
    def num_spurious(self) -> int:
        return self.spurious.shape[0]

    def copy(self) -> "ContextPair":
        return ContextPair(
            self.perceptual.copy(), self.spurious.copy(), self.class_embedding.copy(), self.category_id
        )


class PerturbKind(enum.Enum):
    MASK = "mask"
    NOISE = "noise"
    SWAP = "swap"


@dataclass(frozen=True)
class Perturbation:
    """Replacement of exactly one perceptual word (ratio 1/m)."""

    kind: PerturbKind
    position: int
    sigma: float = 0.0  # NOISE only
    donor_category: int = -1  # SWAP only
    donor_position: int = -1  # SWAP only

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidSpecError("noise sigma must be >= 0")


def _pooled(words: np.ndarray, class_embedding: np.ndarray) -> np.ndarray:
    w = np.asarray(words, dtype=np.float64)
    cls = np.asarray(class_embedding, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionMismatchError(f"words must be (m, d_w), got {w.shape}")
    if cls.shape != (w.shape[1],):
        raise DimensionMismatchError(
            f"class embedding shape {cls.shape} does not match word dim {w.shape[1]}"
        )
    return (w.sum(axis=0) + cls) / (w.shape[0] + 1)


def encode64(params: EncoderParams, words: np.ndarray, class_embedding: np.ndarray) -> np.ndarray:
    """Float64 encode used inside loss/gradient pipelines."""
    p = _pooled(words, class_embedding)
    if p.shape[0] != params.word_dim:
        raise DimensionMismatchError(
            f"word dim {p.shape[0]} does not match encoder word_dim {params.word_dim}"
        )
    if params.kind == EncoderKind.MEAN_POOL_LINEAR:
        u = params.weights.astype(np.float64).T @ p
    else:
        u = p
    norm = np.linalg.norm(u)
    if norm < ZERO_NORM_EPS:
        raise ZeroVectorError("pooled context encodes to a zero vector")
    return u / norm


def encode(params: EncoderParams, words: np.ndarray, class_embedding: np.ndarray) -> np.ndarray:
    """Encode a context to a float32 unit feature vector."""
    return encode64(params, words, class_embedding).astype(np.float32)


def encode_grad(
    params: EncoderParams,
    words: np.ndarray,
    class_embedding: np.ndarray,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of (upstream . encode(words)) with respect to the words.

    Chain rule through normalization (tangent-space projection), the frozen
    linear map, and mean pooling. The class embedding is frozen and receives
    no gradient; every word row shares the same pooled gradient / (m + 1).
    Returns an (m, d_w) float64 array.
    """
    w = np.asarray(words, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    p = _pooled(words, class_embedding)
    if p.shape[0] != params.word_dim:
        raise DimensionMismatchError(
            f"word dim {p.shape[0]} does not match encoder word_dim {params.word_dim}"
        )
    if params.kind == EncoderKind.MEAN_POOL_LINEAR:
        u = params.weights.astype(np.float64).T @ p
    else:
        u = p
    if g.shape != u.shape:
        raise DimensionMismatchError(f"upstream shape {g.shape} does not match feature dim {u.shape}")
    norm = np.linalg.norm(u)
    if norm < ZERO_NORM_EPS:
        raise ZeroVectorError("pooled context encodes to a zero vector")
    f = u / norm
    du = (g - np.dot(g, f) * f) / norm
    if params.kind == EncoderKind.MEAN_POOL_LINEAR:
        dp = params.weights.astype(np.float64) @ du
    else:
        dp = du
    row = dp / (w.shape[0] + 1)
    return np.tile(row, (w.shape[0], 1))


def _context_lookup(all_contexts, category: int) -> ContextPair:
    if isinstance(all_contexts, Mapping):
        ctx = all_contexts.get(category)
    else:
        ctx = next((c for c in all_contexts if c.category_id == category), None)
    if ctx is None:
        raise UnknownDonorError(f"no context for donor category {category}")
    return ctx


def perturb_context(
    ctx: ContextPair,
    p: Perturbation,
    all_contexts: Mapping[int, ContextPair] | Sequence[ContextPair],
    mask_embedding: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Copy of ctx.perceptual with the word at p.position replaced.

    MASK inserts the model's fixed mask embedding, NOISE a fresh
    Gaussian(0, sigma^2) draw, SWAP the donor category's perceptual word.
    Exactly one row changes.
    """
    m, d_w = ctx.perceptual.shape
    if not 0 <= p.position < m:
        raise InvalidPositionError(f"position {p.position} outside [0, {m})")
    words = ctx.perceptual.copy()
    if p.kind == PerturbKind.MASK:
        mask = np.asarray(mask_embedding, dtype=np.float32)
        if mask.shape != (d_w,):
            raise DimensionMismatchError(f"mask embedding shape {mask.shape} != ({d_w},)")
        words[p.position] = mask
    elif p.kind == PerturbKind.NOISE:
        words[p.position] = (p.sigma * rng.standard_normal(d_w)).astype(np.float32)
    else:
        donor = _context_lookup(all_contexts, p.donor_category)
        if not 0 <= p.donor_position < donor.perceptual.shape[0]:
            raise InvalidPositionError(
                f"donor position {p.donor_position} outside [0, {donor.perceptual.shape[0]})"
            )
        words[p.position] = donor.perceptual[p.donor_position]
    return words


def sample_perturbation(
    num_words: int,
    num_categories: int,
    self_category: int,
    rng: np.random.Generator,
    noise_sigma: float = 0.02,
    kinds: Sequence[PerturbKind] | None = None,
) -> Perturbation:
    """Uniform random one-word perturbation for one training iteration.

    Position is uniform over the context; the kind is uniform over the three
    kinds unless restricted. Swap donors are drawn from the *other*
    categories, so with a single category only mask/noise are eligible.
    """
    allowed = list(kinds) if kinds is not None else list(PerturbKind)
    if num_categories < 2 and PerturbKind.SWAP in allowed:
        allowed = [k for k in allowed if k != PerturbKind.SWAP]
    if not allowed:
        raise InvalidSpecError("no perturbation kinds available")
    position = int(rng.integers(num_words))
    kind = allowed[int(rng.integers(len(allowed)))]
    if kind == PerturbKind.NOISE:
        return Perturbation(kind, position, sigma=noise_sigma)
    if kind == PerturbKind.SWAP:
        donor = int(rng.integers(num_categories - 1))
        if donor >= self_category:
            donor += 1
        donor_position = int(rng.integers(num_words))
        return Perturbation(kind, position, donor_category=donor, donor_position=donor_position)
    return Perturbation(kind, position)
