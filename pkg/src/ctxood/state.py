"""Model state: frozen encoder, per-category contexts, feature caches, and
optimizer velocity buffers.

The cached text features always equal encode(context) for the current words;
every mutation path refreshes them so inference and serialization can rely
on the cache without re-encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import STREAM_CLASS, STREAM_CONTEXT, STREAM_ENCODER, STREAM_MASK, make_rng
from .encoder import (
    ContextPair,
    EncoderKind,
    EncoderParams,
    build_identity,
    build_mean_pool_linear,
    encode,
)
from .errors import InvalidSpecError, ShapeMismatchError

#: Standard deviation for context, class-embedding, and mask initialization.
INIT_STD = 0.02


@dataclass
class ModelState:
    """Everything a trained task carries; only context words are learnable."""

    encoder: EncoderParams
    mask_embedding: np.ndarray  # (d_w,) float32 frozen
    contexts: list[ContextPair]  # length C
    perceptual_cache: np.ndarray  # (C, d) float32, = encode(perceptual_k)
    spurious_cache: np.ndarray  # (C, N_s, d) float32
    perceptual_velocity: np.ndarray  # (C, m, d_w) float32
    spurious_velocity: np.ndarray  # (C, N_s, m, d_w) float32

    @property
    def num_categories(self) -> int:
        return len(self.contexts)

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def word_dim(self) -> int:
        return self.encoder.word_dim

    @property
    def context_len(self) -> int:
        return self.contexts[0].num_words

    @property
    def num_spurious(self) -> int:
        return self.contexts[0].num_spurious

    def refresh_cache(self, categories=None) -> None:
        """Recompute cached text features for the given categories (all by default)."""
        cats = range(self.num_categories) if categories is None else categories
        for k in cats:
            ctx = self.contexts[k]
            self.perceptual_cache[k] = encode(self.encoder, ctx.perceptual, ctx.class_embedding)
            for i in range(ctx.num_spurious):
                self.spurious_cache[k, i] = encode(self.encoder, ctx.spurious[i], ctx.class_embedding)

    def copy(self) -> "ModelState":
        return ModelState(
            encoder=self.encoder,
            mask_embedding=self.mask_embedding.copy(),
            contexts=[c.copy() for c in self.contexts],
            perceptual_cache=self.perceptual_cache.copy(),
            spurious_cache=self.spurious_cache.copy(),
            perceptual_velocity=self.perceptual_velocity.copy(),
            spurious_velocity=self.spurious_velocity.copy(),
        )


def new_model_state(
    num_categories: int,
    dim: int,
    word_dim: int = 512,
    context_len: int = 16,
    num_spurious: int = 1,
    seed: int = 0,
    encoder_kind: EncoderKind = EncoderKind.MEAN_POOL_LINEAR,
    class_embeddings: np.ndarray | None = None,
) -> ModelState:
    """Freshly initialized state: Gaussian(0, INIT_STD^2) contexts, frozen
    random encoder, frozen mask embedding.

    Encoder weights and the mask embedding depend only on (seed, shapes), so
    two tasks trained with the same seed share them bit-for-bit and can later
    be merged. class_embeddings, when given, must be (C, d_w) and are frozen
    as-is; otherwise they are drawn from the seed.
    """
    if num_categories < 1:
        raise InvalidSpecError("need at least one category")
    if encoder_kind == EncoderKind.IDENTITY:
        if word_dim != dim:
            raise ShapeMismatchError("identity encoder requires word_dim == dim")
        enc = build_identity(dim)
    else:
        enc = build_mean_pool_linear(word_dim, dim, make_rng(seed, STREAM_ENCODER))

    mask = (INIT_STD * make_rng(seed, STREAM_MASK).standard_normal(word_dim)).astype(np.float32)
    mask.flags.writeable = False

    if class_embeddings is None:
        cls = (
            INIT_STD * make_rng(seed, STREAM_CLASS).standard_normal((num_categories, word_dim))
        ).astype(np.float32)
    else:
        cls = np.ascontiguousarray(class_embeddings, dtype=np.float32)
        if cls.shape != (num_categories, word_dim):
            raise ShapeMismatchError(
                f"class embeddings shape {cls.shape} != ({num_categories}, {word_dim})"
            )

    ctx_rng = make_rng(seed, STREAM_CONTEXT)
    contexts = []
    for k in range(num_categories):
        perceptual = (INIT_STD * ctx_rng.standard_normal((context_len, word_dim))).astype(np.float32)
        spurious = (
            INIT_STD * ctx_rng.standard_normal((num_spurious, context_len, word_dim))
        ).astype(np.float32)
        contexts.append(ContextPair(perceptual, spurious, cls[k], k))

    state = ModelState(
        encoder=enc,
        mask_embedding=mask,
        contexts=contexts,
        perceptual_cache=np.zeros((num_categories, dim), dtype=np.float32),
        spurious_cache=np.zeros((num_categories, num_spurious, dim), dtype=np.float32),
        perceptual_velocity=np.zeros((num_categories, context_len, word_dim), dtype=np.float32),
        spurious_velocity=np.zeros((num_categories, num_spurious, context_len, word_dim), dtype=np.float32),
    )
    state.refresh_cache()
    return state


def assert_cache_coherent(state: ModelState, atol: float = 0.0) -> None:
    """Raise if any cached feature differs from a fresh encode of its context."""
    for k, ctx in enumerate(state.contexts):
        fresh = encode(state.encoder, ctx.perceptual, ctx.class_embedding)
        if not np.array_equal(fresh, state.perceptual_cache[k]):
            if atol == 0.0 or np.max(np.abs(fresh - state.perceptual_cache[k])) > atol:
                raise AssertionError(f"perceptual cache stale for category {k}")
        for i in range(ctx.num_spurious):
            fresh = encode(state.encoder, ctx.spurious[i], ctx.class_embedding)
            if not np.array_equal(fresh, state.spurious_cache[k, i]):
                if atol == 0.0 or np.max(np.abs(fresh - state.spurious_cache[k, i])) > atol:
                    raise AssertionError(f"spurious cache stale for category {k}/{i}")
