"""Integrated scoring, ID classification, and OOD scoring.

The integrated score multiplies each perceptual similarity s_k by a
regularizer gamma_k, the binary softmax of perceptual vs spurious
similarity. Overconfident similarities on samples that look spurious are
pulled toward zero; confident ID predictions are left nearly untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidSpecError
from .state import ModelState

#: Default logit scale applied inside gamma and the OOD softmax.
DEFAULT_TAU = 100.0

_GAMMA_LO = np.nextafter(0.0, 1.0)
_GAMMA_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class ScoreReport:
    """Per-sample scoring breakdown across the C categories."""

    similarities: np.ndarray  # (C,) s_k = <w_p_k, x>
    regularizers: np.ndarray  # (C,) gamma_k in (0, 1)
    integrated: np.ndarray  # (C,) r_k = s_k * gamma_k
    predicted: int
    ood_score: float  # in (-1, -1/C]; lower means more OOD-like


@dataclass(frozen=True)
class BatchScores:
    similarities: np.ndarray  # (n, C)
    regularizers: np.ndarray  # (n, C)
    integrated: np.ndarray  # (n, C)
    predicted: np.ndarray  # (n,) int64
    ood_scores: np.ndarray  # (n,) float64


def _stable_sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def score_batch(
    state: ModelState,
    features: np.ndarray,
    tau: float = DEFAULT_TAU,
    tau_score: float | None = None,
    perceptual_only: bool = False,
) -> BatchScores:
    """Vectorized scoring of an (n, d) feature batch against the cached
    text features. perceptual_only fixes gamma to 1 (ablation baseline)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.dim:
        raise DimensionMismatchError(f"features {x.shape} do not match model dim {state.dim}")
    if not tau > 0:
        raise InvalidSpecError("tau must be positive")
    ts = tau if tau_score is None else tau_score
    if not ts > 0:
        raise InvalidSpecError("tau_score must be positive")

    wp = state.perceptual_cache.astype(np.float64)  # (C, d)
    ws = state.spurious_cache.astype(np.float64)  # (C, N_s, d)
    s = x @ wp.T  # (n, C)
    if perceptual_only:
        gamma = np.ones_like(s)
    else:
        s_spur = np.max(
            (x @ ws.reshape(-1, state.dim).T).reshape(x.shape[0], state.num_categories, -1), axis=2
        )
        gamma = np.clip(_stable_sigmoid(tau * (s - s_spur)), _GAMMA_LO, _GAMMA_HI)
    r = s * gamma
    predicted = np.argmax(r, axis=1).astype(np.int64)  # ties -> lowest index

    z = ts * r
    z_max = np.max(z, axis=1)
    # summing the exp terms in sorted order makes the score exactly invariant
    # to category permutations (merge-order equality is a hard contract)
    terms = np.sort(np.exp(z - z_max[:, None]), axis=1)
    softmax_max = 1.0 / np.sum(terms, axis=1)
    return BatchScores(s, gamma, r, predicted, -softmax_max)


def score(
    state: ModelState,
    x: np.ndarray,
    tau: float = DEFAULT_TAU,
    tau_score: float | None = None,
    perceptual_only: bool = False,
) -> ScoreReport:
    """Score one sample; see score_batch."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise DimensionMismatchError(f"expected a single feature vector, got {xv.shape}")
    b = score_batch(state, xv[None, :], tau=tau, tau_score=tau_score, perceptual_only=perceptual_only)
    return ScoreReport(
        b.similarities[0], b.regularizers[0], b.integrated[0], int(b.predicted[0]), float(b.ood_scores[0])
    )


def classify(state: ModelState, x: np.ndarray, tau: float = DEFAULT_TAU, perceptual_only: bool = False) -> int:
    return score(state, x, tau=tau, perceptual_only=perceptual_only).predicted


def ood_score(
    state: ModelState,
    x: np.ndarray,
    tau: float = DEFAULT_TAU,
    tau_score: float | None = None,
    perceptual_only: bool = False,
) -> float:
    return score(state, x, tau=tau, tau_score=tau_score, perceptual_only=perceptual_only).ood_score


def zero_shot_regularize(
    description_features: np.ndarray,
    perturbed_features: np.ndarray,
    x: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> np.ndarray:
    """Integrated scores from fixed description features and K perturbed
    variants per category (no training involved).

    gamma_k averages the binary softmax of the description similarity against
    each perturbed variant's similarity, so each variant acts as a separate
    one-class test.
    """
    desc = np.asarray(description_features, dtype=np.float64)
    pert = np.asarray(perturbed_features, dtype=np.float64)
    xv = np.asarray(x, dtype=np.float64)
    if desc.ndim != 2:
        raise DimensionMismatchError(f"descriptions must be (C, d), got {desc.shape}")
    c, d = desc.shape
    if pert.ndim != 3 or pert.shape[0] != c or pert.shape[2] != d:
        raise DimensionMismatchError(f"perturbed features must be (C, K, {d}), got {pert.shape}")
    if pert.shape[1] < 1:
        raise InvalidSpecError("need at least one perturbed variant per category")
    if xv.shape != (d,):
        raise DimensionMismatchError(f"sample shape {xv.shape} != ({d},)")
    s = desc @ xv  # (C,)
    sp = pert @ xv  # (C, K)
    gamma = np.mean(np.clip(_stable_sigmoid(tau * (s[:, None] - sp)), _GAMMA_LO, _GAMMA_HI), axis=1)
    return s * gamma


def zero_shot_batch(
    description_features: np.ndarray,
    perturbed_features: np.ndarray,
    features: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized zero_shot_regularize over an (n, d) batch.

    Returns (integrated scores (n, C), predicted labels (n,)).
    """
    desc = np.asarray(description_features, dtype=np.float64)
    pert = np.asarray(perturbed_features, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or desc.ndim != 2 or x.shape[1] != desc.shape[1]:
        raise DimensionMismatchError(
            f"features {x.shape} do not match descriptions {desc.shape}"
        )
    c, d = desc.shape
    if pert.ndim != 3 or pert.shape[0] != c or pert.shape[2] != d:
        raise DimensionMismatchError(f"perturbed features must be (C, K, {d}), got {pert.shape}")
    s = x @ desc.T  # (n, C)
    sp = (x @ pert.reshape(-1, d).T).reshape(x.shape[0], c, -1)  # (n, C, K)
    gamma = np.mean(np.clip(_stable_sigmoid(tau * (s[:, :, None] - sp)), _GAMMA_LO, _GAMMA_HI), axis=2)
    r = s * gamma
    return r, np.argmax(r, axis=1).astype(np.int64)
