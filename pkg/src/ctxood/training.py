"""Loss computation, SGD with momentum and cosine-annealed learning rate,
and the per-task training loop.

Two joint objectives drive the contexts. The classification loss pushes each
ID sample toward its own perceptual feature and away from every other
category's perceptual *and* spurious features (the sample's own spurious term
is excluded from the denominator). The detection loss is a per-category
binary softmax: perceptual above spurious on ID samples, spurious above
perceptual on synthesized outliers. All similarities are scaled by the logit
scale before softmax terms; losses and gradients are accumulated in float64
while parameters stay float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    STREAM_SYNTH,
    STREAM_TRAIN,
    UNLABELED,
    LabeledFeatureSet,
    make_rng,
)
from .encoder import encode64, encode_grad
from .errors import (
    EmptyBatchError,
    EmptySetError,
    InvalidSpecError,
    ShapeMismatchError,
)
from .state import ModelState, new_model_state
from .synthesis import SynthesisConfig, knn_distances, synthesize_spurious


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 0.002
    momentum: float = 0.9
    batch_size: int = 64
    logit_scale: float = 100.0
    ood_loss_weight: float = 1.0
    ortho_weight: float = 0.0  # only acts when num_spurious >= 2
    num_spurious: int = 1
    context_len: int = 16
    word_dim: int = 512
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise InvalidSpecError("epochs must be >= 0")
        if not self.lr0 > 0:
            raise InvalidSpecError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidSpecError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise InvalidSpecError("batch_size must be >= 1")
        if not self.logit_scale > 0:
            raise InvalidSpecError("logit_scale must be positive")
        if self.ood_loss_weight < 0 or self.ortho_weight < 0:
            raise InvalidSpecError("loss weights must be >= 0")
        if self.num_spurious < 1 or self.context_len < 1 or self.word_dim < 1:
            raise InvalidSpecError("model shape parameters must be >= 1")
        self.synthesis.validate()


@dataclass
class ContextGradients:
    """Float64 gradients mirroring the learnable words of every context."""

    perceptual: np.ndarray  # (C, m, d_w)
    spurious: np.ndarray  # (C, N_s, m, d_w)

    @classmethod
    def zeros_like(cls, state: ModelState) -> "ContextGradients":
        return cls(
            np.zeros(state.perceptual_velocity.shape, dtype=np.float64),
            np.zeros(state.spurious_velocity.shape, dtype=np.float64),
        )

    def add_scaled(self, other: "ContextGradients", weight: float) -> None:
        self.perceptual += weight * other.perceptual
        self.spurious += weight * other.spurious


def context_tensors(state: ModelState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Float64 (perceptual (C,m,d_w), spurious (C,N_s,m,d_w), class (C,d_w))
    word tensors extracted from the state's float32 storage."""
    vp = np.stack([ctx.perceptual for ctx in state.contexts]).astype(np.float64)
    vs = np.stack([ctx.spurious for ctx in state.contexts]).astype(np.float64)
    cls = np.stack([ctx.class_embedding for ctx in state.contexts]).astype(np.float64)
    return vp, vs, cls


def text_features64(state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Float64 perceptual (C, d) and spurious (C, N_s, d) text features."""
    vp, vs, cls = context_tensors(state)
    return _encode_all64(state.encoder, vp, vs, cls)


def _encode_all64(encoder, vp: np.ndarray, vs: np.ndarray, cls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, ns = vp.shape[0], vs.shape[1]
    d = encoder.dim
    wp = np.empty((c, d), dtype=np.float64)
    ws = np.empty((c, ns, d), dtype=np.float64)
    for k in range(c):
        wp[k] = encode64(encoder, vp[k], cls[k])
        for i in range(ns):
            ws[k, i] = encode64(encoder, vs[k, i], cls[k])
    return wp, ws


def _grads_from_upstreams(
    encoder, vp: np.ndarray, vs: np.ndarray, cls: np.ndarray, up: np.ndarray, us: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chain accumulated d(loss)/d(text feature) vectors through the encoder."""
    dvp = np.zeros_like(vp)
    dvs = np.zeros_like(vs)
    for k in range(vp.shape[0]):
        if np.any(up[k]):
            dvp[k] = encode_grad(encoder, vp[k], cls[k], up[k])
        for i in range(vs.shape[1]):
            if np.any(us[k, i]):
                dvs[k, i] = encode_grad(encoder, vs[k, i], cls[k], us[k, i])
    return dvp, dvs


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1)
    with np.errstate(invalid="ignore"):
        return m + np.log(np.sum(np.exp(z - m[:, None]), axis=1))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_batch(features: np.ndarray, labels: np.ndarray, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != state.dim:
        raise ShapeMismatchError(f"batch features {x.shape} do not match model dim {state.dim}")
    if y.shape != (x.shape[0],):
        raise ShapeMismatchError(f"labels {y.shape} do not match batch of {x.shape[0]}")
    if x.shape[0] and (y.min() < 0 or y.max() >= state.num_categories):
        raise InvalidSpecError("batch labels must be valid category indices")
    return x, y


def loss_id_words(
    encoder,
    vp: np.ndarray,
    vs: np.ndarray,
    cls: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    tau: float = 100.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Classification loss as a pure float64 function of the word tensors.

    Returns (loss, d/d vp, d/d vs); the state-based loss_id wraps this.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise EmptyBatchError("loss_id needs a non-empty batch")
    c, ns = vp.shape[0], vs.shape[1]
    wp, ws = _encode_all64(encoder, vp, vs, cls)

    a = tau * (x @ wp.T)  # (n, C)
    b = tau * (x @ ws.reshape(c * ns, -1).T).reshape(n, c, ns)
    b_masked = b.copy()
    b_masked[np.arange(n), y, :] = -np.inf

    z = np.concatenate([a, b_masked.reshape(n, c * ns)], axis=1)
    lse = _logsumexp_rows(z)
    loss = float(np.mean(-a[np.arange(n), y] + lse))

    p = np.exp(z - lse[:, None])  # softmax; masked entries are exactly 0
    da = p[:, :c]
    db = p[:, c:].reshape(n, c, ns)
    da[np.arange(n), y] -= 1.0
    scale = tau / n
    up = scale * (da.T @ x)  # (C, d)
    us = scale * np.einsum("nkj,nd->kjd", db, x)  # (C, N_s, d)
    return loss, *_grads_from_upstreams(encoder, vp, vs, cls, up, us)


def loss_id(
    state: ModelState,
    features: np.ndarray,
    labels: np.ndarray,
    tau: float = 100.0,
) -> tuple[float, ContextGradients]:
    """Classification loss over an ID batch, with context-word gradients.

    Per sample: -log softmax where the positive logit is the own perceptual
    similarity and the negatives are all other categories' perceptual and
    spurious similarities (the own spurious features are excluded). With a
    single category the loss is exactly zero.
    """
    x, y = _check_batch(features, labels, state)
    vp, vs, cls = context_tensors(state)
    loss, dvp, dvs = loss_id_words(state.encoder, vp, vs, cls, x, y, tau)
    return loss, ContextGradients(dvp, dvs)


def loss_ood_words(
    encoder,
    vp: np.ndarray,
    vs: np.ndarray,
    cls: np.ndarray,
    id_features: np.ndarray,
    id_labels: np.ndarray,
    spurious_features: np.ndarray,
    spurious_labels: np.ndarray,
    tau: float = 100.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Detection loss as a pure float64 function of the word tensors."""
    c, ns = vp.shape[0], vs.shape[1]
    wp, ws = _encode_all64(encoder, vp, vs, cls)
    up = np.zeros((c, wp.shape[1]), dtype=np.float64)
    us = np.zeros((c, ns, wp.shape[1]), dtype=np.float64)
    loss = 0.0

    for features, labels, spurious_side in (
        (id_features, id_labels, False),
        (spurious_features, spurious_labels, True),
    ):
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        n = x.shape[0]
        if n == 0:
            continue
        sp = np.sum(x * wp[y], axis=1)  # (n,)
        ss_all = np.einsum("nd,njd->nj", x, ws[y])  # (n, N_s)
        j_star = np.argmax(ss_all, axis=1)
        ss = ss_all[np.arange(n), j_star]
        # -log sigmoid(t): t > 0 means the correct side already wins
        t = tau * (ss - sp) if spurious_side else tau * (sp - ss)
        loss += float(np.mean(np.logaddexp(0.0, -t)))
        q = _sigmoid(-t) * tau / n
        sign_p = 1.0 if spurious_side else -1.0
        np.add.at(up, y, sign_p * q[:, None] * x)
        np.add.at(us, (y, j_star), -sign_p * q[:, None] * x)

    return loss, *_grads_from_upstreams(encoder, vp, vs, cls, up, us)


def loss_ood(
    state: ModelState,
    id_features: np.ndarray,
    id_labels: np.ndarray,
    spurious_features: np.ndarray,
    spurious_labels: np.ndarray,
    tau: float = 100.0,
) -> tuple[float, ContextGradients]:
    """Detection loss: binary softmax per category between perceptual and
    spurious similarity, averaged over the ID batch and the synthesis batch
    independently. An empty batch contributes zero to its term. With
    several spurious contexts the maximum spurious similarity competes.
    """
    xi, yi = _check_batch(id_features, id_labels, state)
    xs, ys = _check_batch(spurious_features, spurious_labels, state)
    vp, vs, cls = context_tensors(state)
    loss, dvp, dvs = loss_ood_words(state.encoder, vp, vs, cls, xi, yi, xs, ys, tau)
    return loss, ContextGradients(dvp, dvs)


def ortho_penalty_words(
    encoder, vp: np.ndarray, vs: np.ndarray, cls: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Orthogonality penalty as a pure float64 function of the word tensors."""
    c, ns = vs.shape[0], vs.shape[1]
    if ns == 1:
        return 0.0, np.zeros_like(vp), np.zeros_like(vs)
    _, ws = _encode_all64(encoder, vp, vs, cls)
    gram = np.einsum("kid,kjd->kij", ws, ws)  # (C, N_s, N_s)
    iu = np.triu_indices(ns, k=1)
    penalty = float(np.mean(np.sum(gram[:, iu[0], iu[1]] ** 2, axis=1)))
    gram_nodiag = gram.copy()
    gram_nodiag[:, np.arange(ns), np.arange(ns)] = 0.0
    us = (2.0 / c) * np.einsum("kij,kjd->kid", gram_nodiag, ws)
    up = np.zeros((c, ws.shape[2]), dtype=np.float64)
    return penalty, *_grads_from_upstreams(encoder, vp, vs, cls, up, us)


def ortho_penalty(state: ModelState) -> tuple[float, ContextGradients]:
    """Mean over categories of the squared pairwise dot products between
    spurious text features; zero (with zero gradients) when N_s == 1."""
    vp, vs, cls = context_tensors(state)
    penalty, dvp, dvs = ortho_penalty_words(state.encoder, vp, vs, cls)
    return penalty, ContextGradients(dvp, dvs)


def empirical_risk(
    state: ModelState,
    id_set: LabeledFeatureSet,
    ood_set: LabeledFeatureSet,
    tau: float = 100.0,
) -> float:
    """Detection risk in [0, 2]: fraction of ID samples whose predicted
    category scores spurious above perceptual, plus the fraction of OOD
    samples scoring perceptual above spurious. Predictions come from
    integrated inference."""
    from .inference import score_batch

    if id_set.n == 0 or ood_set.n == 0:
        raise EmptySetError("empirical_risk needs non-empty ID and OOD sets")
    wp = state.perceptual_cache.astype(np.float64)
    ws = state.spurious_cache.astype(np.float64)
    risk = 0.0
    for fset, id_side in ((id_set, True), (ood_set, False)):
        x = fset.features.astype(np.float64)
        pred = score_batch(state, fset.features, tau=tau).predicted
        sp = np.sum(x * wp[pred], axis=1)
        ss = np.max(np.einsum("nd,njd->nj", x, ws[pred]), axis=1)
        risk += float(np.mean(sp < ss)) if id_side else float(np.mean(sp > ss))
    return risk


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at step `total`."""
    if total < 1:
        raise InvalidSpecError("total steps must be >= 1")
    if not 0 <= t <= total:
        raise InvalidSpecError(f"step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(state: ModelState, grads: ContextGradients, lr: float, momentum: float) -> None:
    """velocity <- momentum*velocity + grad; word <- word - lr*velocity.

    Only context words move; caches are refreshed afterwards. Updates are
    computed in float64 and stored back as float32.
    """
    if grads.perceptual.shape != state.perceptual_velocity.shape:
        raise ShapeMismatchError(
            f"perceptual grads {grads.perceptual.shape} != {state.perceptual_velocity.shape}"
        )
    if grads.spurious.shape != state.spurious_velocity.shape:
        raise ShapeMismatchError(
            f"spurious grads {grads.spurious.shape} != {state.spurious_velocity.shape}"
        )
    pv = momentum * state.perceptual_velocity.astype(np.float64) + grads.perceptual
    sv = momentum * state.spurious_velocity.astype(np.float64) + grads.spurious
    state.perceptual_velocity = pv.astype(np.float32)
    state.spurious_velocity = sv.astype(np.float32)
    for k, ctx in enumerate(state.contexts):
        ctx.perceptual = (
            ctx.perceptual.astype(np.float64) - lr * state.perceptual_velocity[k].astype(np.float64)
        ).astype(np.float32)
        ctx.spurious = (
            ctx.spurious.astype(np.float64) - lr * state.spurious_velocity[k].astype(np.float64)
        ).astype(np.float32)
    state.refresh_cache()


def train_task(
    id_set: LabeledFeatureSet,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    emit=None,
) -> ModelState:
    """Train hierarchical contexts on one labeled task; deterministic per seed.

    Each iteration synthesizes spurious outliers for every category (as
    gradient-free constants, from per-(epoch, step, category) seed streams),
    then takes one SGD step on the weighted joint objective. One progress
    line per epoch goes to `emit` (default: print):
    ``epoch=<e> loss_id=<v> loss_ood=<v> lr=<v>``.
    """
    config.validate()
    if id_set.num_categories < 1:
        raise InvalidSpecError("training needs at least one category")
    if id_set.n == 0:
        raise EmptyBatchError("training set is empty")
    if np.any(id_set.labels == UNLABELED):
        raise InvalidSpecError("training set contains unlabeled rows")
    emit = emit or print

    c = id_set.num_categories
    state = new_model_state(
        c,
        id_set.dim,
        word_dim=config.word_dim,
        context_len=config.context_len,
        num_spurious=config.num_spurious,
        seed=config.seed,
    )
    if config.epochs == 0:
        return state

    feats_by_cat = [id_set.of_category(k) for k in range(c)]
    dists_by_cat = [knn_distances(f, config.synthesis.k) for f in feats_by_cat]

    rng = rng if rng is not None else make_rng(config.seed, STREAM_TRAIN)
    n = id_set.n
    batch = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    total_steps = config.epochs * steps_per_epoch
    tau = config.logit_scale
    use_ortho = config.ortho_weight > 0 and config.num_spurious >= 2

    global_step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        id_sum = ood_sum = 0.0
        lr = config.lr0
        for step in range(steps_per_epoch):
            idx = perm[step * batch : (step + 1) * batch]
            xb = id_set.features[idx]
            yb = id_set.labels[idx]

            synth_rows, synth_labels = [], []
            for k in range(c):
                srng = make_rng(config.seed, STREAM_SYNTH, epoch, step, k)
                s = synthesize_spurious(
                    state, k, feats_by_cat[k], config.synthesis, srng, distances=dists_by_cat[k]
                )
                if s.n:
                    synth_rows.append(s.features)
                    synth_labels.append(s.labels)
            if synth_rows:
                sp_x = np.concatenate(synth_rows)
                sp_y = np.concatenate(synth_labels)
            else:
                sp_x = np.zeros((0, id_set.dim), dtype=np.float32)
                sp_y = np.zeros(0, dtype=np.int64)

            lid, grads = loss_id(state, xb, yb, tau)
            lood, good = loss_ood(state, xb, yb, sp_x, sp_y, tau)
            grads.add_scaled(good, config.ood_loss_weight)
            if use_ortho:
                _, gortho = ortho_penalty(state)
                grads.add_scaled(gortho, config.ortho_weight)

            lr = cosine_lr(global_step, total_steps, config.lr0)
            sgd_step(state, grads, lr, config.momentum)
            global_step += 1
            id_sum += lid
            ood_sum += lood
        emit(
            f"epoch={epoch + 1} loss_id={id_sum / steps_per_epoch:.6f} "
            f"loss_ood={ood_sum / steps_per_epoch:.6f} lr={lr:.6f}"
        )
    return state
