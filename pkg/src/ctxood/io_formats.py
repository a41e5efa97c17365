"""Bit-exact little-endian file formats and the plain-text config parser.

Feature files (magic CTXF, version 1):
    magic 4s | version u32 | dim u32 | count u64 | num_categories u32 |
    count*dim float32 row-major | count u32 labels (0xFFFFFFFF = unlabeled)

Auxiliary embedding files (magic CTXE) share the exact layout; exporters use
them for class-token and description embeddings.

Checkpoint files (magic CCTX, version 1):
    magic 4s | version u32 | d_w u32 | d u32 | m u32 | N_s u32 | C u32 |
    encoder kind u8 | d_w*d float32 weights | d_w float32 mask embedding |
    per category: d_w float32 class embedding, m*d_w float32 perceptual words,
    N_s*m*d_w float32 spurious words

Serialization is deterministic: equal states produce equal bytes.
"""

from __future__ import annotations

import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import UNLABELED, LabeledFeatureSet, normalize_rows
from .encoder import ContextPair, EncoderKind, EncoderParams
from .errors import (
    BadMagicError,
    InvalidConfigError,
    LabelOutOfRangeError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionUnsupportedError,
)
from .state import ModelState
from .synthesis import SynthesisConfig
from .training import TrainConfig

FEATURE_MAGIC = b"CTXF"
AUX_MAGIC = b"CTXE"
CHECKPOINT_MAGIC = b"CCTX"
FORMAT_VERSION = 1
UNLABELED_U32 = 0xFFFFFFFF

_FEATURE_HEADER = struct.Struct("<4sIIQI")
_CHECKPOINT_HEADER = struct.Struct("<4sIIIIII")


def write_features(fset: LabeledFeatureSet, path, magic: bytes = FEATURE_MAGIC) -> None:
    feats = np.ascontiguousarray(fset.features, dtype="<f4")
    labels = fset.labels.astype(np.int64)
    labels_u32 = np.where(labels == UNLABELED, UNLABELED_U32, labels).astype("<u4")
    header = _FEATURE_HEADER.pack(magic, FORMAT_VERSION, fset.dim, fset.n, fset.num_categories)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes())
        fh.write(labels_u32.tobytes())


def read_features_with_stats(path, magic: bytes = FEATURE_MAGIC) -> tuple[LabeledFeatureSet, float]:
    """Read a feature file; returns (set, max row-norm deviation before
    re-normalization). Rows already unit within 1e-6 keep their exact bits."""
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise TruncatedFileError(
            f"{path}: expected at least {_FEATURE_HEADER.size} header bytes, got {len(data)}"
        )
    got_magic, version, dim, count, num_categories = _FEATURE_HEADER.unpack_from(data)
    if got_magic != magic:
        raise BadMagicError(f"{path}: magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionUnsupportedError(f"{path}: version {version}, this build reads {FORMAT_VERSION}")
    if dim == 0:
        raise ShapeMismatchError(f"{path}: dim must be positive")
    expected = _FEATURE_HEADER.size + 4 * count * dim + 4 * count
    if len(data) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(data)}")

    offset = _FEATURE_HEADER.size
    feats = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    offset += 4 * count * dim
    labels_u32 = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
    labels = labels_u32.astype(np.int64)
    unlabeled = labels_u32 == UNLABELED_U32
    labels[unlabeled] = UNLABELED
    bad = ~unlabeled & (labels >= num_categories)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise LabelOutOfRangeError(
            f"{path}: row {idx} has label {labels[idx]} but num_categories is {num_categories}"
        )

    if count:
        norms = np.linalg.norm(feats.astype(np.float64), axis=1)
        deviation = float(np.max(np.abs(norms - 1.0)))
    else:
        deviation = 0.0
    rows = normalize_rows(feats) if count else feats.astype(np.float32)
    return LabeledFeatureSet(rows, labels, num_categories), deviation


def read_features(path, magic: bytes = FEATURE_MAGIC) -> LabeledFeatureSet:
    return read_features_with_stats(path, magic)[0]


def write_checkpoint(state: ModelState, path) -> None:
    header = _CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC,
        FORMAT_VERSION,
        state.word_dim,
        state.dim,
        state.context_len,
        state.num_spurious,
        state.num_categories,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<B", int(state.encoder.kind)))
        fh.write(np.ascontiguousarray(state.encoder.weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(state.mask_embedding, dtype="<f4").tobytes())
        for ctx in state.contexts:
            fh.write(np.ascontiguousarray(ctx.class_embedding, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ctx.perceptual, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ctx.spurious, dtype="<f4").tobytes())


def read_checkpoint(path) -> ModelState:
    """Load a checkpoint; caches are re-encoded and velocities start at zero."""
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size + 1:
        raise TruncatedFileError(f"{path}: too short for a checkpoint header")
    magic, version, d_w, d, m, n_s, c = _CHECKPOINT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionUnsupportedError(f"{path}: version {version}, this build reads {FORMAT_VERSION}")
    kind_byte = data[_CHECKPOINT_HEADER.size]
    try:
        kind = EncoderKind(kind_byte)
    except ValueError:
        raise ShapeMismatchError(f"{path}: unknown encoder kind tag {kind_byte}") from None

    per_category = d_w + m * d_w + n_s * m * d_w
    expected = _CHECKPOINT_HEADER.size + 1 + 4 * (d_w * d + d_w + c * per_category)
    if len(data) != expected:
        raise ShapeMismatchError(f"{path}: expected {expected} bytes, got {len(data)}")

    offset = _CHECKPOINT_HEADER.size + 1

    def take(count: int, shape) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        return arr.copy()

    weights = take(d_w * d, (d_w, d))
    encoder = EncoderParams(kind, weights)
    mask = take(d_w, (d_w,))
    mask.flags.writeable = False
    contexts = []
    for k in range(c):
        cls = take(d_w, (d_w,))
        perceptual = take(m * d_w, (m, d_w))
        spurious = take(n_s * m * d_w, (n_s, m, d_w))
        contexts.append(ContextPair(perceptual, spurious, cls, k))

    state = ModelState(
        encoder=encoder,
        mask_embedding=mask,
        contexts=contexts,
        perceptual_cache=np.zeros((c, d), dtype=np.float32),
        spurious_cache=np.zeros((c, n_s, d), dtype=np.float32),
        perceptual_velocity=np.zeros((c, m, d_w), dtype=np.float32),
        spurious_velocity=np.zeros((c, n_s, m, d_w), dtype=np.float32),
    )
    state.refresh_cache()
    return state


_CONFIG_KEYS = {
    "epochs": int,
    "lr0": float,
    "momentum": float,
    "batch_size": int,
    "logit_scale": float,
    "ood_loss_weight": float,
    "ortho_weight": float,
    "num_spurious": int,
    "context_len": int,
    "word_dim": int,
    "synth.k": int,
    "synth.boundary_fraction": float,
    "synth.sigma": float,
    "synth.candidates": int,
    "synth.max_accepted": int,
    "seed": int,
}

_SYNTH_FIELDS = {
    "synth.k": "k",
    "synth.boundary_fraction": "boundary_fraction",
    "synth.sigma": "sample_sigma",
    "synth.candidates": "candidates_per_boundary",
    "synth.max_accepted": "max_accepted_per_category",
}


def parse_config(text: str) -> TrainConfig:
    """Parse `key = value` lines (# comments) into a TrainConfig.

    Every key is optional and defaults to the built-in value; unknown or
    duplicate keys and unparseable values are hard errors.
    """
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise InvalidConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfigError(f"line {lineno}: duplicate key {key!r}")
        caster = _CONFIG_KEYS[key]
        try:
            values[key] = caster(value)
        except ValueError:
            raise InvalidConfigError(
                f"line {lineno}: cannot parse {value!r} as {caster.__name__} for {key!r}"
            ) from None

    synth_kwargs = {field: values.pop(key) for key, field in _SYNTH_FIELDS.items() if key in values}
    config = TrainConfig(**{k: v for k, v in values.items()})
    if synth_kwargs:
        config = replace(config, synthesis=replace(SynthesisConfig(), **synth_kwargs))
    config.validate()
    return config


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
