"""Hierarchical-context OOD detection over precomputed embedding features.

Per-category perceptual and spurious contexts are trained through a frozen
differentiable encoder against real ID features and perturbation-guided
spurious syntheses; inference multiplies perceptual similarities by a
spurious-vs-perceptual regularizer, and independently trained tasks merge by
context concatenation.
"""

from .core import (
    UNLABELED,
    LabeledFeatureSet,
    SyntheticSpec,
    concat_feature_sets,
    cosine,
    gen_synthetic,
    make_rng,
    normalize,
    normalize_rows,
)
from .encoder import (
    ContextPair,
    EncoderKind,
    EncoderParams,
    Perturbation,
    PerturbKind,
    build_identity,
    build_mean_pool_linear,
    encode,
    encode_grad,
    perturb_context,
    sample_perturbation,
)
from .errors import (
    BadMagicError,
    CtxoodError,
    DimensionMismatchError,
    EmptyBatchError,
    EmptySetError,
    EncoderMismatchError,
    InvalidConfigError,
    InvalidPositionError,
    InvalidSpecError,
    LabelOutOfRangeError,
    LengthMismatchError,
    ShapeMismatchError,
    TooFewPointsError,
    TruncatedFileError,
    UnknownDonorError,
    VersionUnsupportedError,
    ZeroVectorError,
)
from .extension import CurvePoint, incremental_eval, merge_models
from .inference import (
    BatchScores,
    ScoreReport,
    classify,
    ood_score,
    score,
    score_batch,
    zero_shot_batch,
    zero_shot_regularize,
)
from .io_formats import (
    load_config,
    parse_config,
    read_checkpoint,
    read_features,
    read_features_with_stats,
    write_checkpoint,
    write_features,
)
from .metrics import EvaluationResult, MetricsReport, accuracy, auroc, evaluate, fpr_at_tpr
from .state import ModelState, assert_cache_coherent, new_model_state
from .synthesis import (
    SynthesisConfig,
    guide_filter,
    knn_distances,
    sample_candidates,
    synthesize_spurious,
)
from .training import (
    ContextGradients,
    TrainConfig,
    context_tensors,
    cosine_lr,
    empirical_risk,
    loss_id,
    loss_id_words,
    loss_ood,
    loss_ood_words,
    ortho_penalty,
    ortho_penalty_words,
    sgd_step,
    text_features64,
    train_task,
)

__version__ = "0.1.0"
