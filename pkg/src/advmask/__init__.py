"""Adversarial face-mask synthesis against embedding matchers.

The pipeline: train a face matcher on an identity corpus, train a mask
generator whose additive perturbations defeat that matcher while
staying visually faithful, then score the result (and gradient-attack
baselines) under a verification protocol with a calibrated accept
threshold.
"""

from .baselines import AttackBudget, fgsm, pgd
from .data import (
    FaceDataset,
    Fold,
    PairProtocol,
    build_protocol,
    config_hash,
    denormalize,
    from_tensor,
    load_image,
    normalize,
    to_tensor,
)
from .errors import (
    AdvMaskError,
    CheckpointMismatchError,
    MalformedInputError,
    NotDifferentiableError,
    ProtocolInfeasibleError,
    ShapeMismatchError,
    TrainingFailedError,
)
from .evaluation import (
    AttackReport,
    ablation_suite,
    epsilon_sweep,
    evaluate_impersonation,
    evaluate_obfuscation,
    generate_attack_set,
    save_visualization,
    score_shift_report,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    gan_losses,
    identity_loss_impersonation,
    identity_loss_obfuscation,
    perturbation_loss,
    total_generator_loss,
)
from .matcher import (
    EmbeddingNet,
    MatcherConfig,
    MatcherHandle,
    calibrate_threshold,
    cosine,
    load_matcher,
    save_matcher,
    threshold_at_far,
    train_surrogate,
)
from .metrics import (
    mask_saliency,
    mse_psnr,
    roc_auc,
    ssim,
    success_rate_impersonation,
    success_rate_obfuscation,
)
from .networks import MaskGenerator, PatchDiscriminator, compose, load_module, save_module
from .toyfaces import generate_corpus
from .trainer import Trainer, TrainingConfig, sample_targets, train_generator

__version__ = "0.1.0"

__all__ = [
    "AdvMaskError",
    "AttackBudget",
    "AttackReport",
    "CheckpointMismatchError",
    "EmbeddingNet",
    "FaceDataset",
    "Fold",
    "LossBreakdown",
    "LossWeights",
    "MalformedInputError",
    "MaskGenerator",
    "MatcherConfig",
    "MatcherHandle",
    "NotDifferentiableError",
    "PairProtocol",
    "PatchDiscriminator",
    "ProtocolInfeasibleError",
    "ShapeMismatchError",
    "Trainer",
    "TrainingConfig",
    "TrainingFailedError",
    "ablation_suite",
    "build_protocol",
    "calibrate_threshold",
    "compose",
    "config_hash",
    "cosine",
    "denormalize",
    "epsilon_sweep",
    "evaluate_impersonation",
    "evaluate_obfuscation",
    "fgsm",
    "from_tensor",
    "gan_losses",
    "generate_attack_set",
    "generate_corpus",
    "identity_loss_impersonation",
    "identity_loss_obfuscation",
    "load_image",
    "load_matcher",
    "load_module",
    "mask_saliency",
    "mse_psnr",
    "normalize",
    "perturbation_loss",
    "pgd",
    "roc_auc",
    "sample_targets",
    "save_matcher",
    "save_module",
    "save_visualization",
    "score_shift_report",
    "ssim",
    "success_rate_impersonation",
    "success_rate_obfuscation",
    "threshold_at_far",
    "to_tensor",
    "total_generator_loss",
    "train_generator",
    "train_surrogate",
]
