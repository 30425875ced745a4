"""Universal visual anomaly detection with lightweight adapters on a frozen
vision-language backbone: zero-shot scoring via visual/textual adapters and
few-shot scoring via prompt-query comparison, trained once on a base
dataset and applied to new domains without fine-tuning.
"""

__version__ = "0.1.0"

from .backbone import (
    ClassEmbeddings,
    EncoderConfig,
    SyntheticBackbone,
    VisionFeatures,
    available_backends,
    create_backend,
    register_backend,
    restore_backend,
)
from .adapters import TextualAdapter, VisualAdapter, score_image, score_pixels
from .alignment import KERNEL_BACKEND, nearest_rows
from .checkpoint import Checkpoint
from .data import DatasetSpec, Sample, SyntheticSpec, generate_synthetic, load_and_resize, sample_prompts, scan
from .inference import Prediction, predict_batch, predict_few_shot, predict_zero_shot
from .metrics import EvalReport, PixelTruth, auroc, aupr, evaluate, f1max
from .prompt_query import (
    JointFeature,
    PromptBank,
    align,
    build_prompt_bank,
    global_score,
    joint_feature,
    segment,
)
from .training import (
    AdapterSet,
    TrainBatch,
    TrainConfig,
    classification_loss,
    dice_loss,
    fit,
    focal_loss,
    segmentation_loss,
    train_step,
)

__all__ = [
    "__version__",
    "AdapterSet",
    "Checkpoint",
    "ClassEmbeddings",
    "DatasetSpec",
    "EncoderConfig",
    "EvalReport",
    "JointFeature",
    "KERNEL_BACKEND",
    "PixelTruth",
    "Prediction",
    "PromptBank",
    "Sample",
    "SyntheticBackbone",
    "SyntheticSpec",
    "TextualAdapter",
    "TrainBatch",
    "TrainConfig",
    "VisionFeatures",
    "VisualAdapter",
    "align",
    "auroc",
    "aupr",
    "available_backends",
    "build_prompt_bank",
    "classification_loss",
    "create_backend",
    "dice_loss",
    "evaluate",
    "f1max",
    "fit",
    "focal_loss",
    "generate_synthetic",
    "global_score",
    "joint_feature",
    "load_and_resize",
    "nearest_rows",
    "predict_batch",
    "predict_few_shot",
    "predict_zero_shot",
    "register_backend",
    "restore_backend",
    "sample_prompts",
    "scan",
    "score_image",
    "score_pixels",
    "segment",
    "segmentation_loss",
    "train_step",
]
