"""Shape-regulated self-training for semi-supervised landmark detection.

A PCA statistical shape model regulates pseudo labels of unlabeled samples,
and a region attention loss trains a small differentiable heatmap backbone
through a pre-train / self-train / fine-tune protocol.
"""

__version__ = "0.1.0"

from .errors import (AllSamplesSkipped, DegenerateSample, DegenerateShape,
                     InsufficientData, SampleSizeOutOfRange, ShapeMismatch,
                     ShapeRegError, ZeroVariance)
from .geometry import (LandmarkSet, SimilarityTransform, apply_transform,
                       flatten, generalized_procrustes, procrustes_align,
                       unflatten)
from .heatmap import (Heatmap, decode, decode_batch, l1_coordinate_loss,
                      region_attention_loss, sample_offsets)
from .pipeline import (Ablation, AugmentConfig, Dataset, Metrics, TrainConfig,
                       TrainState, augment, evaluate, finetune, init_state,
                       pretrain, run_training, self_train)
from .regulation import Branch, PseudoLabel, clamp_coefficients, regulate
from .shape_model import (ShapeCoefficients, ShapeModel, build_shape_model,
                          load_model, project, reconstruct, save_model,
                          shapiro_wilk)
from .synth import GeneratorSpec, corrupt_predictions, generate

__all__ = [
    "Ablation", "AllSamplesSkipped", "AugmentConfig", "Branch", "Dataset",
    "DegenerateSample", "DegenerateShape", "GeneratorSpec", "Heatmap",
    "InsufficientData", "LandmarkSet", "Metrics", "PseudoLabel",
    "SampleSizeOutOfRange", "ShapeCoefficients", "ShapeMismatch", "ShapeModel",
    "ShapeRegError", "SimilarityTransform", "TrainConfig", "TrainState",
    "ZeroVariance", "apply_transform", "augment", "build_shape_model",
    "clamp_coefficients", "corrupt_predictions", "decode", "decode_batch",
    "evaluate", "finetune", "flatten", "generalized_procrustes", "generate",
    "init_state", "l1_coordinate_loss", "load_model", "pretrain",
    "procrustes_align", "project", "reconstruct", "region_attention_loss",
    "regulate", "run_training", "sample_offsets", "save_model", "self_train",
    "shapiro_wilk", "unflatten",
]
