"""Dual-stream graph-convolution + transformer gait emotion recognition in numpy."""
from .autodiff import GradCheckError, Parameter, ShapeError, Tensor, grad_check, no_grad
from .network import (CGTGait, ComplexityReport, ModelConfig, count_complexity, load_checkpoint,
                      save_checkpoint, total_loss)
from .skeleton import (EMOTIONS, DatasetError, GeneratorConfig, SkeletonSequence, augment,
                       compute_affective, extract_motion, generate_dataset, load_dataset, resample,
                       save_dataset)
from .trainer import EvalReport, TrainConfig, ablate, evaluate, train

__all__ = [
    "CGTGait", "ComplexityReport", "DatasetError", "EMOTIONS", "EvalReport", "GeneratorConfig",
    "GradCheckError", "ModelConfig", "Parameter", "ShapeError", "SkeletonSequence", "Tensor",
    "TrainConfig", "ablate", "augment", "compute_affective", "count_complexity", "evaluate",
    "extract_motion", "generate_dataset", "grad_check", "load_checkpoint", "load_dataset",
    "no_grad", "resample", "save_checkpoint", "save_dataset", "total_loss", "train",
]
__version__ = "0.1.0"
