"""Incomplete multimodal volumetric segmentation with convolutional encoders,
per-modality and cross-modality transformers, and a numpy autodiff engine."""
from .config import ModelConfig, PhantomConfig, RunConfig, TrainConfig, load_config
from .data import Sample, generate_phantom, make_dataset
from .estimator import MMFormerSegmenter
from .evaluation import DscTable, aggregate_by_missing_count, evaluate_subsets, format_report
from .modality import Modality, ModalityMask, enumerate_subsets
from .network import ModelOutput, init_params, mmformer_forward
from .tensor import Tensor, backward, no_grad
from .train import train_loop, train_step

__version__ = "0.1.0"

__all__ = [
    "DscTable",
    "MMFormerSegmenter",
    "Modality",
    "ModalityMask",
    "ModelConfig",
    "ModelOutput",
    "PhantomConfig",
    "RunConfig",
    "Sample",
    "Tensor",
    "TrainConfig",
    "aggregate_by_missing_count",
    "backward",
    "enumerate_subsets",
    "evaluate_subsets",
    "format_report",
    "generate_phantom",
    "init_params",
    "load_config",
    "make_dataset",
    "mmformer_forward",
    "no_grad",
    "train_loop",
    "train_step",
]
