"""Dual-supervised reverse-attention segmentation on a small numpy autograd engine."""
from .losses import LossSpec, make_background_mask, total_loss
from .metrics import MetricsReport, evaluate_dir
from .net import DSRARefiner, NetworkConfig, SegOutput, dsra_forward, init_params, pranet_v2_forward, predict_labels
from .synth import SynthSpec, generate, reference_dataset
from .tensor import Tape, Tensor
from .train import TrainConfig, ablate_losses, evaluate, gradcheck_model, train

__version__ = "0.1.0"

__all__ = [
    "DSRARefiner",
    "LossSpec",
    "MetricsReport",
    "NetworkConfig",
    "SegOutput",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "ablate_losses",
    "dsra_forward",
    "evaluate",
    "evaluate_dir",
    "generate",
    "gradcheck_model",
    "init_params",
    "make_background_mask",
    "pranet_v2_forward",
    "predict_labels",
    "reference_dataset",
    "total_loss",
    "train",
]
