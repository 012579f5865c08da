"""Convolutional, generative and super neuron layers for compact image denoisers."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    LayerSpec,
    LayerState,
    NetworkConfig,
    build_network,
    count_params,
    init_network,
    layer_backward,
    layer_forward,
    network_backward,
    network_forward,
)
from .pipeline import NoiseSpec, PatchSet, add_awgn, denoise_image, evaluate, psnr
from .tensor import ShiftPair
from .training import TrainPlan, grad_check, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "LayerSpec", "LayerState", "NetworkConfig", "build_network", "count_params", "init_network",
    "layer_backward", "layer_forward", "network_backward", "network_forward",
    "NoiseSpec", "PatchSet", "add_awgn", "denoise_image", "evaluate", "psnr",
    "ShiftPair", "TrainPlan", "grad_check", "train",
]
