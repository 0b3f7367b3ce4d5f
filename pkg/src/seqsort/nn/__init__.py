"""Numpy implementation of the classifier, its optimizer and checkpoints."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import ModelParams, backward, forward, init_params, layer_shapes, predict_proba, zero_params
from .optim import AdamState, CyclicLRSpec, adam_step, cyclic_lr

__all__ = [
    "AdamState", "Checkpoint", "CyclicLRSpec", "ModelParams", "adam_step", "backward", "cyclic_lr",
    "forward", "init_params", "layer_shapes", "load_checkpoint", "predict_proba", "save_checkpoint",
    "zero_params",
]
