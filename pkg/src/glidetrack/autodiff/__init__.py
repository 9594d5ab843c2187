"""Minimal reverse-mode autodiff used to train the segmentation model."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import LSTMCell, Params, lstm_cell
from .optim import Adam, adam_step, sgd_step
from .tensor import Tensor, as_tensor

__all__ = ["ops", "Tensor", "as_tensor", "Params", "LSTMCell", "lstm_cell", "Adam", "adam_step",
           "sgd_step", "save_checkpoint", "load_checkpoint"]
