"""Tensor core: reverse-mode autodiff, Adam, gradient checks, checkpoints."""

from . import ops
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import GradCheckReport, check_function, grad_check
from .module import Module
from .optim import Adam, AdamState, adam_step
from .tensor import EPS, AttrError, BackwardError, ShapeError, Tape, Tensor, backward

__all__ = [
    "ops", "Tensor", "Tape", "backward", "EPS", "ShapeError", "AttrError", "BackwardError",
    "Module", "Adam", "AdamState", "adam_step", "grad_check", "check_function",
    "GradCheckReport", "save_arrays", "load_arrays", "CheckpointError",
]
