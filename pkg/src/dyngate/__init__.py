"""Prompt-conditioned dynamic gating for single-source domain generalization, at desk scale."""

from .data import DomainDataset, generate
from .errors import (DimensionError, DivergenceError, DyngateError, FormatError, ParseError,
                     UnknownDomainError, ValidationError)
from .losses import BoundSchedule, bound_loss
from .network import DynamicNet, NetworkConfig, count_macs, load_checkpoint, save_checkpoint
from .prompts import PromptBank
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BoundSchedule", "DimensionError", "DivergenceError", "DomainDataset", "DynamicNet", "DyngateError",
    "FormatError", "NetworkConfig", "ParseError", "PromptBank", "TrainConfig", "UnknownDomainError",
    "ValidationError", "bound_loss", "count_macs", "evaluate", "generate", "load_checkpoint",
    "save_checkpoint", "train",
]
