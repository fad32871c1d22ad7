"""Prompt decision transformers with language-model initialization, low-rank
adapters, and contrastive prompt regularization, on synthetic multi-task
control environments."""

from .autodiff import Tensor, backward, no_grad
from .data import InputSequence, NormStats, Prompt, TaskDataset, Trajectory
from .lora import LoraAdapter
from .model import ModelConfig, PromptDTModel
from .transformer import TransformerConfig, TransformerWeights

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "Trajectory",
    "Prompt",
    "InputSequence",
    "NormStats",
    "TaskDataset",
    "LoraAdapter",
    "ModelConfig",
    "PromptDTModel",
    "TransformerConfig",
    "TransformerWeights",
    "__version__",
]
