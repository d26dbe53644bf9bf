"""Self-aware composition transformer: gated two-stream attention for dense captioning, on a small numpy autodiff core."""

from .composer import ComposerConfig, encode
from .data import SyntheticTaskSpec, generate_synthetic, load_dataset
from .metrics import MetricsReport, bleu
from .model import ModelConfig, SACTModel
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ComposerConfig",
    "MetricsReport",
    "ModelConfig",
    "SACTModel",
    "SyntheticTaskSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "bleu",
    "encode",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "no_grad",
    "train",
]
