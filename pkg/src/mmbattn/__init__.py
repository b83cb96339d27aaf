"""CTR prediction with max-mean and bit-wise attention (MMBAttn)."""

from .attention import MMBAttnConfig, apply_attention
from .autograd import Graph, Tensor, stable_sigmoid
from .data import Batch, FieldSchema, SynthSpec, Vocabulary
from .model import Model, TowerConfig, build
from .training import TrainConfig, auc, bce_loss, bce_with_logits, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "FieldSchema", "Graph", "MMBAttnConfig", "Model", "SynthSpec",
    "Tensor", "TowerConfig", "TrainConfig", "Vocabulary", "apply_attention",
    "auc", "bce_loss", "bce_with_logits", "build", "evaluate",
    "stable_sigmoid", "train", "__version__",
]
