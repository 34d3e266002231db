"""Text / point-cloud retrieval with Riemann local similarity, on a small numpy autodiff engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import RMARN, ModelConfig, batch_similarity, pair_similarity
from .numcore.kernels import backend as kernel_backend
from .objective import LossConfig, contrastive_loss
from .retrieval import RetrievalReport, recall_at_k

__version__ = "0.1.0"

__all__ = [
    "LossConfig",
    "ModelConfig",
    "RMARN",
    "RetrievalReport",
    "batch_similarity",
    "contrastive_loss",
    "kernel_backend",
    "load_checkpoint",
    "pair_similarity",
    "recall_at_k",
    "save_checkpoint",
]
