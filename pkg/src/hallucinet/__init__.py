"""Training a network to stand in for a missing input modality.

A two-stream classifier is trained with both modalities, then a third stream
learns to reproduce the missing stream's softened outputs from the modality that
remains available at test time.
"""

from .losses import cross_entropy, gd_loss, hallucination_loss, kd_loss, kl_loss
from .pipeline import DistillationConfig, Metrics, run_full_pipeline
from .tensor import Tensor, backward, no_grad, tempered_softmax

__version__ = "0.1.0"

__all__ = [
    "DistillationConfig",
    "Metrics",
    "Tensor",
    "backward",
    "cross_entropy",
    "gd_loss",
    "hallucination_loss",
    "kd_loss",
    "kl_loss",
    "no_grad",
    "run_full_pipeline",
    "tempered_softmax",
]
