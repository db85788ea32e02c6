"""Conditional ViT for referred visual search, on a numpy autodiff core.

The query side embeds an image together with a condition token (a category
or an external vector) that selects which depicted object defines
similarity; the gallery side embeds simple product images unconditionally.
"""

__version__ = "0.1.0"

from condvit.autodiff import Tensor, backward, grad_check, no_grad, precision
from condvit.benchmark import BootstrapSpec, MetricReport, bootstrap_eval
from condvit.index import EmbeddingStore, GalleryIndex
from condvit.model import Categorical, CondViT, ExternalVector, ModelConfig, encode, preset
from condvit.trainer import TrainConfig, bidirectional_loss, infonce_half, train

__all__ = [
    "BootstrapSpec",
    "Categorical",
    "CondViT",
    "EmbeddingStore",
    "ExternalVector",
    "GalleryIndex",
    "MetricReport",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "bidirectional_loss",
    "bootstrap_eval",
    "encode",
    "grad_check",
    "infonce_half",
    "no_grad",
    "precision",
    "preset",
    "train",
]
