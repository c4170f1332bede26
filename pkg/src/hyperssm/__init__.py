"""Hyperbolic sentence embeddings for taxonomies with a Mamba2-style encoder."""

from .geometry import ManifoldKind
from .encoder import EncoderConfig, HyperbolicEncoder, ManifoldConfig, SentenceEncoder
from .hierarchy import Taxonomy, generate_synthetic_tree, load_taxonomy
from .objectives import LossConfig
from .training import TrainConfig, build_model, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "HyperbolicEncoder", "LossConfig", "ManifoldConfig", "ManifoldKind",
    "SentenceEncoder", "Taxonomy", "TrainConfig", "build_model", "generate_synthetic_tree",
    "load_taxonomy", "train",
]
