"""Fast CPU decoding for attentional GRU translation models."""

from .estimator import BeamSearchTranslator
from .model import ModelSpec, generate_random_model, load_model, save_model

__all__ = ["BeamSearchTranslator", "ModelSpec", "generate_random_model", "load_model",
           "save_model"]
__version__ = "0.1.0"
