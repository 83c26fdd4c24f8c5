"""Journey-aware sparse-attention generative recommender."""

__version__ = "0.1.0"

from .core import Behavior, Interaction, Item, UserSequence, merge_behaviors
from .jsa import JsaConfig
from .model import Model, ModelConfig

__all__ = [
    "Behavior",
    "Interaction",
    "Item",
    "UserSequence",
    "merge_behaviors",
    "JsaConfig",
    "Model",
    "ModelConfig",
    "__version__",
]
