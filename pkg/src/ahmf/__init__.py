"""Multi-domain driver-attention prediction with hybrid working/long-term memory."""
from .model import AttentionModel, ModelConfig, toy_config

__all__ = ["AttentionModel", "ModelConfig", "toy_config"]
__version__ = "0.1.0"
