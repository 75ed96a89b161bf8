from .asr import CAUSAL, FULL_CONTEXT, Batch, EncoderOutput, HybridCSASR, collate
from .config import ConfigError, ModelConfig

__all__ = [
    "CAUSAL",
    "FULL_CONTEXT",
    "Batch",
    "ConfigError",
    "EncoderOutput",
    "HybridCSASR",
    "ModelConfig",
    "collate",
]
