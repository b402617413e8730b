"""Block-reusing CTC-attention speech Transformer with adapter modules."""

from .config import DecodeSettings, ModelConfig, TrainConfig, resolve_preset
from .decode import decode_utterance
from .model import ModelParams, Vocabulary, build_model, count_params, encode
from .train import run_training, train_step

__all__ = [
    "DecodeSettings",
    "ModelConfig",
    "TrainConfig",
    "resolve_preset",
    "decode_utterance",
    "ModelParams",
    "Vocabulary",
    "build_model",
    "count_params",
    "encode",
    "run_training",
    "train_step",
]
