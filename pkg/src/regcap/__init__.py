"""Regional-attention image captioning on a numpy autodiff core."""

from .beam import DecodeConfig, beam_search, exhaustive_decode, greedy_decode
from .decoder import CaptionDecoder, DecoderConfig
from .encoder import EncoderConfig, FeatureGrid, SwinEncoder
from .errors import (ConfigError, ContractError, DataError, LeakageError, LoadError, MetricError, NumericError,
                     RegcapError, ShapeError, TrainingError)
from .model import CaptionModel, ModelConfig
from .regional import RegionalAttention, RegionalConfig, regional_forward
from .tensor import Parameter, Rng, Tensor, backward, grad_check, no_grad
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "CaptionDecoder", "CaptionModel", "ConfigError", "ContractError", "DataError", "DecodeConfig", "DecoderConfig",
    "EncoderConfig", "FeatureGrid", "LeakageError", "LoadError", "MetricError", "ModelConfig", "NumericError",
    "Parameter", "RegcapError", "RegionalAttention", "RegionalConfig", "Rng", "ShapeError", "SwinEncoder", "Tensor",
    "TrainConfig", "TrainingError", "backward", "beam_search", "exhaustive_decode", "grad_check", "greedy_decode",
    "no_grad", "regional_forward", "train_loop",
]
