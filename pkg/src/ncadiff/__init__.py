"""Diffusion-based image segmentation with NCA noise predictors."""

from .config import RunConfig, parse_config, serialize_config
from .diffusion import NoiseSchedule, make_schedule, p_step, predict_x0, q_sample, reverse_chain
from .models import ModelConfig, ModelParams, parameter_count, predict_noise
from .rng import RngStream
from .tensor import Tensor, Tape, backward, set_default_dtype

__all__ = [
    "RunConfig", "parse_config", "serialize_config",
    "NoiseSchedule", "make_schedule", "p_step", "predict_x0", "q_sample", "reverse_chain",
    "ModelConfig", "ModelParams", "parameter_count", "predict_noise",
    "RngStream", "Tensor", "Tape", "backward", "set_default_dtype",
]

__version__ = "0.1.0"
