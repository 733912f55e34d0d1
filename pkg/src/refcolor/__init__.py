"""Reference-based sketch colorization with a toy latent diffusion stack.

A sketch provides structure and a reference image provides color through a
token-set condition that can be edited zero-shot with weighted text inputs
before sampling.
"""

__version__ = "0.1.0"

from .errors import (DataError, DependencyError, ParameterError, ShapeError,
                     TrainingError)
from .latents import LatentTensor
from .schedules import NoiseSchedule, build_karras_sigmas, build_vp_schedule, q_sample
from .tokens import TextEmbedding, TokenSet, correlation
from .manipulation import (GlobalStep, LocalStep, StepSpec, compute_d, compute_m,
                           compute_omega, dscale, manipulate_global, manipulate_local)
from .sampler import SamplerConfig, colorize, load_pipeline

__all__ = [
    "DataError", "DependencyError", "ParameterError", "ShapeError", "TrainingError",
    "LatentTensor", "NoiseSchedule", "build_karras_sigmas", "build_vp_schedule",
    "q_sample", "TextEmbedding", "TokenSet", "correlation", "GlobalStep", "LocalStep",
    "StepSpec", "compute_d", "compute_m", "compute_omega", "dscale",
    "manipulate_global", "manipulate_local", "SamplerConfig", "colorize",
    "load_pipeline",
]
