"""Monte Carlo mixture low-rank adapters on a small numpy autodiff core."""

from .layer import LoraLinear, MixtureConfig, MixtureSpec, stochastic_estimate
from .models import build_model, init_base
from .samplers import NoiseBuffer, sample_dirichlet, sample_gaussian_matrix, sample_wishart
from .trainer import RunRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "LoraLinear",
    "MixtureConfig",
    "MixtureSpec",
    "NoiseBuffer",
    "RunRecord",
    "TrainConfig",
    "build_model",
    "evaluate",
    "init_base",
    "sample_dirichlet",
    "sample_gaussian_matrix",
    "sample_wishart",
    "stochastic_estimate",
    "train",
]
