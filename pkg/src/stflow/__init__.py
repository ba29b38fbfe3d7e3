"""Hierarchical flow matching for spatiotemporal event sequences."""

from .events import AffineMap, Batch, DomainSpec, EventSequence
from .masks import TokenMaskSet
from .model import ModelConfig, TrainedBundle, VelocityModel, load_checkpoint, save_checkpoint
from .ode import SolverConfig
from .simulate import HawkesParams, IntensityGrid, SelfCorrectingParams
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AffineMap", "Batch", "DomainSpec", "EventSequence", "TokenMaskSet",
    "ModelConfig", "TrainedBundle", "VelocityModel", "load_checkpoint",
    "save_checkpoint", "SolverConfig", "HawkesParams", "IntensityGrid",
    "SelfCorrectingParams", "TrainConfig", "fit", "__version__",
]
