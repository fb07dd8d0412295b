"""Multivariate probabilistic spatiotemporal forecasting on region graphs."""
from .dataset import STTensor, MinMaxSpec, generate_synthetic, load_csv
from .graph import RegionGraph, build_adjacency, chebyshev_basis, diffusion_operators
from .model import ModelConfig, Forecaster, build_variant
from .mpp import DistForecast
from .training import Checkpoint, TrainConfig, prepare, train

__version__ = "0.1.0"

__all__ = [
    "STTensor", "MinMaxSpec", "generate_synthetic", "load_csv",
    "RegionGraph", "build_adjacency", "chebyshev_basis", "diffusion_operators",
    "ModelConfig", "Forecaster", "build_variant", "DistForecast",
    "Checkpoint", "TrainConfig", "prepare", "train",
]
