"""Sparse-Gaussian occupancy estimation: differentiable splatting, a small
Gaussian transformer trained from 2D renderings, and voxelized output."""

__version__ = "0.1.0"

from . import diffcore
from .geometry import Camera, CameraRig, default_rig
from .heads import GaussianHeads, GaussianSet, TemporalModule
from .scenegen import Dataset, SceneConfig, TrajectoryConfig, generate_dataset
from .splat import rasterize, temporal_render
from .trainer import (ModelConfig, OccupancyModel, TrainConfig, Trainer,
                      evaluate_model)
from .transformer import GaussianTransformer, TransformerConfig
from .voxel import FREE, GridSpec, VoxelGrid, desk_grid, voxelize

__all__ = [
    "__version__", "diffcore", "Camera", "CameraRig", "default_rig",
    "GaussianHeads", "GaussianSet", "TemporalModule", "Dataset",
    "SceneConfig", "TrajectoryConfig", "generate_dataset", "rasterize",
    "temporal_render", "ModelConfig", "OccupancyModel", "TrainConfig",
    "Trainer", "evaluate_model", "GaussianTransformer", "TransformerConfig",
    "FREE", "GridSpec", "VoxelGrid", "desk_grid", "voxelize",
]
