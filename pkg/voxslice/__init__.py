"""
voxslice: vertical-slice fusion for voxel semantic occupancy at desk scale.

    from voxslice.config import ExperimentConfig
    from voxslice.synthscene import dataset
    from voxslice.pipeline import train

    cfg = ExperimentConfig().validate()
    train_data, val_data = dataset(cfg.scene, 8, 2)
    result = train(cfg.model, cfg.train, train_data, val_data, cfg.loss)
"""

from voxslice.errors import (
    CodecError,
    ConfigError,
    DivergenceError,
    ExitCode,
    GenerationError,
    GradcheckError,
    ShapeError,
    StateError,
    ValidationError,
    VoxSliceError,
)
from voxslice.tensor import PlaneProfile, Tape, VoxelTensor

__version__ = "0.1.0"

__all__ = [
    "CodecError",
    "ConfigError",
    "DivergenceError",
    "ExitCode",
    "GenerationError",
    "GradcheckError",
    "PlaneProfile",
    "ShapeError",
    "StateError",
    "Tape",
    "ValidationError",
    "VoxSliceError",
    "VoxelTensor",
]
