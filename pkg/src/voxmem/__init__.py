"""Memory-augmented single-view voxel reconstruction at desk scale."""

from .config import PipelineConfig, load_config
from .errors import (ConfigError, ContractError, DegenerateInputError, DimensionError, EmptyBankError,
                     EmptySurfaceError, FormatError, GenerationError, VoxmemError)
from .memory import MemoryBank
from .voxels import VoxelGrid

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "load_config", "MemoryBank", "VoxelGrid", "VoxmemError", "ConfigError",
           "ContractError", "DegenerateInputError", "DimensionError", "EmptyBankError",
           "EmptySurfaceError", "FormatError", "GenerationError"]
