from .specs import SystemSpec
from .lorenz import lorenz63_rhs, rk4_step
from .kolmogorov import KolmogorovSolver
from .dataset import (
    TrajectoryDataset,
    generate_dataset,
    save_dataset,
    load_dataset,
    DatasetIOError,
    DatasetFormatError,
    DatasetVersionError,
    DatasetChecksumError,
)

__all__ = [
    "SystemSpec",
    "lorenz63_rhs",
    "rk4_step",
    "KolmogorovSolver",
    "TrajectoryDataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "DatasetIOError",
    "DatasetFormatError",
    "DatasetVersionError",
    "DatasetChecksumError",
]
