"""Disentangled 3D lesion segmentation on volumetric scans."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DataError,
    DsegError,
    FormatError,
    LoadError,
    NumericError,
    PlacementError,
    SchedulingError,
    ValidationError,
)

__all__ = [
    "ConfigurationError",
    "DataError",
    "DsegError",
    "FormatError",
    "LoadError",
    "NumericError",
    "PlacementError",
    "SchedulingError",
    "ValidationError",
    "__version__",
]
