"""Interaction-aware human-object image composition, desk scale."""

__version__ = "0.1.0"

from .errors import PipelineError
from .geometry import Box, KeypointSet, Mask
from .losses import LossCoefficients, LossReport

__all__ = [
    "Box",
    "KeypointSet",
    "LossCoefficients",
    "LossReport",
    "Mask",
    "PipelineError",
    "__version__",
]
