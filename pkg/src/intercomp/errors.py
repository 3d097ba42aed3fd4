"""Shared exception hierarchy.

Everything raised on purpose by this package derives from PipelineError so
callers (and the CLI) can distinguish "the pipeline rejected your input or
hit a modeled failure" from genuine bugs.
"""


class PipelineError(Exception):
    """Base class for every intentional failure in this package."""


class GeometryError(PipelineError):
    """Invalid geometric value (box coordinates, mask contents, keypoints)."""


class DimensionError(GeometryError):
    """Non-positive or mismatched raster dimensions."""


class EmptyRegionError(GeometryError):
    """An operation needed a non-empty pixel region and got none."""


class ValidationError(PipelineError):
    """A value violates a documented precondition."""


class ShapeError(ValidationError):
    """Array/tensor shapes are incompatible."""


class ParameterError(ValidationError):
    """A scalar parameter is outside its allowed range."""


class ConfigurationError(PipelineError):
    """Inconsistent or unknown configuration."""


class ProtocolError(PipelineError):
    """The region-proposal dialogue failed after exhausting its attempts.

    ``stage`` names the first stage that could not be completed; ``raw``
    carries the last raw reply for debugging.
    """

    def __init__(self, message, stage=None, raw=None):
        super().__init__(message)
        self.stage = stage
        self.raw = raw


class DegenerateBoxError(ProtocolError):
    """A parsed box collapsed to zero width or height after clamping."""


class EmptyObjectError(PipelineError):
    """Foreground segmentation produced an empty matte."""


class DegenerateFeatureError(PipelineError):
    """A feature vector had (near) zero norm, so cosine similarity is undefined."""


class EstimationError(PipelineError):
    """A perception backend (pose estimator, feature extractor) failed."""


class NumericError(PipelineError):
    """A computed quantity was NaN or infinite where finiteness is required."""


class GenerationError(PipelineError):
    """Synthetic scene construction produced an unusable sample."""


class EmptyComplementError(PipelineError):
    """A background metric had no pixels left outside the interaction region."""
