"""Audio-driven 3DMM expression generation with region-disentangled diffusion."""

from paramtalk.types import (
    AudioFeatureSequence,
    ExpressionSequence,
    LatentSequence,
    NoiseSchedule,
    NormStats,
    SubspacePartition,
    denormalize,
    linear_schedule,
    normalize,
)

__version__ = "0.1.0"

__all__ = [
    "AudioFeatureSequence",
    "ExpressionSequence",
    "LatentSequence",
    "NoiseSchedule",
    "NormStats",
    "SubspacePartition",
    "denormalize",
    "linear_schedule",
    "normalize",
]
