"""Deformation-invariant K-means: clustering images up to smooth warps.

The distance between a sample and a centroid is the best squared residual
of a landmark-parametrized warp of the sample, so cluster assignment
ignores smooth deformations instead of penalizing them. The package
provides the spline machinery, the warp renderer with analytic gradients,
the two-stage fitting optimizer, the Lloyd-style training loop, evaluation
by optimal cluster-label matching, synthetic benchmark generators, and a
command-line front end (``dikm``).
"""

from . import cluster, data, engine, evaluate, metrics, optim, tps, warp
from .errors import (
    BadCheckpoint,
    BadMagic,
    CountMismatch,
    DikmeansError,
    DimensionMismatch,
    EmptyClass,
    EmptyInput,
    InsufficientData,
    LabelOutOfRange,
    SingularSystem,
    TruncatedFile,
    UnreadableImage,
)
from .metrics import MetricKind
from .optim import FitConfig, WarpFit

__version__ = "0.1.0"

__all__ = [
    "cluster",
    "data",
    "engine",
    "evaluate",
    "metrics",
    "optim",
    "tps",
    "warp",
    "MetricKind",
    "FitConfig",
    "WarpFit",
    "DikmeansError",
    "DimensionMismatch",
    "SingularSystem",
    "InsufficientData",
    "LabelOutOfRange",
    "EmptyInput",
    "BadMagic",
    "TruncatedFile",
    "CountMismatch",
    "UnreadableImage",
    "EmptyClass",
    "BadCheckpoint",
]
