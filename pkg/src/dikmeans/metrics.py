"""One interface over the three sample-to-centroid measures.

euclidean is the plain squared L2 distance. affine_invariant runs the same
two-stage fit as deformation_invariant with the landmark stage disabled, so
both invariant measures share one code path and one warm-start discipline;
under a shared identity warm start the three are nested:
deformation_invariant <= affine_invariant <= euclidean.
"""

from __future__ import annotations

import enum
from dataclasses import replace

import numpy as np

from . import optim, warp
from .errors import DimensionMismatch


class MetricKind(enum.Enum):
    EUCLIDEAN = "euclidean"
    AFFINE_INVARIANT = "affine_invariant"
    DEFORMATION_INVARIANT = "deformation_invariant"


def effective_config(kind: MetricKind, config: optim.FitConfig) -> optim.FitConfig:
    """The fit budget a metric kind actually uses."""
    if kind is MetricKind.EUCLIDEAN:
        return replace(config, stage1_steps=0, stage2_steps=0)
    if kind is MetricKind.AFFINE_INVARIANT:
        return replace(config, stage2_steps=0)
    return config


def distance(kind: MetricKind, image, centroid, system, fit, config) -> float:
    """Sample-to-centroid distance under the chosen measure.

    The invariant kinds warm-start from (and update) the given fit; the
    euclidean kind touches nothing.
    """
    image = np.asarray(image, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    if image.shape != centroid.shape:
        raise DimensionMismatch(f"image shape {image.shape} != centroid shape {centroid.shape}")
    if kind is MetricKind.EUCLIDEAN:
        diff = image - centroid
        return float((diff * diff).sum())
    return optim.evaluate_distance(image, centroid, system, fit, effective_config(kind, config))


def warped_representation(kind: MetricKind, image, centroid, system, fit):
    """The warped sample at the fit's best landmarks (the raw sample for euclidean).

    This is what gets exported for external embedding and visualization
    tools: the version of the sample that the assignment actually compared
    against the centroid.
    """
    image = np.asarray(image, dtype=float)
    if kind is MetricKind.EUCLIDEAN or fit is None:
        return image.copy()
    return warp.warp_image(image, system, fit.target)
