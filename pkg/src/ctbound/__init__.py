"""Boundary detection and denoising for photon-limited images.

Every overlapping patch is described by a junction (a vertex, three edge
rays and three wedge colors).  A CNN predicts each patch's junction from its
pixels, a transformer jointly refines all junctions of the image, and the
per-patch renders are averaged into a global boundary map and a denoised
color map.  A direct per-patch solver serves as an oracle and baseline.
"""
from .estimators import CTBound, DirectFoJ, InitStage, RefineStage
from .exceptions import (ConfigurationError, CTBoundError, DimensionError, ImageIOError,
                         InputError, InvalidParameterError, NumericError, TrainingError)
from .foj import JunctionParams, ParamsGrid, PatchGridSpec
from .pipeline import InferenceResult, infer

__version__ = "0.1.0"

__all__ = [
    "CTBound", "DirectFoJ", "InitStage", "RefineStage",
    "CTBoundError", "ConfigurationError", "DimensionError", "ImageIOError", "InputError",
    "InvalidParameterError", "NumericError", "TrainingError",
    "JunctionParams", "ParamsGrid", "PatchGridSpec", "InferenceResult", "infer",
]
