"""Identification diagnostics for agent-based models viewed as Markov chains."""

__version__ = "0.1.0"

from .dgp import ModelSpec, ParamVector, SimConfig, Trajectory, derive, replicate, simulate
from .errors import (AbmIdentError, BoundsError, CapabilityError, ConfigError, MultipleStationaryError,
                     NumericalError, ShapeError, StationarityError)
from .models import MODELS, get_model
from .moments import MomentSpec, MomentVector, ergodicity_test, pooled, pooled_moments, raw_moments
from .smd import GridSpec, IdentReport, ObjectiveSurface, Thresholds, WeightMatrix, classify, find_minima, identify, sweep

__all__ = [
    "ModelSpec", "ParamVector", "SimConfig", "Trajectory", "derive", "replicate", "simulate",
    "AbmIdentError", "BoundsError", "CapabilityError", "ConfigError", "MultipleStationaryError",
    "NumericalError", "ShapeError", "StationarityError", "MODELS", "get_model", "MomentSpec",
    "MomentVector", "ergodicity_test", "pooled", "pooled_moments", "raw_moments", "GridSpec",
    "IdentReport", "ObjectiveSurface", "Thresholds", "WeightMatrix", "classify", "find_minima",
    "identify", "sweep",
]
