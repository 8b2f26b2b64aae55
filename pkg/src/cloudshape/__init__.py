"""Reconstruction of 2D cloud boundaries from multi-angle radiance data."""

from .forward import (BLOCKED, HIT, MISS, DetectorCircle, DetectorLine, MeasurementSet,
                      NoCloudError, SpeedParam, add_noise, detect_support, measure_graph,
                      measure_polar)
from .geometry import GraphCloud, PolarCloud, is_blocked, trace_ray_graph, trace_ray_polar
from .radiance import AlphaField, BetaProfile, DomainError, SunModel, solar_alpha

__all__ = [
    "AlphaField", "BetaProfile", "BLOCKED", "DetectorCircle", "DetectorLine", "DomainError",
    "GraphCloud", "HIT", "MISS", "MeasurementSet", "NoCloudError", "PolarCloud", "SpeedParam",
    "SunModel", "add_noise", "detect_support", "is_blocked", "measure_graph", "measure_polar",
    "solar_alpha", "trace_ray_graph", "trace_ray_polar",
]
