"""Tropical-geometry tools for hard and soft attention."""

__version__ = "0.1.0"

from .trop_core import (
    BOTTOM,
    DOMINANCE_MASS,
    TIE_TOL,
    ZERO_TEMP,
    Temperature,
    TropicalPolynomial,
    eval_trop_poly,
    lse,
    lse_add,
    trop_add,
    trop_mul,
)
from .polytope import (
    Polytope,
    convex_hull,
    construction_region_count,
    minkowski_sum,
    minkowski_vertex_upper_bound,
    region_lower_bound,
    region_upper_bound,
    zaslavsky_regions,
)
from .attention import HeadData, hard_routing, log_lifted_output, power_voronoi_membership, soft_attention
from .census import BlockLayer, BlockNetwork, build_lower_bound_net, forward, monte_carlo_census
from .stability import StabilityReport, certify

__all__ = [
    "BOTTOM", "DOMINANCE_MASS", "TIE_TOL", "ZERO_TEMP", "Temperature", "TropicalPolynomial",
    "eval_trop_poly", "lse", "lse_add", "trop_add", "trop_mul",
    "Polytope", "convex_hull", "construction_region_count", "minkowski_sum",
    "minkowski_vertex_upper_bound", "region_lower_bound", "region_upper_bound", "zaslavsky_regions",
    "HeadData", "hard_routing", "log_lifted_output", "power_voronoi_membership", "soft_attention",
    "BlockLayer", "BlockNetwork", "build_lower_bound_net", "forward", "monte_carlo_census",
    "StabilityReport", "certify",
]
