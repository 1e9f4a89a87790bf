"""Spaces, quadrature, assembly and sparse solves."""

from .assembly import assemble_conforming_A, assemble_load, assemble_mass, h1_seminorm, l2_norm
from .quadrature import line_rule, triangle_rule
from .solve import Condensation, SingularSystemError, solve_sparse, static_condense
from .spaces import DiscreteSpace

__all__ = [
    "Condensation",
    "DiscreteSpace",
    "SingularSystemError",
    "assemble_conforming_A",
    "assemble_load",
    "assemble_mass",
    "h1_seminorm",
    "l2_norm",
    "line_rule",
    "solve_sparse",
    "static_condense",
    "triangle_rule",
]
