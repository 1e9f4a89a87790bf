"""Benchmark variational inequalities."""

from .base import VIProblem
from .dam import compatibility, dam_config, dam_mesh, dam_problem, free_surface_extract, secant_discharge
from .hemker import hemker_problem
from .heston import heston_mesh, heston_problem, price_american_put
from .meshes import available_meshes, packaged_mesh
from .obstacle import biactive_problem, circular_obstacle_problem, contact_radius, square_mesh
from .semipermeable import cylinder_flow, semipermeable_problem

#: name -> one-line description
PROBLEMS = {
    "circular_obstacle": "dome obstacle on (-1,1)^2 with advection (1,1); exact solution known",
    "biactive": "u = max(x,0)^4 with a biactive half-square; exact solution known",
    "heston": "American put under Heston dynamics, backward Euler in time",
    "semipermeable": "channel flow past a cylinder whose surface enforces u >= threshold",
    "hemker": "convection-dominated flow past a cylinder with bounds 0 <= u <= 1",
    "dam": "dam with a sloping wall; discharge found by a secant iteration",
}

__all__ = [
    "PROBLEMS", "VIProblem", "available_meshes", "biactive_problem", "circular_obstacle_problem", "compatibility",
    "contact_radius", "cylinder_flow", "dam_config", "dam_mesh", "dam_problem", "free_surface_extract",
    "hemker_problem", "heston_mesh", "heston_problem", "packaged_mesh", "price_american_put", "secant_discharge",
    "semipermeable_problem", "square_mesh",
]
