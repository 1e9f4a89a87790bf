"""Convection-dominated flow past a cylinder with bounds ``0 <= u <= 1``."""

from __future__ import annotations

import numpy as np

from ..entropy import LegendreMap
from ..mesh import SimplicialMesh
from .base import VIProblem
from .meshes import packaged_mesh

FLOW = np.array([1.0, 0.0])


def hemker_problem(mesh: SimplicialMesh | None = None, diffusion: float = 1e-3, resolution: str = "medium") -> VIProblem:
    """``-eps Lap u + div(b u) = 0`` on ``(-3, 9) x (-3, 3)`` minus the unit disk.

    ``u = 0`` on the left side, ``u = 1`` on the circle and zero diffusive
    flux on the remaining sides.  Expects the tags ``left``, ``circle`` and
    ``outflow`` (as in the packaged meshes).
    """
    mesh = mesh or packaged_mesh(f"hemker_{resolution}")
    return VIProblem(
        name="hemker",
        mesh=mesh,
        constraint=LegendreMap("bilateral", lower=0.0, upper=1.0),
        kappa=diffusion * np.eye(2),
        beta=FLOW,
        c=None,
        f=0.0,
        dirichlet={"left": 0.0, "circle": 1.0},
        neumann={"outflow": 0.0},
        meta={"diffusion": diffusion},
    )
