"""Advection-diffusion in a channel with a semi-permeable cylinder ``u >= phi`` on its surface."""

from __future__ import annotations

import numpy as np

from ..entropy import LegendreMap
from ..mesh import SimplicialMesh
from .base import VIProblem
from .meshes import packaged_mesh

RADIUS = 0.3
#: mean of the parabolic inlet profile ``1 - y^2`` on ``(-1, 1)``
MEAN_SPEED = 2.0 / 3.0


def cylinder_flow(x, speed: float = MEAN_SPEED, radius: float = RADIUS):
    """Potential flow past a cylinder at the origin (divergence free, no normal flow on it)."""
    X, Y = x[..., 0], x[..., 1]
    r2 = np.maximum(X * X + Y * Y, 1e-300)
    a2 = radius * radius / (r2 * r2)
    return speed * np.stack([1.0 - a2 * (X * X - Y * Y), -2.0 * a2 * X * Y], axis=-1)


def semipermeable_problem(threshold: float, mesh: SimplicialMesh | None = None, diffusion: float = 0.04,
                          velocity=None, inlet: float = 1.0, walls: float = 0.0,
                          resolution: str = "coarse") -> VIProblem:
    """Channel ``(-1, 3) x (-1, 1)`` minus the disk of radius 0.3; trace constraint ``u >= threshold``.

    The concentration enters at ``inlet`` and is held at ``walls`` on the
    channel walls; the outlet has zero diffusive flux.  ``velocity`` defaults
    to :func:`cylinder_flow` and may be any callable of points.
    """
    mesh = mesh or packaged_mesh(f"channel_{resolution}")
    return VIProblem(
        name="semipermeable",
        mesh=mesh,
        constraint=LegendreMap("lower", lower=float(threshold)),
        kappa=diffusion * np.eye(2),
        beta=velocity or cylinder_flow,
        f=0.0,
        dirichlet={"inlet": inlet, "walls": walls},
        neumann={"outlet": 0.0},
        locus="semipermeable",
        coef_degree=None,
        meta={"threshold": float(threshold), "diffusion": diffusion},
    )
