"""Obstacle problems on the square ``(-1, 1)^2`` with advection ``beta = (1, 1)``."""

from __future__ import annotations

import math

import numpy as np

from ..entropy import LegendreMap
from ..mesh import SimplicialMesh, refine_uniform, structured_rectangle
from .base import VIProblem

BETA = np.array([1.0, 1.0])
JUNCTION = 9.0 / 20.0


def lambert_w_lower(x: float, tol: float = 1e-15, max_iter: int = 50) -> float:
    """Lower real branch ``W_{-1}(x)`` for ``-1/e <= x < 0`` by Newton's method."""
    if not (-1.0 / math.e - 1e-15 <= x < 0.0):
        raise ValueError(f"W_-1 is real only on [-1/e, 0), got {x}")
    if abs(x + 1.0 / math.e) < 1e-15:
        return -1.0
    w = math.log(-x) - math.log(-math.log(-x))
    for _ in range(max_iter):
        ew = math.exp(w)
        step = (w * ew - x) / (ew * (w + 1.0))
        w -= step
        if abs(step) <= tol * abs(w):
            break
    return w


def contact_radius() -> float:
    """Radius ``a`` of the coincidence disk, ``exp(W_{-1}(-1/(2e^2))/2 + 1)``."""
    return math.exp(lambert_w_lower(-1.0 / (2.0 * math.e**2)) / 2.0 + 1.0)


def _radius(x):
    return np.hypot(x[..., 0], x[..., 1])


def dome_obstacle(x):
    """``sqrt(1/4 - r^2)`` for ``r <= 9/20``, continued by its tangent line."""
    r = _radius(x)
    r0 = JUNCTION
    value = math.sqrt(0.25 - r0**2)
    slope = -r0 / value
    inner = np.sqrt(np.clip(0.25 - np.minimum(r, r0) ** 2, 0.0, None))
    return np.where(r <= r0, inner, value + slope * (r - r0))


def dome_obstacle_slope(r):
    """Radial derivative of :func:`dome_obstacle`."""
    r = np.asarray(r, dtype=float)
    r0 = JUNCTION
    rr = np.minimum(r, r0)
    return np.where(r <= r0, -rr / np.sqrt(0.25 - rr**2), -r0 / math.sqrt(0.25 - r0**2))


def circular_exact(x):
    a = contact_radius()
    Q = math.sqrt(0.25 - a * a) / math.log(a)
    r = _radius(x)
    outer = Q * np.log(np.maximum(r, 1e-300))
    return np.where(r > a, outer, dome_obstacle(x))


def circular_exact_grad(x):
    a = contact_radius()
    Q = math.sqrt(0.25 - a * a) / math.log(a)
    r = np.maximum(_radius(x), 1e-300)
    radial = np.where(r > a, Q / r, dome_obstacle_slope(r))
    return (radial / r)[..., None] * x


def square_mesh(nx: int, levels: int = 0, diagonal: str = "right") -> SimplicialMesh:
    mesh = structured_rectangle(nx, nx, ((-1.0, 1.0), (-1.0, 1.0)), diagonal)
    for _ in range(levels):
        mesh = refine_uniform(mesh)
    return mesh


def circular_obstacle_problem(mesh: SimplicialMesh | None = None, nx: int = 32, levels: int = 0) -> VIProblem:
    """Dome obstacle with a known free boundary ``r = a``; forcing ``f = beta . grad u*``."""
    mesh = mesh or square_mesh(nx, levels)

    def forcing(x):
        return circular_exact_grad(x) @ BETA

    sides = ("bottom", "right", "top", "left")
    return VIProblem(
        name="circular_obstacle",
        mesh=mesh,
        constraint=LegendreMap("lower", lower=dome_obstacle),
        kappa=np.eye(2),
        beta=BETA,
        c=None,
        f=forcing,
        dirichlet={s: circular_exact for s in sides},
        exact=circular_exact,
        exact_grad=circular_exact_grad,
        coef_degree=None,
        meta={"contact_radius": contact_radius()},
    )


def biactive_exact(x):
    s = np.maximum(x[..., 0], 0.0)
    return s**4


def biactive_exact_grad(x):
    s = np.maximum(x[..., 0], 0.0)
    return np.stack([4.0 * s**3, np.zeros_like(s)], axis=-1)


def biactive_forcing(x):
    """``-Lap u + beta.grad u`` for ``u = max(x, 0)^4``."""
    s = np.maximum(x[..., 0], 0.0)
    return -12.0 * s**2 + 4.0 * s**3


def biactive_problem(mesh: SimplicialMesh | None = None, nx: int = 32, levels: int = 0) -> VIProblem:
    """Solution ``x^4`` on ``x > 0`` and zero on the biactive half ``x < 0``; obstacle 0."""
    mesh = mesh or square_mesh(nx, levels)
    sides = ("bottom", "right", "top", "left")
    return VIProblem(
        name="biactive",
        mesh=mesh,
        constraint=LegendreMap("lower", lower=0.0),
        kappa=np.eye(2),
        beta=BETA,
        f=biactive_forcing,
        dirichlet={s: biactive_exact for s in sides},
        exact=biactive_exact,
        exact_grad=biactive_exact_grad,
        coef_degree=None,
    )
