"""Seepage through a dam with a sloping upstream wall (Baiocchi potential).

The domain is the quadrilateral ``O A B C`` with ``O = (0, 0)``,
``A = (a_r, 0)``, ``B = (a_r, h_l)`` and ``C = (a_l, h_l)``; the wall ``OC``
carries an oblique-derivative condition and the remaining boundary Dirichlet
data depending on the unknown discharge ``q``.  The discharge is fixed by a
secant iteration on a compatibility functional evaluated near ``C``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..conforming import PGConfig, run
from ..entropy import LegendreMap
from ..fem.spaces import barycentric_gradients
from ..mesh import SimplicialMesh, map_vertices, retag, structured_rectangle
from .base import VIProblem

log = logging.getLogger(__name__)

A_L, H_L, A_R, H_R = 1.0, 1.0, 3.0, 0.0

#: boundary labels after shearing the unit square onto ``OABC``
SIDE_NAMES = {"bottom": "base", "right": "outlet", "top": "crest", "left": "sloping_wall"}


def dam_mesh(nx: int = 50, ny: int = 20, diagonal: str = "left", a_l: float = A_L, h_l: float = H_L,
             a_r: float = A_R) -> SimplicialMesh:
    """Structured triangulation of ``OABC``.

    The unit square ``(s, t)`` is mapped by ``x = a_l t + s (a_r - a_l t)``,
    ``y = h_l t`` so rows stay horizontal and the left column follows ``OC``.
    """
    square = structured_rectangle(nx, ny, ((0.0, 1.0), (0.0, 1.0)), diagonal)

    def shear(v):
        s, t = v[:, 0], v[:, 1]
        return np.column_stack([a_l * t + s * (a_r - a_l * t), h_l * t])

    return retag(map_vertices(square, shear), lambda old, mid: SIDE_NAMES[old])


def dam_problem(q: float, mesh: SimplicialMesh | None = None, nx: int = 50, ny: int = 20,
                a_l: float = A_L, h_l: float = H_L, a_r: float = A_R, h_r: float = H_R) -> VIProblem:
    """Non-symmetric obstacle problem ``u >= 0`` for discharge ``q``."""
    if q < 0:
        raise ValueError("discharge must be nonnegative")
    mesh = mesh or dam_mesh(nx, ny, a_l=a_l, h_l=h_l, a_r=a_r)
    slope_factor = math.hypot(a_l, h_l) / a_l

    def base(x):
        return -q * (x[..., 0] - a_r) + 0.5 * h_r**2

    def outlet(x):
        y = x[..., 1]
        return np.where(y <= h_r, 0.5 * (h_r - y) ** 2, 0.0)

    # oblique condition d_n u + (h_l/a_l) d_tau u = slope_factor (y - h_l); the
    # tangential part is carried by the skew form, the rest is this load
    def wall(x):
        return slope_factor * (x[..., 1] - h_l)

    return VIProblem(
        name="dam",
        mesh=mesh,
        constraint=LegendreMap("lower", lower=0.0),
        kappa=np.eye(2),
        f=-1.0,
        dirichlet={"base": base, "outlet": outlet, "crest": 0.0},
        neumann={"sloping_wall": wall},
        skew=h_l / a_l,
        coef_degree=None,
        meta={"q": q, "a_l": a_l, "h_l": h_l, "a_r": a_r, "h_r": h_r},
    )


def dam_config(**overrides) -> PGConfig:
    """``alpha_k = 1.2^k`` with ``psi_0 = 0`` and a ``1e-10`` successive-difference stop."""
    opts = dict(alpha0=1.2, growth=1.2, stop_tol=1e-10, max_prox_iters=200)
    opts.update(overrides)
    return PGConfig(**opts)


def p1_gradient_at(mesh: SimplicialMesh, u_vertex: np.ndarray, point) -> np.ndarray:
    """Gradient of the piecewise-linear part of ``u`` in the cell containing ``point``."""
    cell = int(mesh.locate(np.atleast_2d(point))[0])
    if cell < 0:
        raise ValueError(f"point {point} lies outside the mesh")
    grads = barycentric_gradients(mesh)[cell]
    return u_vertex[mesh.cells[cell]] @ grads


def compatibility(mesh: SimplicialMesh, u: np.ndarray, h0: float, a_l: float = A_L, h_l: float = H_L) -> float:
    """``-h0 (d_y u(a_l, h_l - h0/2) + h0/2)`` from the P1 part of ``u``."""
    gy = p1_gradient_at(mesh, u[: mesh.n_vertices], (a_l, h_l - 0.5 * h0))[1]
    return -h0 * (gy + 0.5 * h0)


@dataclass
class SecantResult:
    rows: list = field(default_factory=list)
    converged: bool = False
    solution: np.ndarray | None = None
    mesh: SimplicialMesh | None = None

    @property
    def discharge(self) -> float:
        return self.rows[-1]["q"]


class SecantDivergence(RuntimeError):
    """``|f(q)|`` grew over three consecutive outer iterations."""


def solve_for_discharge(q: float, mesh: SimplicialMesh, config: PGConfig | None = None, h0: float = 0.05):
    """Inner proximal solve; returns ``(f(q), inner iterations, u)``."""
    problem = dam_problem(q, mesh)
    res = run(problem, config or dam_config())
    if not res.converged:
        log.warning("dam inner solve for q=%.6g hit the iteration limit", q)
    fq = compatibility(mesh, res.state.u, h0, problem.meta["a_l"], problem.meta["h_l"])
    return fq, len(res.log), res.state.u


def secant_discharge(mesh: SimplicialMesh | None = None, h0: float = 0.05, seeds=(0.25, 0.30),
                     tol: float = 1e-6, max_outer: int = 10, config: PGConfig | None = None,
                     callback=None) -> SecantResult:
    """Secant iteration on ``f(q) = 0`` starting from two seed discharges.

    Stops when ``|f(q)| <= tol`` (after both seeds) or when successive
    discharges agree to ``tol``.  Raises :class:`SecantDivergence` if
    ``|f|`` increases three times in a row.
    """
    mesh = mesh or dam_mesh()
    out = SecantResult(mesh=mesh)
    qs, fs = [], []
    growth = 0
    q = seeds[0]
    for r in range(max_outer):
        if r == 1:
            q = seeds[1]
        elif r >= 2:
            denom = fs[-1] - fs[-2]
            if denom == 0.0:
                raise SecantDivergence("secant slope vanished")
            q = qs[-1] - (qs[-1] - qs[-2]) / denom * fs[-1]
        fq, inner, u = solve_for_discharge(q, mesh, config, h0)
        row = {"r": r, "q": q, "f_q": fq, "inner_iters": inner}
        out.rows.append(row)
        out.solution = u
        if callback is not None:
            callback(row)
        log.info("secant r=%d q=%.6f f=%.3e inner=%d", r, q, fq, inner)
        if fs and abs(fq) > abs(fs[-1]):
            growth += 1
            if growth >= 3:
                raise SecantDivergence(f"|f(q)| increased three times in a row (last q={q:.6g})")
        else:
            growth = 0
        qs.append(q)
        fs.append(fq)
        if r >= 1 and (abs(fq) <= tol or abs(qs[-1] - qs[-2]) <= tol):
            out.converged = True
            break
    return out


def free_surface_extract(mesh: SimplicialMesh, u_vertex: np.ndarray, level: float = 1e-4) -> np.ndarray:
    """Contour ``u = level`` of the piecewise-linear field by marching over edges.

    Returns the crossing points sorted by ``x`` (one per crossed edge); the
    result is empty when ``level`` exceeds the maximum of ``u``.
    """
    if not (np.isfinite(level) and level > 0):
        raise ValueError(f"contour level must be a positive number, got {level}")
    u = np.asarray(u_vertex, dtype=float)[: mesh.n_vertices] - level
    a, b = mesh.facets[:, 0], mesh.facets[:, 1]
    ua, ub = u[a], u[b]
    crossing = (ua * ub < 0) | ((ua == 0) & (ub != 0))
    t = ua[crossing] / (ua[crossing] - ub[crossing])
    pts = mesh.vertices[a[crossing]] + t[:, None] * (mesh.vertices[b[crossing]] - mesh.vertices[a[crossing]])
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


def is_monotone_nonincreasing(profile: np.ndarray, slack: float) -> bool:
    """``y`` never rises by more than ``slack`` as ``x`` increases."""
    if len(profile) < 2:
        return True
    order = np.argsort(profile[:, 0])
    y = profile[order, 1]
    running_min = np.minimum.accumulate(y)
    return bool(np.all(y - running_min <= slack))
