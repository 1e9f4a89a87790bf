"""Broken Raviart-Thomas fields in a scaled monomial basis.

Since the flux space carries no inter-element continuity, each cell may use
any basis of ``RT_p(T) = P_p^2 + x P~_p``.  We use monomials in the scaled
coordinate ``xi = (x - x_T) / s_T`` (``x_T`` the centroid, ``s_T`` the cell
diameter), which keeps local mass matrices well conditioned and needs no
Piola map:

* ``RT0``: ``(1, 0), (0, 1), (xi1, xi2)``
* ``RT1``: ``(1, 0), (0, 1), (xi1, 0), (xi2, 0), (0, xi1), (0, xi2),
  (xi1^2, xi1 xi2), (xi1 xi2, xi2^2)``
"""

from __future__ import annotations

import numpy as np

from ..mesh import SimplicialMesh

RT_DIM = {0: 3, 1: 8}


def cell_frames(mesh: SimplicialMesh) -> tuple[np.ndarray, np.ndarray]:
    """Centroids ``(T, 2)`` and scaling lengths ``(T,)`` of every cell."""
    return mesh.centroids, mesh.cell_diameters()


def rt_basis(order: int, x: np.ndarray, centers: np.ndarray, scales: np.ndarray):
    """Values ``(..., nloc, 2)`` and divergences ``(..., nloc)`` at points ``x``.

    ``x`` has shape ``(T, nq, 2)``; ``centers``/``scales`` are per-cell.
    """
    if order not in RT_DIM:
        raise ValueError(f"RT order must be 0 or 1, got {order}")
    xi = (x - centers[:, None, :]) / scales[:, None, None]
    x1, x2 = xi[..., 0], xi[..., 1]
    one = np.ones_like(x1)
    zero = np.zeros_like(x1)
    inv = (1.0 / scales)[:, None] * one
    if order == 0:
        comps = [(one, zero), (zero, one), (x1, x2)]
        divs = [zero, zero, 2.0 * inv]
    else:
        comps = [
            (one, zero), (zero, one),
            (x1, zero), (x2, zero), (zero, x1), (zero, x2),
            (x1 * x1, x1 * x2), (x1 * x2, x2 * x2),
        ]
        divs = [zero, zero, inv, zero, zero, inv, 3.0 * x1 * inv, 3.0 * x2 * inv]
    vals = np.stack([np.stack(c, axis=-1) for c in comps], axis=-2)
    return vals, np.stack(divs, axis=-1)
