"""Degree-of-freedom bookkeeping and reference bases for the scalar spaces.

Supported kinds
---------------
``P1``          continuous piecewise linears, one dof per vertex
``P1-bubble``   ``P1`` enriched with the cubic bubble ``27 l0 l1 l2`` per cell
``DG-P0``       one constant per cell
``DG-P1``       broken linears, vertex-Lagrange basis per cell
``RT0``/``RT1`` broken Raviart-Thomas fields (see :mod:`proxgal.fem.rt`)
``Facet-P0``/``Facet-P1``  polynomials on every facet (hybrid multipliers)
``Trace-P1``    continuous linears on a tagged part of the boundary
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh import SimplicialMesh

KINDS = ("P1", "P1-bubble", "DG-P0", "DG-P1", "RT0", "RT1", "Facet-P0", "Facet-P1", "Trace-P1")

_LOCAL_DIM = {"P1": 3, "P1-bubble": 4, "DG-P0": 1, "DG-P1": 3, "RT0": 3, "RT1": 8, "Facet-P0": 1, "Facet-P1": 2, "Trace-P1": 2}
_POLY_DEGREE = {"P1": 1, "P1-bubble": 3, "DG-P0": 0, "DG-P1": 1, "RT0": 1, "RT1": 2, "Facet-P0": 0, "Facet-P1": 1, "Trace-P1": 1}


def barycentric_gradients(mesh: SimplicialMesh) -> np.ndarray:
    """``(T, 3, 2)`` gradients of the barycentric coordinates."""
    p = mesh.vertices[mesh.cells]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    return np.stack([-g1 - g2, g1, g2], axis=1)


def physical_points(mesh: SimplicialMesh, bary: np.ndarray) -> np.ndarray:
    """``(T, nq, 2)`` physical coordinates of barycentric points."""
    return np.einsum("qi,tid->tqd", bary, mesh.vertices[mesh.cells])


@dataclass(eq=False)
class DiscreteSpace:
    kind: str
    mesh: SimplicialMesh
    tags: tuple = ()
    dof_map: np.ndarray = field(init=False, repr=False)
    n_dofs: int = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown space kind {self.kind!r}; expected one of {KINDS}")
        m = self.mesh
        T, F = m.n_cells, m.n_facets
        k = self.kind
        if k == "P1":
            dofs = m.cells.copy()
            n = m.n_vertices
        elif k == "P1-bubble":
            dofs = np.column_stack([m.cells, m.n_vertices + np.arange(T)])
            n = m.n_vertices + T
        elif k in ("DG-P0", "DG-P1", "RT0", "RT1"):
            nl = _LOCAL_DIM[k]
            dofs = np.arange(T * nl).reshape(T, nl)
            n = T * nl
        elif k in ("Facet-P0", "Facet-P1"):
            nl = _LOCAL_DIM[k]
            dofs = np.arange(F * nl).reshape(F, nl)
            n = F * nl
        else:  # Trace-P1
            if not self.tags:
                raise ValueError("Trace-P1 needs boundary tags")
            facets = m.facets_with_tag(*self.tags)
            verts = np.unique(m.facets[facets])
            index = -np.ones(m.n_vertices, dtype=np.int64)
            index[verts] = np.arange(len(verts))
            self.facets = facets
            self.vertex_ids = verts
            dofs = index[m.facets[facets]]
            n = len(verts)
        self.dof_map = dofs
        self.n_dofs = int(n)

    @property
    def local_dim(self) -> int:
        return _LOCAL_DIM[self.kind]

    @property
    def degree(self) -> int:
        return _POLY_DEGREE[self.kind]

    @property
    def is_cell_space(self) -> bool:
        return self.kind in ("P1", "P1-bubble", "DG-P0", "DG-P1")

    # ------------------------------------------------------------ cell basis
    def values(self, bary: np.ndarray) -> np.ndarray:
        """``(nq, nloc)`` reference values (cell-independent for these kinds)."""
        bary = np.atleast_2d(bary)
        if self.kind in ("P1", "DG-P1"):
            return bary.copy()
        if self.kind == "P1-bubble":
            return np.column_stack([bary, 27.0 * bary.prod(axis=1)])
        if self.kind == "DG-P0":
            return np.ones((len(bary), 1))
        raise ValueError(f"{self.kind} has no scalar cell basis")

    def gradients(self, bary: np.ndarray) -> np.ndarray:
        """``(T, nq, nloc, 2)`` physical gradients."""
        bary = np.atleast_2d(bary)
        T = self.mesh.n_cells
        nq = len(bary)
        if self.kind == "DG-P0":
            return np.zeros((T, nq, 1, 2))
        G = barycentric_gradients(self.mesh)
        out = np.broadcast_to(G[:, None], (T, nq, 3, 2))
        if self.kind in ("P1", "DG-P1"):
            return np.array(out)
        if self.kind == "P1-bubble":
            l0, l1, l2 = bary.T
            gb = 27.0 * (
                (l1 * l2)[None, :, None] * G[:, None, 0]
                + (l0 * l2)[None, :, None] * G[:, None, 1]
                + (l0 * l1)[None, :, None] * G[:, None, 2]
            )
            return np.concatenate([out, gb[:, :, None, :]], axis=2)
        raise ValueError(f"{self.kind} has no scalar cell basis")

    # -------------------------------------------------------- boundary trace
    def trace(self, facets: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values of the basis restricted to boundary ``facets`` at facet parameters ``s``.

        Returns ``(dofs (nF, nloc), values (nF, nq, nloc))``; the parameter
        runs from ``facets[:, 0]`` to ``facets[:, 1]`` of the mesh.
        """
        m = self.mesh
        s = np.asarray(s, dtype=float)
        nq = len(s)
        if self.kind == "Trace-P1":
            pos = {int(f): i for i, f in enumerate(self.facets)}
            rows = np.array([pos[int(f)] for f in facets], dtype=np.int64)
            vals = np.broadcast_to(np.column_stack([1.0 - s, s])[None], (len(facets), nq, 2))
            return self.dof_map[rows], np.array(vals)
        if self.kind in ("Facet-P0", "Facet-P1"):
            vals = np.ones((nq, 1)) if self.kind == "Facet-P0" else np.column_stack([1.0 - s, s])
            return self.dof_map[facets], np.broadcast_to(vals[None], (len(facets), nq, vals.shape[1])).copy()
        cells = m.facet_cells[facets, 0]
        a = m.facets[facets, 0]
        b = m.facets[facets, 1]
        bary = np.zeros((len(facets), nq, 3))
        cv = m.cells[cells]
        for loc in range(3):
            bary[:, :, loc] += np.where(cv[:, loc] == a, 1.0, 0.0)[:, None] * (1.0 - s)[None]
            bary[:, :, loc] += np.where(cv[:, loc] == b, 1.0, 0.0)[:, None] * s[None]
        vals = np.stack([self.values(bq) for bq in bary])
        return self.dof_map[cells], vals

    # --------------------------------------------------------- Dirichlet data
    def boundary_dofs(self, *tags: str) -> np.ndarray:
        """Dofs whose basis function does not vanish on the tagged boundary part."""
        if self.kind not in ("P1", "P1-bubble"):
            raise ValueError(f"boundary dofs are defined for continuous spaces, not {self.kind}")
        return self.mesh.vertices_with_tag(*tags) if tags else np.unique(self.mesh.facets[self.mesh.boundary_facets])

    def interpolate(self, fn) -> np.ndarray:
        """Interpolate at vertices; the bubble coefficient matches the centroid value."""
        m = self.mesh
        if self.kind == "P1":
            return np.asarray(fn(m.vertices), dtype=float)
        if self.kind == "P1-bubble":
            nodal = np.asarray(fn(m.vertices), dtype=float)
            c = np.asarray(fn(m.centroids), dtype=float)
            # bubble is 1 at the centroid where the P1 part equals the vertex mean
            bubble = c - nodal[m.cells].mean(axis=1)
            return np.concatenate([nodal, bubble])
        if self.kind == "DG-P1":
            return np.asarray(fn(m.vertices[m.cells].reshape(-1, 2)), dtype=float)
        if self.kind == "DG-P0":
            return np.asarray(fn(m.centroids), dtype=float)
        raise ValueError(f"interpolation not defined for {self.kind}")

    def evaluate(self, coeffs: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """``(T, nq)`` values of the discrete function at barycentric points."""
        return np.asarray(coeffs)[self.dof_map] @ self.values(bary).T

    def evaluate_gradient(self, coeffs: np.ndarray, bary: np.ndarray) -> np.ndarray:
        return np.einsum("tl,tqld->tqd", np.asarray(coeffs)[self.dof_map], self.gradients(bary))


def cell_barycentric(mesh: SimplicialMesh, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates ``(..., 3)`` of points ``x (len(cells), ..., 2)`` in ``cells``."""
    p = mesh.vertices[mesh.cells[cells]]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    shape = (len(cells),) + (1,) * (x.ndim - 2)
    d = x - p[:, 0].reshape(shape + (2,))
    l1 = (d[..., 0] * e2[:, 1].reshape(shape) - d[..., 1] * e2[:, 0].reshape(shape)) / det.reshape(shape)
    l2 = (e1[:, 0].reshape(shape) * d[..., 1] - e1[:, 1].reshape(shape) * d[..., 0]) / det.reshape(shape)
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)
