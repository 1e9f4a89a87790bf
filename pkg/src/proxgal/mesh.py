"""Conforming 2D simplicial meshes with tagged boundary facets.

A :class:`SimplicialMesh` is immutable once built.  All connectivity
(facets, facet-to-cell adjacency, normals) is derived in the constructor
and the public arrays are flagged read-only.

Facet orientation convention: every facet stores ``(a, b)`` with ``a < b``
and its adjacent cells ``(c0, c1)``; ``c1 == -1`` on the boundary.  The
unit normal points from ``c0`` to ``c1`` (outward for boundary facets).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SIDE_TAGS = ("bottom", "right", "top", "left")


class MeshError(ValueError):
    """Raised when a mesh violates one of the structural invariants."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def signed_areas(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[cells[:, i]] for i in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Immutable triangulation.

    Parameters
    ----------
    vertices : (V, 2) array
    cells : (T, 3) int array, counterclockwise
    boundary_tags : mapping ``(i, j) -> label`` for every boundary edge
        (vertex order irrelevant).
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_tags: dict = field(repr=False)

    # derived
    facets: np.ndarray = field(init=False, repr=False)
    facet_cells: np.ndarray = field(init=False, repr=False)
    cell_facets: np.ndarray = field(init=False, repr=False)
    facet_tags: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float)
        cells = np.asarray(self.cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (V, 2)")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError("cells must have shape (T, 3)")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell references a vertex index out of range")
        area = signed_areas(vertices, cells)
        bad = np.flatnonzero(area <= 0.0)
        if bad.size:
            raise MeshError(f"cell {bad[0]} has non-positive signed area {area[bad[0]]:.3e}")

        # local edge i is opposite local vertex i
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        edges = cells[:, loc].reshape(-1, 2)
        key = np.sort(edges, axis=1)
        facets, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if counts.max(initial=0) > 2:
            f = int(np.argmax(counts))
            raise MeshError(f"facet {f} {tuple(facets[f])} is shared by {counts[f]} cells (non-conforming)")
        cell_facets = inverse.reshape(-1, 3)

        nf = len(facets)
        facet_cells = -np.ones((nf, 2), dtype=np.int64)
        owner = np.repeat(np.arange(len(cells)), 3)
        order = np.argsort(inverse, kind="stable")
        sorted_f = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_f[1:] != sorted_f[:-1]
        facet_cells[sorted_f[first], 0] = owner[order[first]]
        facet_cells[sorted_f[~first], 1] = owner[order[~first]]

        # conformity: the two cells traverse a shared edge in opposite directions
        interior = np.flatnonzero(facet_cells[:, 1] >= 0)
        if interior.size:
            direction = np.where(edges[:, 0] < edges[:, 1], 1, -1)
            d = np.zeros((nf, 2), dtype=int)
            d[sorted_f[first], 0] = direction[order[first]]
            d[sorted_f[~first], 1] = direction[order[~first]]
            same = interior[d[interior, 0] == d[interior, 1]]
            if same.size:
                raise MeshError(f"facet {same[0]} is traversed in the same direction by both cells")

        boundary = np.flatnonzero(facet_cells[:, 1] < 0)
        tags = np.full(nf, "", dtype=object)
        lookup = {tuple(f): i for i, f in ((int(i), facets[i]) for i in boundary)}
        for (i, j), label in self.boundary_tags.items():
            k = lookup.get((min(i, j), max(i, j)))
            if k is None:
                raise MeshError(f"tagged edge ({i}, {j}) is not a boundary facet")
            tags[k] = str(label)
        untagged = [int(f) for f in boundary if not tags[f]]
        if untagged:
            raise MeshError(f"boundary facet {untagged[0]} {tuple(facets[untagged[0]])} carries no tag")

        object.__setattr__(self, "vertices", _readonly(vertices))
        object.__setattr__(self, "cells", _readonly(cells))
        object.__setattr__(self, "facets", _readonly(facets.astype(np.int64)))
        object.__setattr__(self, "facet_cells", _readonly(facet_cells))
        object.__setattr__(self, "cell_facets", _readonly(cell_facets))
        tags.setflags(write=False)
        object.__setattr__(self, "facet_tags", tags)
        object.__setattr__(self, "boundary_tags", dict(self.boundary_tags))

    # ------------------------------------------------------------------ sizes
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] < 0)

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] >= 0)

    def tags(self) -> list[str]:
        return sorted({str(t) for t in self.facet_tags[self.boundary_facets]})

    def facets_with_tag(self, *labels: str) -> np.ndarray:
        want = set(labels)
        b = self.boundary_facets
        return b[np.array([str(t) in want for t in self.facet_tags[b]], dtype=bool)]

    def vertices_with_tag(self, *labels: str) -> np.ndarray:
        return np.unique(self.facets[self.facets_with_tag(*labels)])

    # -------------------------------------------------------------- geometry
    @property
    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.cells)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @property
    def facet_lengths(self) -> np.ndarray:
        d = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def facet_normals(self) -> np.ndarray:
        """Unit normals pointing from ``facet_cells[:, 0]`` to ``facet_cells[:, 1]``."""
        a = self.vertices[self.facets[:, 0]]
        b = self.vertices[self.facets[:, 1]]
        t = b - a
        n = np.column_stack([t[:, 1], -t[:, 0]]) / self.facet_lengths[:, None]
        away = 0.5 * (a + b) - self.centroids[self.facet_cells[:, 0]]
        flip = np.einsum("ij,ij->i", n, away) < 0
        n[flip] *= -1.0
        return n

    def cell_diameters(self) -> np.ndarray:
        return self.facet_lengths[self.cell_facets].max(axis=1)

    def mesh_size(self) -> float:
        """Longest edge over all cells."""
        return float(self.facet_lengths.max())

    def shape_regularity(self) -> float:
        """Largest circumradius/inradius ratio (2 for an equilateral cell)."""
        L = self.facet_lengths[self.cell_facets]
        area = self.areas
        s = 0.5 * L.sum(axis=1)
        inradius = area / s
        circumradius = L.prod(axis=1) / (4.0 * area)
        return float((circumradius / inradius).max())

    def n_boundary_loops(self) -> int:
        b = self.facets[self.boundary_facets]
        parent = {int(v): int(v) for v in np.unique(b)}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for i, j in b:
            ri, rj = find(int(i)), find(int(j))
            if ri != rj:
                parent[ri] = rj
        return len({find(v) for v in parent})

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_facets + self.n_cells

    def locate(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Index of a cell containing each point (``-1`` if outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        p0 = self.vertices[self.cells[:, 0]]
        e1 = self.vertices[self.cells[:, 1]] - p0
        e2 = self.vertices[self.cells[:, 2]] - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        out = -np.ones(len(points), dtype=np.int64)
        for k, x in enumerate(points):
            d = x - p0
            l1 = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
            l2 = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
            inside = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
            hit = np.flatnonzero(inside)
            if hit.size:
                out[k] = hit[0]
        return out

    def validate(self) -> None:
        """Re-check the derived invariants (constructor already enforces most)."""
        holes = self.n_boundary_loops() - 1
        chi = self.euler_characteristic()
        if chi != 1 - holes:
            raise MeshError(f"Euler relation violated: V-E+T={chi}, expected {1 - holes}")
        if not np.isfinite(self.shape_regularity()):
            raise MeshError("degenerate cell (infinite shape-regularity ratio)")

    def __repr__(self) -> str:
        return f"SimplicialMesh(V={self.n_vertices}, T={self.n_cells}, F={self.n_facets}, tags={self.tags()})"


# ---------------------------------------------------------------- builders
def tensor_rectangle(xs: Sequence[float], ys: Sequence[float], diagonal: str = "right") -> SimplicialMesh:
    """Triangulate the tensor grid ``xs x ys``; sides tagged bottom/right/top/left.

    ``diagonal='right'`` splits each quad along (i,j)-(i+1,j+1), ``'left'``
    along (i+1,j)-(i,j+1).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 2 or len(ys) < 2:
        raise MeshError("need at least two coordinates per direction")
    if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) <= 0):
        raise MeshError("grid coordinates must be strictly increasing (degenerate box?)")
    if diagonal not in ("right", "left"):
        raise ValueError(f"unknown diagonal orientation {diagonal!r}")
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    I, J = I.ravel(), J.ravel()
    v00, v10, v01, v11 = vid(I, J), vid(I + 1, J), vid(I, J + 1), vid(I + 1, J + 1)
    if diagonal == "right":
        c1 = np.column_stack([v00, v10, v11])
        c2 = np.column_stack([v00, v11, v01])
    else:
        c1 = np.column_stack([v00, v10, v01])
        c2 = np.column_stack([v10, v11, v01])
    cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
    cells[0::2] = c1
    cells[1::2] = c2

    tags = {}
    for i in range(nx):
        tags[(vid(i, 0), vid(i + 1, 0))] = "bottom"
        tags[(vid(i, ny), vid(i + 1, ny))] = "top"
    for j in range(ny):
        tags[(vid(0, j), vid(0, j + 1))] = "left"
        tags[(vid(nx, j), vid(nx, j + 1))] = "right"
    return SimplicialMesh(vertices, cells, tags)


def structured_rectangle(nx: int, ny: int, bbox=((0.0, 1.0), (0.0, 1.0)), diagonal: str = "right") -> SimplicialMesh:
    """Uniform ``nx x ny`` grid of the box ``((x0, x1), (y0, y1))`` split into triangles."""
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    (x0, x1), (y0, y1) = bbox
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate bounding box {bbox}")
    return tensor_rectangle(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1), diagonal)


def refine_uniform(mesh: SimplicialMesh) -> SimplicialMesh:
    """Red refinement: each cell split into four by its edge midpoints."""
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])
    c = mesh.cells
    m = nv + mesh.cell_facets  # midpoint of edge opposite local vertex i
    cells = np.concatenate(
        [
            np.column_stack([c[:, 0], m[:, 2], m[:, 1]]),
            np.column_stack([m[:, 2], c[:, 1], m[:, 0]]),
            np.column_stack([m[:, 1], m[:, 0], c[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ]
    )
    tags = {}
    for f in mesh.boundary_facets:
        a, b = mesh.facets[f]
        label = mesh.facet_tags[f]
        tags[(int(a), int(nv + f))] = label
        tags[(int(nv + f), int(b))] = label
    return SimplicialMesh(vertices, cells, tags)


def map_vertices(mesh: SimplicialMesh, fn) -> SimplicialMesh:
    """Apply ``fn(vertices) -> vertices`` keeping connectivity and tags."""
    tags = {(int(mesh.facets[f, 0]), int(mesh.facets[f, 1])): mesh.facet_tags[f] for f in mesh.boundary_facets}
    return SimplicialMesh(fn(np.array(mesh.vertices)), mesh.cells, tags)


def retag(mesh: SimplicialMesh, rule) -> SimplicialMesh:
    """Relabel boundary facets; ``rule(old_label, midpoint) -> new_label``."""
    tags = {}
    for f in mesh.boundary_facets:
        a, b = mesh.facets[f]
        midpoint = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        tags[(int(a), int(b))] = rule(str(mesh.facet_tags[f]), midpoint)
    return SimplicialMesh(mesh.vertices, mesh.cells, tags)


# -------------------------------------------------------------- ASCII I/O
def _expect(lines: list, pos: int, keyword: str) -> tuple[int, int]:
    if pos >= len(lines):
        raise MeshError(f"unexpected end of file, expected '{keyword} N'")
    parts = lines[pos].split()
    if len(parts) != 2 or parts[0] != keyword:
        raise MeshError(f"line {pos + 1}: expected '{keyword} N', got {lines[pos]!r}")
    try:
        n = int(parts[1])
    except ValueError as exc:
        raise MeshError(f"line {pos + 1}: bad count {parts[1]!r}") from exc
    if n < 0 or pos + 1 + n > len(lines):
        raise MeshError(f"line {pos + 1}: '{keyword}' block of {n} rows runs past end of file")
    return n, pos + 1


def import_mesh(text: str) -> SimplicialMesh:
    """Parse the ``vi-mesh 1`` ASCII format (see README).

    Clockwise cells are reoriented with a :class:`UserWarning`.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0].split() != ["vi-mesh", "1"]:
        raise MeshError("missing header 'vi-mesh 1'")
    pos = 1
    nv, pos = _expect(lines, pos, "vertices")
    try:
        vertices = np.array([[float(t) for t in lines[pos + i].split()] for i in range(nv)])
    except ValueError as exc:
        raise MeshError(f"bad vertex row: {exc}") from exc
    if vertices.shape != (nv, 2):
        raise MeshError("each vertex row must hold exactly two coordinates")
    pos += nv
    nc, pos = _expect(lines, pos, "cells")
    try:
        cells = np.array([[int(t) for t in lines[pos + i].split()] for i in range(nc)], dtype=np.int64)
    except ValueError as exc:
        raise MeshError(f"bad cell row: {exc}") from exc
    if cells.shape != (nc, 3):
        raise MeshError("each cell row must hold exactly three vertex indices")
    pos += nc
    nb, pos = _expect(lines, pos, "boundary")
    tags = {}
    for i in range(nb):
        parts = lines[pos + i].split()
        if len(parts) != 3:
            raise MeshError(f"boundary row {i}: expected 'i j tag', got {lines[pos + i]!r}")
        tags[(int(parts[0]), int(parts[1]))] = parts[2]
    pos += nb
    if pos != len(lines):
        raise MeshError(f"trailing content after boundary block: {lines[pos]!r}")

    if cells.size and (cells.min() < 0 or cells.max() >= nv):
        raise MeshError("cell references a vertex index out of range")
    area = signed_areas(vertices, cells)
    zero = np.flatnonzero(np.abs(area) <= 1e-14 * max(1.0, float(np.abs(area).max(initial=1.0))))
    if zero.size:
        raise MeshError(f"cell {zero[0]} is degenerate (zero area)")
    cw = np.flatnonzero(area < 0)
    if cw.size:
        warnings.warn(f"{cw.size} clockwise cell(s) reoriented (first: cell {cw[0]})", UserWarning, stacklevel=2)
        cells = cells.copy()
        cells[cw] = cells[cw][:, [0, 2, 1]]
    mesh = SimplicialMesh(vertices, cells, tags)
    mesh.validate()
    return mesh


def export_mesh(mesh: SimplicialMesh) -> str:
    out = ["vi-mesh 1", f"vertices {mesh.n_vertices}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    out.append(f"cells {mesh.n_cells}")
    out += [f"{a} {b} {c}" for a, b, c in mesh.cells]
    bf = mesh.boundary_facets
    out.append(f"boundary {len(bf)}")
    out += [f"{mesh.facets[f, 0]} {mesh.facets[f, 1]} {mesh.facet_tags[f]}" for f in bf]
    return "\n".join(out) + "\n"


def load_mesh(path) -> SimplicialMesh:
    with open(path, encoding="ascii") as fh:
        return import_mesh(fh.read())


def mesh_size(mesh: SimplicialMesh) -> float:
    return mesh.mesh_size()
