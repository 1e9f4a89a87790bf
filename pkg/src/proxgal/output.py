"""Atomic file output: CSV tables and legacy-VTK field snapshots."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .mesh import SimplicialMesh

POINT_KINDS = ("P1", "P1-bubble", "Trace-P1")
CELL_KINDS = ("DG-P0",)


def write_atomic(path, text: str) -> Path:
    """Write ``text`` to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    return "" if value is None else str(value)


def write_csv(path, rows: list, columns=None) -> Path:
    """Rows are dicts; ``columns`` fixes the order (default: keys of the first row)."""
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return write_atomic(path, buf.getvalue())


def read_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def export_fields(mesh: SimplicialMesh, path, point_data: dict | None = None, cell_data: dict | None = None) -> Path:
    """Legacy-VTK ASCII unstructured grid with scalar point and cell arrays."""
    point_data = point_data or {}
    cell_data = cell_data or {}
    out = ["# vtk DataFile Version 3.0", "proxgal field output", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_vertices} double")
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.cells.tolist()]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += ["5"] * mesh.n_cells

    def block(header, n, arrays):
        if not arrays:
            return
        out.append(f"{header} {n}")
        for name, values in arrays.items():
            values = np.asarray(values, dtype=float).ravel()
            if len(values) != n:
                raise ValueError(f"field {name!r} has {len(values)} values, expected {n}")
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(repr(v) for v in values.tolist())

    block("POINT_DATA", mesh.n_vertices, point_data)
    block("CELL_DATA", mesh.n_cells, cell_data)
    return write_atomic(path, "\n".join(out) + "\n")


def export_field(field, mesh: SimplicialMesh, path, name: str = "field", kind: str | None = None) -> Path:
    """Write one scalar field; point or cell data chosen from the space ``kind``.

    Without ``kind`` the length decides (vertex count -> point data, cell
    count -> cell data).  ``P1-bubble`` coefficients are cut to their vertex
    part.
    """
    values = np.asarray(field, dtype=float).ravel()
    if kind is None:
        if len(values) == mesh.n_vertices and len(values) != mesh.n_cells:
            kind = "P1"
        elif len(values) == mesh.n_cells and len(values) != mesh.n_vertices:
            kind = "DG-P0"
        else:
            raise ValueError("cannot infer point/cell data from the field length; pass kind")
    if kind in POINT_KINDS:
        return export_fields(mesh, path, point_data={name: values[: mesh.n_vertices]})
    if kind in CELL_KINDS:
        return export_fields(mesh, path, cell_data={name: values})
    raise ValueError(f"no VTK mapping for space kind {kind!r}")


def read_vtk_scalars(path) -> dict:
    """Minimal reader for files written by :func:`export_fields` (used in checks)."""
    with open(path, encoding="utf-8") as fh:
        tokens = fh.read().split("\n")
    out = {"point": {}, "cell": {}}
    where = None
    i = 0
    while i < len(tokens):
        line = tokens[i].split()
        if not line:
            i += 1
            continue
        if line[0] in ("POINT_DATA", "CELL_DATA"):
            where = "point" if line[0] == "POINT_DATA" else "cell"
            n = int(line[1])
        elif line[0] == "SCALARS":
            name = line[1]
            out[where][name] = np.array([float(v) for v in tokens[i + 2:i + 2 + n]])
            i += 2 + n
            continue
        i += 1
    return out
