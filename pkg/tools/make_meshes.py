"""Regenerate the committed punctured-domain meshes.

Offline helper; requires the ``triangle`` package (``pip install triangle``),
which the library itself does not depend on.  Run from the repository root::

    python3 tools/make_meshes.py
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
import triangle

from proxgal.mesh import SimplicialMesh, export_mesh

OUT = Path(__file__).resolve().parents[1] / "src" / "proxgal" / "data" / "meshes"

# segment markers
LEFT, BOTTOM, RIGHT, TOP, CIRCLE = 1, 2, 3, 4, 5


def punctured_box(x0, x1, y0, y1, radius, n_circle, max_area, labels):
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    box_segments = [[0, 1], [1, 2], [2, 3], [3, 0]]
    box_markers = [BOTTOM, RIGHT, TOP, LEFT]
    theta = np.linspace(0.0, 2.0 * np.pi, n_circle, endpoint=False)
    circle = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    circle_segments = [[4 + i, 4 + (i + 1) % n_circle] for i in range(n_circle)]
    geometry = {
        "vertices": np.vstack([corners, circle]),
        "segments": np.array(box_segments + circle_segments),
        "segment_markers": np.array(box_markers + [CIRCLE] * n_circle)[:, None],
        "holes": np.array([[0.0, 0.0]]),
    }
    tri = triangle.triangulate(geometry, f"pq30a{max_area:.8f}e")
    tags = {}
    for (a, b), m in zip(tri["edges"], tri["edge_markers"].ravel()):
        if m:
            tags[(int(a), int(b))] = labels[int(m)]
    return SimplicialMesh(tri["vertices"], tri["triangles"], tags)


HEMKER_LABELS = {LEFT: "left", BOTTOM: "outflow", RIGHT: "outflow", TOP: "outflow", CIRCLE: "circle"}
CHANNEL_LABELS = {LEFT: "inlet", BOTTOM: "walls", RIGHT: "outlet", TOP: "walls", CIRCLE: "semipermeable"}

SPECS = {
    "hemker_coarse": ((-3.0, 9.0, -3.0, 3.0, 1.0), 48, 0.08, HEMKER_LABELS),
    "hemker_medium": ((-3.0, 9.0, -3.0, 3.0, 1.0), 96, 0.02, HEMKER_LABELS),
    "channel_coarse": ((-1.0, 3.0, -1.0, 1.0, 0.3), 40, 0.01, CHANNEL_LABELS),
    "channel_medium": ((-1.0, 3.0, -1.0, 1.0, 0.3), 80, 0.0025, CHANNEL_LABELS),
}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="*", default=sorted(SPECS))
    parser.add_argument("--out", type=Path, default=OUT)
    args = parser.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for name in args.names:
        box, n_circle, area, labels = SPECS[name]
        mesh = punctured_box(*box, n_circle, area, labels)
        mesh.validate()
        path = args.out / f"{name}.msh"
        path.write_text(export_mesh(mesh), encoding="ascii")
        print(f"{path.name}: {mesh.n_vertices} vertices, {mesh.n_cells} cells, h={mesh.mesh_size():.3g}")


if __name__ == "__main__":
    main()
