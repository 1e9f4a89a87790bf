"""Small meshes and reference calculations shared by the test modules."""

import numpy as np

from proxgal.mesh import SimplicialMesh, structured_rectangle


def unit_triangle(tag: str = "edge") -> SimplicialMesh:
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return SimplicialMesh(v, np.array([[0, 1, 2]]), {(0, 1): tag, (1, 2): tag, (2, 0): tag})


def two_by_two(bbox=((0.0, 1.0), (0.0, 1.0)), diagonal="right") -> SimplicialMesh:
    """The 8-cell mesh (2x2 squares, each split in two)."""
    return structured_rectangle(2, 2, bbox, diagonal)


def dense_newton(residual, jacobian, x0, tol=1e-14, max_iter=50):
    """Plain undamped Newton in dense arithmetic; returns all iterates."""
    xs = [np.array(x0, dtype=float)]
    for _ in range(max_iter):
        r = residual(xs[-1])
        if np.linalg.norm(r) <= tol:
            break
        xs.append(xs[-1] - np.linalg.solve(jacobian(xs[-1]), r))
    return xs
