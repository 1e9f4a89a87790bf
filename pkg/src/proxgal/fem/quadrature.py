"""Quadrature on the reference triangle and the unit interval."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric coordinates ``(n, 3)`` and weights summing to 1.

    Integrals over a cell ``T`` are ``|T| * sum(w * f(x))``.
    """

    barycentric: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class LineRule:
    """Points on ``[0, 1]`` with weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed Gauss rule exact for total degree ``degree``.

    Gauss-Legendre in the collapsed direction, Gauss-Jacobi(1, 0) in the
    other so the Duffy Jacobian is absorbed; ``n = ceil((degree + 1) / 2)``
    points per direction.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    n = max(1, (degree + 2) // 2)
    a, wa = np.polynomial.legendre.leggauss(n)
    b, wb = roots_jacobi(n, 1.0, 0.0)
    # map to [0,1]: s from Legendre, t from Jacobi weight (1-t)
    s = 0.5 * (a + 1.0)
    t = 0.5 * (b + 1.0)
    S, Tt = np.meshgrid(s, t, indexing="ij")
    W = np.outer(wa, wb)
    x = S * (1.0 - Tt)
    y = Tt
    w = W.ravel()
    w = w / w.sum()
    bary = np.column_stack([1.0 - x.ravel() - y.ravel(), x.ravel(), y.ravel()])
    return QuadratureRule(bary, w, 2 * n - 1)


@lru_cache(maxsize=None)
def line_rule(degree: int) -> LineRule:
    n = max(1, (degree + 2) // 2)
    a, wa = np.polynomial.legendre.leggauss(n)
    return LineRule(0.5 * (a + 1.0), 0.5 * wa, 2 * n - 1)


def require(rule, degree: int | None) -> None:
    """Refuse to under-integrate a polynomial integrand of known degree."""
    if degree is not None and degree > rule.degree:
        raise ValueError(f"quadrature of degree {rule.degree} cannot integrate a degree-{degree} integrand exactly")
