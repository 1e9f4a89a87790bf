"""Problem description shared by the conforming and hybridized solvers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..entropy import LegendreMap
from ..fem.assembly import evaluate_coefficient
from ..mesh import SimplicialMesh


@dataclass
class VIProblem:
    """Obstacle-type variational inequality for ``-div(kappa grad u) + beta.grad u + c u = f``.

    Attributes
    ----------
    mesh : SimplicialMesh
    kappa, beta, c, f : constants or callables of points ``x (..., 2)``
    dirichlet, neumann : dict
        Boundary data per tag.  Neumann data prescribe ``kappa grad u . n``.
    constraint : LegendreMap
    locus : str
        ``"volume"`` or the boundary tag carrying the constraint.
    exact, exact_grad : optional callables
    skew : float, optional
        Coefficient of the extra form ``u_x v_y - v_x u_y``.
    psi0 : float or callable
        Initial latent variable.
    coef_degree : int or None
        Polynomial degree of the coefficients (``None`` for sampled ones).
    """

    name: str
    mesh: SimplicialMesh
    constraint: LegendreMap
    kappa: object = field(default_factory=lambda: np.eye(2))
    beta: object = None
    c: object = None
    f: object = None
    dirichlet: dict = field(default_factory=dict)
    neumann: dict = field(default_factory=dict)
    locus: str = "volume"
    exact: object = None
    exact_grad: object = None
    skew: float | None = None
    psi0: object = 0.0
    coef_degree: int | None = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        tags = set(self.mesh.tags())
        unknown = (set(self.dirichlet) | set(self.neumann)) - tags
        if unknown:
            raise ValueError(f"boundary data given for tags {sorted(unknown)} absent from the mesh ({sorted(tags)})")
        if set(self.dirichlet) & set(self.neumann):
            raise ValueError("a tag cannot carry both Dirichlet and Neumann data")
        if self.locus != "volume" and self.locus not in tags:
            raise ValueError(f"constraint locus {self.locus!r} is not a boundary tag")

    @property
    def dirichlet_tags(self) -> tuple:
        return tuple(self.dirichlet)

    def exact_flux(self, x):
        """``q* = -kappa grad u*``."""
        if self.exact_grad is None:
            return None
        K = evaluate_coefficient(self.kappa, x, (2, 2))
        g = evaluate_coefficient(self.exact_grad, x, (2,))
        return -np.einsum("...de,...e->...d", K, g)

    def coercivity_margin(self, n_samples: int = 2000, seed: int = 0, h: float = 1e-6) -> float:
        """Sampled minimum of ``c - div(beta)/2`` (must be ``>= 0``)."""
        rng = np.random.default_rng(seed)
        m = self.mesh
        cells = rng.integers(0, m.n_cells, n_samples)
        lam = rng.dirichlet(np.ones(3), n_samples)
        x = np.einsum("ni,nid->nd", lam, m.vertices[m.cells[cells]])
        c = evaluate_coefficient(self.c, x) if self.c is not None else np.zeros(n_samples)
        if self.beta is None:
            return float(c.min())
        div = np.zeros(n_samples)
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            div += (evaluate_coefficient(self.beta, x + e, (2,))[:, d] - evaluate_coefficient(self.beta, x - e, (2,))[:, d]) / (2 * h)
        return float((c - 0.5 * div).min())
