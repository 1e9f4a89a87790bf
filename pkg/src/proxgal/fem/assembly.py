"""Sparse assembly of the conforming forms, loads and L2 functionals."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .quadrature import line_rule, require, triangle_rule
from .spaces import DiscreteSpace, physical_points


def evaluate_coefficient(coef, x: np.ndarray, shape: tuple = ()) -> np.ndarray:
    """Evaluate a constant / array / callable coefficient at points ``x (..., 2)``."""
    base = x.shape[:-1]
    if coef is None:
        return np.zeros(base + shape)
    if callable(coef):
        val = np.asarray(coef(x), dtype=float)
    else:
        val = np.asarray(coef, dtype=float)
    return np.broadcast_to(val, base + shape).astype(float, copy=True)


def _scatter(rows: np.ndarray, cols: np.ndarray, local: np.ndarray, shape) -> sp.csr_matrix:
    T, nr, nc = local.shape
    R = np.broadcast_to(rows[:, :, None], (T, nr, nc))
    C = np.broadcast_to(cols[:, None, :], (T, nr, nc))
    return sp.coo_matrix((local.ravel(), (R.ravel(), C.ravel())), shape=shape).tocsr()


def _total_degree(space_degree: int, coef_degree, extra: int = 0):
    if coef_degree is None:
        return None
    return 2 * space_degree + coef_degree + extra


def assemble_conforming_A(
    space: DiscreteSpace,
    kappa=None,
    beta=None,
    c=None,
    skew: float | None = None,
    coef_degree: int | None = 0,
    quad_degree: int = 6,
) -> sp.csr_matrix:
    """Matrix of ``(kappa grad u, grad v) + (beta . grad u, v) + (c u, v)``.

    ``A[i, j] = a(phi_j, phi_i)``.  ``skew`` adds ``skew * (u_x v_y - v_x u_y)``.
    ``coef_degree`` is the polynomial degree of the coefficients (``None``
    when they are not polynomial and are merely sampled).
    """
    if not space.is_cell_space:
        raise ValueError(f"conforming assembly needs a scalar cell space, got {space.kind}")
    rule = triangle_rule(quad_degree)
    require(rule, _total_degree(space.degree, coef_degree))
    m = space.mesh
    x = physical_points(m, rule.barycentric)
    w = rule.weights[None, :] * m.areas[:, None]
    phi = space.values(rule.barycentric)
    dphi = space.gradients(rule.barycentric)
    T, nq, nl, _ = dphi.shape
    local = np.zeros((T, nl, nl))
    if kappa is not None:
        K = evaluate_coefficient(kappa, x, (2, 2))
        if skew:
            K = K + skew * np.array([[0.0, -1.0], [1.0, 0.0]])
        # local[i, j] = sum_q w (K grad phi_j) . grad phi_i
        local += np.einsum("tq,tqid,tqde,tqje->tij", w, dphi, K, dphi)
    elif skew:
        S = skew * np.array([[0.0, -1.0], [1.0, 0.0]])
        local += np.einsum("tq,tqid,de,tqje->tij", w, dphi, S, dphi)
    if beta is not None:
        b = evaluate_coefficient(beta, x, (2,))
        local += np.einsum("tq,tqd,tqjd,qi->tij", w, b, dphi, phi)
    if c is not None:
        cc = evaluate_coefficient(c, x)
        local += np.einsum("tq,tq,qi,qj->tij", w, cc, phi, phi)
    return _scatter(space.dof_map, space.dof_map, local, (space.n_dofs, space.n_dofs))


def assemble_mass(
    trial: DiscreteSpace,
    test: DiscreteSpace,
    weight=None,
    region: tuple | None = None,
    quad_degree: int = 6,
) -> sp.csr_matrix:
    """Rectangular mass matrix ``M[i, j] = (w B phi_j, chi_i)``.

    ``region=None`` integrates over the domain; a tuple of boundary tags
    integrates the traces over those facets.  ``weight`` may be a callable
    of the physical points or a ``(T, nq)`` / ``(nF, nq)`` array sampled on
    the matching rule.
    """
    if trial.mesh is not test.mesh:
        raise ValueError("trial and test spaces live on different meshes")
    m = trial.mesh
    if region is None:
        rule = triangle_rule(quad_degree)
        x = physical_points(m, rule.barycentric)
        w = rule.weights[None, :] * m.areas[:, None]
        if weight is not None:
            w = w * (weight if isinstance(weight, np.ndarray) else evaluate_coefficient(weight, x))
        local = np.einsum("tq,qi,qj->tij", w, test.values(rule.barycentric), trial.values(rule.barycentric))
        return _scatter(test.dof_map, trial.dof_map, local, (test.n_dofs, trial.n_dofs))
    facets = m.facets_with_tag(*region)
    rule = line_rule(quad_degree)
    a = m.vertices[m.facets[facets, 0]]
    b = m.vertices[m.facets[facets, 1]]
    x = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
    w = rule.weights[None, :] * m.facet_lengths[facets][:, None]
    if weight is not None:
        w = w * (weight if isinstance(weight, np.ndarray) else evaluate_coefficient(weight, x))
    rdofs, rv = test.trace(facets, rule.points)
    cdofs, cv = trial.trace(facets, rule.points)
    local = np.einsum("fq,fqi,fqj->fij", w, rv, cv)
    return _scatter(rdofs, cdofs, local, (test.n_dofs, trial.n_dofs))


def assemble_load(space: DiscreteSpace, f=None, neumann: dict | None = None, quad_degree: int = 6) -> np.ndarray:
    """Vector ``(f, v) + sum_tag (g_tag, v)_tag``."""
    m = space.mesh
    out = np.zeros(space.n_dofs)
    if f is not None:
        rule = triangle_rule(quad_degree)
        x = physical_points(m, rule.barycentric)
        w = rule.weights[None, :] * m.areas[:, None]
        local = np.einsum("tq,tq,qi->ti", w, evaluate_coefficient(f, x), space.values(rule.barycentric))
        np.add.at(out, space.dof_map, local)
    for tag, g in (neumann or {}).items():
        facets = m.facets_with_tag(tag)
        if not len(facets):
            continue
        rule = line_rule(quad_degree)
        a = m.vertices[m.facets[facets, 0]]
        b = m.vertices[m.facets[facets, 1]]
        x = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
        w = rule.weights[None, :] * m.facet_lengths[facets][:, None]
        dofs, vals = space.trace(facets, rule.points)
        np.add.at(out, dofs, np.einsum("fq,fq,fqi->fi", w, evaluate_coefficient(g, x), vals))
    return out


def l2_norm(space: DiscreteSpace, coeffs: np.ndarray, exact=None, quad_degree: int = 8) -> float:
    """``||u_h - exact||_{L2}`` (``exact=None`` gives ``||u_h||``)."""
    m = space.mesh
    rule = triangle_rule(quad_degree)
    uh = space.evaluate(coeffs, rule.barycentric)
    if exact is not None:
        uh = uh - evaluate_coefficient(exact, physical_points(m, rule.barycentric))
    return float(np.sqrt(np.sum(rule.weights[None, :] * m.areas[:, None] * uh**2)))


def h1_seminorm(space: DiscreteSpace, coeffs: np.ndarray, exact_grad=None, quad_degree: int = 8) -> float:
    m = space.mesh
    rule = triangle_rule(quad_degree)
    g = space.evaluate_gradient(coeffs, rule.barycentric)
    if exact_grad is not None:
        g = g - evaluate_coefficient(exact_grad, physical_points(m, rule.barycentric), (2,))
    return float(np.sqrt(np.sum(rule.weights[None, :, None] * m.areas[:, None, None] * g**2)))


class QuadratureField:
    """A space's basis sampled at quadrature points of the domain or of tagged boundary facets.

    Used for the nonlinear terms ``(G(psi_h), w_h)`` where ``G`` acts
    pointwise, so integrals are formed directly from sampled values.
    """

    def __init__(self, space: DiscreteSpace, region: tuple | None = None, quad_degree: int = 6):
        m = space.mesh
        self.space = space
        if region is None:
            rule = triangle_rule(quad_degree)
            self.points = physical_points(m, rule.barycentric)
            self.weights = rule.weights[None, :] * m.areas[:, None]
            vals = space.values(rule.barycentric)
            self.basis = np.broadcast_to(vals[None], (m.n_cells,) + vals.shape)
            self.dofs = space.dof_map
        else:
            facets = m.facets_with_tag(*region)
            if not len(facets):
                raise ValueError(f"no boundary facets carry tags {region}")
            rule = line_rule(quad_degree)
            a = m.vertices[m.facets[facets, 0]]
            b = m.vertices[m.facets[facets, 1]]
            self.points = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
            self.weights = rule.weights[None, :] * m.facet_lengths[facets][:, None]
            self.dofs, self.basis = space.trace(facets, rule.points)
            self.facets = facets
        self.n_dofs = space.n_dofs

    def evaluate(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("eqi,ei->eq", self.basis, np.asarray(coeffs)[self.dofs])

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Vector ``int values * w_i``."""
        out = np.zeros(self.n_dofs)
        np.add.at(out, self.dofs, np.einsum("eq,eq,eqi->ei", self.weights, values, self.basis))
        return out

    def mass(self, values: np.ndarray) -> sp.csr_matrix:
        """Matrix ``int values * w_j * w_i``."""
        local = np.einsum("eq,eq,eqi,eqj->eij", self.weights, values, self.basis, self.basis)
        return _scatter(self.dofs, self.dofs, local, (self.n_dofs, self.n_dofs))
