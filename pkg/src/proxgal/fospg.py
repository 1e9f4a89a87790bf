"""Hybridized first-order-system Proximal Galerkin (FOSPG).

Unknowns per cell are the broken Raviart-Thomas flux ``q``, the broken
primal ``u`` and (for volume constraints) the latent ``psi``; the facet
multiplier ``u_hat`` is the only globally coupled field.  For constraints on
a boundary part the latent variable ``psi_hat`` lives on those facets.

Each proximal step solves

    (kinv q, r) - (u, div r) + (u_hat, r.n)                       = 0
    (div q, v) + A_C((u,u_hat),(v,.)) + c(u,v) + (psi - psi_old, v)/alpha = (f, v)
    -(q.n, v_hat) + A_C((u,u_hat),(0,v_hat)) [+ (psi_hat - psi_hat_old, v_hat)/alpha] = (g_N, v_hat)
    (u, w) - (grad R*(psi), w)                                     = 0

with the upwind advection form

    A_C = -(beta u, grad v) + <beta.n u_up, v - v_hat>,   u_up = u_hat if beta.n < 0 else u,

where the ``v_hat`` part is omitted on Neumann facets.  Newton corrections
are computed by cellwise static condensation onto the facet unknowns.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls

from .conforming import NewtonFailure, PGConfig, RunResult, limit_latent_increase, newton_solve
from .fem.assembly import evaluate_coefficient
from .fem.quadrature import line_rule, triangle_rule
from .fem.rt import RT_DIM, cell_frames, rt_basis
from .fem.solve import factorize, solve_sparse
from .fem.spaces import DiscreteSpace, cell_barycentric, physical_points

if TYPE_CHECKING:
    from .problems.base import VIProblem

log = logging.getLogger(__name__)

__all__ = [
    "HybridDiscretization",
    "HybridState",
    "NewtonFailure",
    "bound_preserving_average",
    "clement_interpolate",
    "fospg_step",
    "oswald_average",
    "reconstruct_feasible",
    "run_fospg",
]


def _scatter_matrix(rows, cols, local, shape):
    T = local.shape[0]
    R = np.broadcast_to(rows.reshape(T, -1, 1), local.shape)
    C = np.broadcast_to(cols.reshape(T, 1, -1), local.shape)
    return sp.coo_matrix((local.ravel(), (R.ravel(), C.ravel())), shape=shape).tocsr()


def _facet_basis(degree: int, s: np.ndarray) -> np.ndarray:
    if degree == 0:
        return np.ones((len(s), 1))
    return np.column_stack([1.0 - s, s])


class HybridDiscretization:
    """Local blocks and bookkeeping of the hybridized system on one mesh.

    Parameters
    ----------
    problem : VIProblem
    p : {0, 1}
        Degree of the primal/facet spaces (flux in ``RT_p``).
    q : int
        Degree of the latent space, ``q <= p``.
    dt : float, optional
        Backward-Euler step; adds ``(u, v)/dt`` to the cell operator.
    """

    def __init__(self, problem: VIProblem, p: int = 1, q: int = 0, dt: float | None = None, quad_degree: int = 6):
        if p not in (0, 1):
            raise ValueError(f"polynomial degree p must be 0 or 1, got {p}")
        if q > p or q < 0:
            raise ValueError(f"latent degree q={q} must satisfy 0 <= q <= p={p}")
        self.problem, self.p, self.q, self.dt = problem, p, q, dt
        m = self.mesh = problem.mesh
        T = m.n_cells
        self.boundary = problem.locus != "volume"
        self.nr = RT_DIM[p]
        self.nu = 1 if p == 0 else 3
        self.npsi = 0 if self.boundary else (1 if q == 0 else 3)
        self.nf = p + 1
        self.nI = self.nr + self.nu + self.npsi
        self.nL = 3 * self.nf
        self.sq = slice(0, self.nr)
        self.su = slice(self.nr, self.nr + self.nu)
        self.sp = slice(self.nr + self.nu, self.nI)

        # cell quadrature
        rule = triangle_rule(quad_degree)
        self.xq = physical_points(m, rule.barycentric)
        self.wq = rule.weights[None, :] * m.areas[:, None]
        self.Vu = DiscreteSpace("DG-P0" if p == 0 else "DG-P1", m)
        self.Phi_u = self.Vu.values(rule.barycentric)
        self.Grad_u = self.Vu.gradients(rule.barycentric)
        if not self.boundary:
            self.Vpsi = DiscreteSpace("DG-P0" if q == 0 else "DG-P1", m)
            self.Phi_psi = self.Vpsi.values(rule.barycentric)
        centers, scales = cell_frames(m)
        self.R, self.divR = rt_basis(p, self.xq, centers, scales)

        # facet quadrature, parameterized from the lower to the higher global vertex
        lrule = line_rule(quad_degree)
        self.s = lrule.points
        P = len(self.s)
        fid = m.cell_facets
        self.fid = fid
        a = m.vertices[m.facets[fid, 0]]
        b = m.vertices[m.facets[fid, 1]]
        self.xf = a[:, :, None, :] + self.s[None, None, :, None] * (b - a)[:, :, None, :]
        self.wf = lrule.weights[None, None, :] * m.facet_lengths[fid][:, :, None]
        sign = np.where(m.facet_cells[fid, 0] == np.arange(T)[:, None], 1.0, -1.0)
        self.normals = m.facet_normals[fid] * sign[:, :, None]
        bary_f = cell_barycentric(m, np.arange(T), self.xf.reshape(T, 3 * P, 2)).reshape(T, 3, P, 3)
        self.Phi_uf = bary_f if p == 1 else np.ones((T, 3, P, 1))
        Rf, _ = rt_basis(p, self.xf.reshape(T, 3 * P, 2), centers, scales)
        self.Rf = Rf.reshape(T, 3, P, self.nr, 2)
        self.Mu = _facet_basis(p, self.s)
        self.ldofs = (fid[:, :, None] * self.nf + np.arange(self.nf)).reshape(T, self.nL)
        self.n_hat = m.n_facets * self.nf

        # facet roles
        tags = m.facet_tags
        role = np.full(m.n_facets, "interior", dtype=object)
        for f in m.boundary_facets:
            t = str(tags[f])
            if t in problem.dirichlet:
                role[f] = "dirichlet"
            elif self.boundary and t == problem.locus:
                role[f] = "constraint"
            else:
                role[f] = "neumann"
        self.role = role
        dir_f = np.flatnonzero(role == "dirichlet")
        self.fixed = (dir_f[:, None] * self.nf + np.arange(self.nf)).ravel()
        self.free = np.setdiff1d(np.arange(self.n_hat), self.fixed)
        self.fixed_values = self._project_dirichlet(dir_f, lrule)
        self.keep_hat_advection = np.isin(role[fid], ["interior", "dirichlet"]).astype(float)

        if self.boundary:
            self.S_facets = m.facets_with_tag(problem.locus)
            nq1 = q + 1
            self.nS = len(self.S_facets) * nq1
            self.Mq = _facet_basis(q, self.s)
            wS = lrule.weights[None, :] * m.facet_lengths[self.S_facets][:, None]
            self.wS = wS
            aS = m.vertices[m.facets[self.S_facets, 0]]
            bS = m.vertices[m.facets[self.S_facets, 1]]
            self.xS = aS[:, None, :] + self.s[None, :, None] * (bS - aS)[:, None, :]
            self.S_dofs = (np.arange(len(self.S_facets))[:, None] * nq1 + np.arange(nq1))
            hat_dofs = self.S_facets[:, None] * self.nf + np.arange(self.nf)
            local = np.einsum("fq,qi,qj->fij", wS, self.Mu, self.Mq)
            self.H = _scatter_matrix(hat_dofs, self.S_dofs, local, (self.n_hat, self.nS))
            self.bounds = problem.constraint.bounds(self.xS)
        else:
            self.nS = 0
            self.bounds = problem.constraint.bounds(self.xq)
            self.Mupsi = np.einsum("tq,qi,qj->tij", self.wq, self.Phi_u, self.Phi_psi)
        self._assemble_linear()
        self.set_previous(None)

    # ----------------------------------------------------------- assembly
    def _project_dirichlet(self, dir_f, lrule) -> np.ndarray:
        m = self.mesh
        if not len(dir_f):
            return np.zeros(0)
        vals = []
        Mloc = np.einsum("q,qi,qj->ij", lrule.weights, self.Mu, self.Mu)
        tags = m.facet_tags
        a = m.vertices[m.facets[dir_f, 0]]
        b = m.vertices[m.facets[dir_f, 1]]
        x = a[:, None, :] + self.s[None, :, None] * (b - a)[:, None, :]
        out = np.zeros((len(dir_f), self.nf))
        for tag, g in self.problem.dirichlet.items():
            sel = np.flatnonzero(np.array([str(tags[f]) == tag for f in dir_f]))
            if not len(sel):
                continue
            gv = evaluate_coefficient(g, x[sel])
            rhs = np.einsum("q,fq,qi->fi", lrule.weights, gv, self.Mu)
            out[sel] = np.linalg.solve(Mloc, rhs.T).T
        vals.append(out.ravel())
        return np.concatenate(vals)

    def _assemble_linear(self) -> None:
        pb = self.problem
        T, nI, nL = self.mesh.n_cells, self.nI, self.nL
        sq, su = self.sq, self.su
        K = evaluate_coefficient(pb.kappa, self.xq, (2, 2))
        Kinv = np.linalg.inv(K)
        KII = np.zeros((T, nI, nI))
        KIF = np.zeros((T, nI, nL))
        KFI = np.zeros((T, nL, nI))
        KFF = np.zeros((T, nL, nL))
        KII[:, sq, sq] = np.einsum("tq,tqid,tqde,tqje->tij", self.wq, self.R, Kinv, self.R)
        Dqu = -np.einsum("tq,tqi,qj->tij", self.wq, self.divR, self.Phi_u)
        KII[:, sq, su] = Dqu
        KII[:, su, sq] = -np.transpose(Dqu, (0, 2, 1))
        # <u_hat, r.n> on each local facet
        rn = np.einsum("tfpid,tfd->tfpi", self.Rf, self.normals)
        C = np.einsum("tfp,tfpi,pm->tifm", self.wf, rn, self.Mu).reshape(T, self.nr, nL)
        KIF[:, sq, :] = C
        KFI[:, :, sq] = -np.transpose(C, (0, 2, 1))

        self.Muu = np.einsum("tq,qi,qj->tij", self.wq, self.Phi_u, self.Phi_u)
        reaction = np.zeros((T, self.nu, self.nu))
        if pb.c is not None:
            cq = evaluate_coefficient(pb.c, self.xq)
            reaction = np.einsum("tq,tq,qi,qj->tij", self.wq, cq, self.Phi_u, self.Phi_u)
        KII[:, su, su] += reaction
        if self.dt is not None:
            KII[:, su, su] += self.Muu / self.dt
        if pb.beta is not None:
            bq = evaluate_coefficient(pb.beta, self.xq, (2,))
            bf = evaluate_coefficient(pb.beta, self.xf, (2,))
            bn = np.einsum("tfpd,tfd->tfp", bf, self.normals)
            out = (bn >= 0).astype(float)
            inflow = 1.0 - out
            keep = self.keep_hat_advection[:, :, None]
            KII[:, su, su] += -np.einsum("tq,tqd,tqid,qj->tij", self.wq, bq, self.Grad_u, self.Phi_u)
            KII[:, su, su] += np.einsum("tfp,tfp,tfpi,tfpj->tij", self.wf, bn * out, self.Phi_uf, self.Phi_uf)
            KIF[:, su, :] += np.einsum("tfp,tfp,tfpi,pm->tifm", self.wf, bn * inflow, self.Phi_uf, self.Mu).reshape(T, self.nu, nL)
            KFI[:, :, su] += -np.einsum("tfp,tfp,tfpj,pm->tfmj", self.wf, bn * out * keep, self.Phi_uf, self.Mu).reshape(T, nL, self.nu)
            hh = -np.einsum("tfp,tfp,pm,pn->tfmn", self.wf, bn * inflow * keep, self.Mu, self.Mu)
            for f in range(3):
                blk = slice(f * self.nf, (f + 1) * self.nf)
                KFF[:, blk, blk] += hh[:, f]
            self.beta_normal = bn
        else:
            self.beta_normal = np.zeros(self.wf.shape)
        self.KII, self.KIF, self.KFI, self.KFF = KII, KIF, KFI, KFF

        bI = np.zeros((T, nI))
        if pb.f is not None:
            fq = evaluate_coefficient(pb.f, self.xq)
            bI[:, su] = np.einsum("tq,tq,qi->ti", self.wq, fq, self.Phi_u)
        self.bI_static = bI
        bF = np.zeros(self.n_hat)
        m = self.mesh
        for tag, g in pb.neumann.items():
            facets = m.facets_with_tag(tag)
            cells = m.facet_cells[facets, 0]
            loc = np.argmax(m.cell_facets[cells] == facets[:, None], axis=1)
            gv = evaluate_coefficient(g, self.xf[cells, loc])
            vals = np.einsum("fp,fp,pm->fm", self.wf[cells, loc], gv, self.Mu)
            np.add.at(bF, facets[:, None] * self.nf + np.arange(self.nf), vals)
        self.bF = bF

    def set_previous(self, u_prev: np.ndarray | None) -> None:
        """Backward-Euler hook: adds ``(u_prev, v)/dt`` to the cell load."""
        bI = self.bI_static.copy()
        if u_prev is not None:
            if self.dt is None:
                raise ValueError("previous state given without a time step")
            bI[:, self.su] += np.einsum("tij,tj->ti", self.Muu, u_prev) / self.dt
        self.bI = bI

    # ----------------------------------------------------- nonlinear terms
    def latent_values(self, psi: np.ndarray) -> np.ndarray:
        if self.boundary:
            return np.einsum("fq,fq->fq", np.ones_like(self.wS), psi[self.S_dofs] @ self.Mq.T)
        return psi @ self.Phi_psi.T

    def observable(self, psi: np.ndarray) -> np.ndarray:
        """``grad R*(psi)`` at the latent quadrature points."""
        return self.problem.constraint.grad_dual(self.latent_values(psi), bounds=self.bounds)

    def _coupling(self, psi):
        lm = self.problem.constraint
        vals = self.latent_values(psi)
        obs = lm.grad_dual(vals, bounds=self.bounds)
        dobs = lm.grad_dual_derivative(vals, bounds=self.bounds)
        if self.boundary:
            G = np.zeros(self.nS)
            np.add.at(G, self.S_dofs, np.einsum("fq,fq,qi->fi", self.wS, obs, self.Mq))
            local = np.einsum("fq,fq,qi,qj->fij", self.wS, dobs, self.Mq, self.Mq)
            return G, _scatter_matrix(self.S_dofs, self.S_dofs, local, (self.nS, self.nS))
        G = np.einsum("tq,tq,qi->ti", self.wq, obs, self.Phi_psi)
        Mp = np.einsum("tq,tq,qi,qj->tij", self.wq, dobs, self.Phi_psi, self.Phi_psi)
        return G, Mp

    # ---------------------------------------------------- vector packing
    def pack(self, xI, x_hat, x_S):
        return np.concatenate([xI.ravel(), x_hat[self.free], x_S])

    def unpack(self, x):
        T = self.mesh.n_cells
        nI = T * self.nI
        nfree = len(self.free)
        xI = x[:nI].reshape(T, self.nI)
        x_hat = np.zeros(self.n_hat)
        x_hat[self.free] = x[nI:nI + nfree]
        x_hat[self.fixed] = self.fixed_values
        return xI, x_hat, x[nI + nfree:]

    def latent_mask(self) -> np.ndarray:
        """Boolean mask of the latent entries in a packed vector."""
        T = self.mesh.n_cells
        mask = np.zeros(T * self.nI + len(self.free) + (self.nS if self.boundary else 0), dtype=bool)
        if self.boundary:
            mask[T * self.nI + len(self.free):] = True
        else:
            cell = np.zeros((T, self.nI), dtype=bool)
            cell[:, self.sp] = True
            mask[:T * self.nI] = cell.ravel()
        return mask

    def _KII_alpha(self, alpha):
        K = self.KII.copy()
        if not self.boundary:
            K[:, self.su, self.sp] += self.Mupsi / alpha
            K[:, self.sp, self.su] += np.transpose(self.Mupsi, (0, 2, 1))
        return K

    def residual(self, x, alpha, psi_old):
        xI, x_hat, x_S = self.unpack(x)
        K = self._KII_alpha(alpha)
        xl = x_hat[self.ldofs]
        RI = np.einsum("tij,tj->ti", K, xI) + np.einsum("tij,tj->ti", self.KIF, xl) - self.bI
        RFloc = np.einsum("tij,tj->ti", self.KFI, xI) + np.einsum("tij,tj->ti", self.KFF, xl)
        RF = np.zeros(self.n_hat)
        np.add.at(RF, self.ldofs, RFloc)
        RF -= self.bF
        if self.boundary:
            G, _ = self._coupling(x_S)
            RF += self.H @ (x_S - psi_old) / alpha
            RS = self.H.T @ x_hat - G
        else:
            G, _ = self._coupling(xI[:, self.sp])
            RI[:, self.su] -= np.einsum("tij,tj->ti", self.Mupsi, psi_old) / alpha
            RI[:, self.sp] -= G
            RS = np.zeros(0)
        return np.concatenate([RI.ravel(), RF[self.free], RS])

    def _jacobian_blocks(self, x, alpha):
        xI, _, x_S = self.unpack(x)
        J = self._KII_alpha(alpha)
        if self.boundary:
            _, MS = self._coupling(x_S)
        else:
            _, Mp = self._coupling(xI[:, self.sp])
            J[:, self.sp, self.sp] -= Mp
            MS = None
        return J, MS

    def correction_condensed(self, x, r, alpha):
        """Newton correction by cellwise elimination of ``(q, u, psi)``."""
        T = self.mesh.n_cells
        J, MS = self._jacobian_blocks(x, alpha)
        nI = T * self.nI
        nfree = len(self.free)
        RI = r[:nI].reshape(T, self.nI)
        RF = np.zeros(self.n_hat)
        RF[self.free] = r[nI:nI + nfree]
        RS = r[nI + nfree:]
        Jinv = np.linalg.inv(J)
        Z = Jinv @ self.KIF
        y = np.einsum("tij,tj->ti", Jinv, RI)
        S = _scatter_matrix(self.ldofs, self.ldofs, self.KFF - self.KFI @ Z, (self.n_hat, self.n_hat))
        rhs = np.zeros(self.n_hat)
        np.add.at(rhs, self.ldofs, np.einsum("tij,tj->ti", self.KFI, y))
        rhs = rhs - RF
        Sff = S[self.free][:, self.free]
        if self.boundary:
            Hf = self.H[self.free]
            big = sp.bmat([[Sff, Hf / alpha], [Hf.T, -MS]], format="csc")
            sol = solve_sparse(big, np.concatenate([rhs[self.free], -RS]))
            dF_free, dS = sol[:nfree], sol[nfree:]
        else:
            dF_free = solve_sparse(Sff, rhs[self.free])
            dS = np.zeros(0)
        dF = np.zeros(self.n_hat)
        dF[self.free] = dF_free
        dI = -y - np.einsum("tij,tj->ti", Z, dF[self.ldofs])
        return np.concatenate([dI.ravel(), dF_free, dS])

    def monolithic_jacobian(self, x, alpha) -> sp.csr_matrix:
        """Global sparse Jacobian in the packed ordering (testing path)."""
        T = self.mesh.n_cells
        J, MS = self._jacobian_blocks(x, alpha)
        nI = T * self.nI
        nfree = len(self.free)
        gI = np.arange(nI).reshape(T, self.nI)
        pos = -np.ones(self.n_hat, dtype=np.int64)
        pos[self.free] = nI + np.arange(nfree)
        gF = pos[self.ldofs]
        n = nI + nfree + self.nS

        def block(rows, cols, local):
            T_, nr_, nc_ = local.shape
            R = np.broadcast_to(rows[:, :, None], local.shape).ravel()
            C = np.broadcast_to(cols[:, None, :], local.shape).ravel()
            v = local.ravel()
            ok = (R >= 0) & (C >= 0)
            return sp.coo_matrix((v[ok], (R[ok], C[ok])), shape=(n, n))

        M = block(gI, gI, J) + block(gI, gF, self.KIF) + block(gF, gI, self.KFI) + block(gF, gF, self.KFF)
        if self.boundary:
            off = nI + nfree
            Hf = self.H[self.free].tocoo()
            M = M + sp.coo_matrix((Hf.data / alpha, (Hf.row + nI, Hf.col + off)), shape=(n, n))
            M = M + sp.coo_matrix((Hf.data, (Hf.col + off, Hf.row + nI)), shape=(n, n))
            Mc = MS.tocoo()
            M = M + sp.coo_matrix((-Mc.data, (Mc.row + off, Mc.col + off)), shape=(n, n))
        return M.tocsr()

    def correction_monolithic(self, x, r, alpha):
        return factorize(self.monolithic_jacobian(x, alpha)).solve(-r)

    # --------------------------------------------------------- evaluation
    def u_at_quadrature(self, u: np.ndarray) -> np.ndarray:
        return u @ self.Phi_u.T

    def q_at_quadrature(self, q: np.ndarray) -> np.ndarray:
        return np.einsum("tqid,ti->tqd", self.R, q)

    def l2(self, values: np.ndarray) -> float:
        if values.ndim == 3:
            values = np.sqrt(np.sum(values**2, axis=-1))
        return float(np.sqrt(np.sum(self.wq * values**2)))

    def cell_means(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("tq,tq->t", self.wq, self.u_at_quadrature(u)) / self.mesh.areas

    def evaluate_u(self, u: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Point values of the broken field ``u`` (cell located by search)."""
        points = np.atleast_2d(points)
        cells = self.mesh.locate(points)
        if np.any(cells < 0):
            raise ValueError("evaluation point outside the mesh")
        lam = cell_barycentric(self.mesh, cells, points[:, None, :])[:, 0, :]
        if self.p == 0:
            return u[cells, 0]
        return np.einsum("ni,ni->n", lam, u[cells])

    def evaluate_latent(self, psi: np.ndarray, points: np.ndarray) -> np.ndarray:
        """``grad R*(psi)`` at arbitrary points (volume constraints)."""
        if self.boundary:
            raise ValueError("point evaluation of the latent field needs a volume constraint")
        points = np.atleast_2d(points)
        cells = self.mesh.locate(points)
        lam = cell_barycentric(self.mesh, cells, points[:, None, :])[:, 0, :]
        vals = psi[cells, 0] if self.q == 0 else np.einsum("ni,ni->n", lam, psi[cells])
        return self.problem.constraint.grad_dual(vals, x=points)


    def interpolate_latent(self, psi: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Continuous read-out of ``grad R*(psi)``.

        Cell means of the observable are averaged to the vertices and the
        resulting piecewise-linear field is evaluated at ``points``.
        """
        if self.boundary:
            raise ValueError("point evaluation of the latent field needs a volume constraint")
        means = _cell_mean_latent(self, psi)
        nodal = oswald_average(self.mesh, np.repeat(means[:, None], 3, axis=1))
        points = np.atleast_2d(points)
        cells = self.mesh.locate(points)
        if np.any(cells < 0):
            raise ValueError("evaluation point outside the mesh")
        lam = cell_barycentric(self.mesh, cells, points[:, None, :])[:, 0, :]
        return np.einsum("ni,ni->n", lam, nodal[self.mesh.cells[cells]])


@dataclass
class HybridState:
    """Current iterate and running weighted sums."""

    q: np.ndarray
    u: np.ndarray
    u_hat: np.ndarray
    psi: np.ndarray
    psi_initial: np.ndarray
    k: int = 0
    alpha_sum: float = 0.0
    sums: dict = field(default_factory=dict)
    psi_previous: np.ndarray | None = None
    alpha_last: float | None = None
    history: list = field(default_factory=list)

    def accumulate(self, name: str, value: np.ndarray, alpha: float) -> None:
        self.sums[name] = alpha * value if name not in self.sums else self.sums[name] + alpha * value

    def average(self, name: str) -> np.ndarray:
        return self.sums[name] / self.alpha_sum

    @property
    def u_average(self):
        return self.average("u") if self.k else self.u

    @property
    def q_average(self):
        return self.average("q") if self.k else self.q


def initial_hybrid_state(disc: HybridDiscretization) -> HybridState:
    T = disc.mesh.n_cells
    psi0 = disc.problem.psi0
    if disc.boundary:
        if callable(psi0):
            psi = np.asarray(psi0(disc.xS.mean(axis=1)), float).repeat(disc.q + 1)
        else:
            psi = np.full(disc.nS, float(psi0))
    else:
        if callable(psi0):
            psi = disc.Vpsi.interpolate(psi0).reshape(T, disc.npsi)
        else:
            psi = np.full((T, disc.npsi), float(psi0))
    u_hat = np.zeros(disc.n_hat)
    u_hat[disc.fixed] = disc.fixed_values
    return HybridState(q=np.zeros((T, disc.nr)), u=np.zeros((T, disc.nu)), u_hat=u_hat, psi=psi, psi_initial=psi.copy())


def fospg_step(disc: HybridDiscretization, state: HybridState, alpha: float, config: PGConfig,
               condense: bool = True, record: list | None = None):
    """One proximal subproblem; returns ``(q, u, u_hat, psi, newton_iters, residual)``."""
    psi_old = state.psi.ravel() if disc.boundary else state.psi
    xI = np.concatenate([state.q, state.u] + ([] if disc.boundary else [state.psi]), axis=1)
    x0 = disc.pack(xI, state.u_hat, state.psi if disc.boundary else np.zeros(0))

    def residual(x):
        return disc.residual(x, alpha, psi_old)

    solve = disc.correction_condensed if condense else disc.correction_monolithic
    correction = limit_latent_increase(lambda x, r: solve(x, r, alpha), disc.latent_mask(), config.max_latent_increase)

    x, its, rn = newton_solve(residual, correction, x0, config.newton_tol, config.max_newton_iters, record)
    xI, x_hat, x_S = disc.unpack(x)
    q = xI[:, disc.sq].copy()
    u = xI[:, disc.su].copy()
    psi = x_S.copy() if disc.boundary else xI[:, disc.sp].copy()
    return q, u, x_hat, psi, its, rn


def _cell_mean_latent(disc: HybridDiscretization, psi: np.ndarray) -> np.ndarray:
    obs = disc.observable(psi)
    return np.einsum("tq,tq->t", disc.wq, obs) / disc.mesh.areas


def run_fospg(problem: VIProblem, config: PGConfig | None = None, p: int = 1, q: int = 0,
              disc: HybridDiscretization | None = None, state: HybridState | None = None,
              condense: bool = True, keep_history: bool = False, callback=None) -> RunResult:
    """Proximal loop for the hybridized method."""
    config = config or PGConfig()
    t0 = time.perf_counter()
    disc = disc or HybridDiscretization(problem, p, q)
    state = state or initial_hybrid_state(disc)
    pb = disc.problem
    exact_u = evaluate_coefficient(pb.exact, disc.xq) if pb.exact is not None else None
    exact_q = pb.exact_flux(disc.xq) if pb.exact_grad is not None else None
    lo, hi = disc.bounds
    records = []
    converged = False
    for k in range(1, config.max_prox_iters + 1):
        alpha = config.alpha(k)
        u_old, avg_old = state.u, state.u_average
        qk, uk, uh, psi, its, rn = fospg_step(disc, state, alpha, config, condense)
        state.psi_previous, state.alpha_last = state.psi, alpha
        state.q, state.u, state.u_hat, state.psi = qk, uk, uh, psi
        state.k += 1
        state.alpha_sum += alpha
        state.accumulate("u", uk, alpha)
        state.accumulate("q", qk, alpha)
        state.accumulate("u_hat", uh, alpha)
        if not disc.boundary and disc.q == 0:
            state.accumulate("latent_mean", _cell_mean_latent(disc, psi), alpha)
        if keep_history:
            state.history.append((alpha, qk.copy(), uk.copy(), uh.copy(), psi.copy()))
        obs = disc.observable(psi)
        uq = disc.u_at_quadrature(uk)
        entry = {
            "k": k,
            "alpha": alpha,
            "newton_iters": its,
            "newton_residual": rn,
            "du_L2": disc.l2(disc.u_at_quadrature(uk - u_old)),
            "davg_L2": disc.l2(disc.u_at_quadrature(state.u_average - avg_old)),
            "min_slack": float(min(np.min(obs - lo), np.min(hi - obs))),
            "dmp_min": float(obs.min()),
            "dmp_max": float(obs.max()),
            "u_min": float(uq.min()),
            "u_max": float(uq.max()),
        }
        if exact_u is not None:
            entry["err_u_L2"] = disc.l2(uq - exact_u)
            entry["err_avg_L2"] = disc.l2(disc.u_at_quadrature(state.u_average) - exact_u)
        if exact_q is not None:
            entry["err_q_L2"] = disc.l2(disc.q_at_quadrature(qk) - exact_q)
            entry["err_qavg_L2"] = disc.l2(disc.q_at_quadrature(state.q_average) - exact_q)
        records.append(entry)
        if callback is not None:
            callback(disc, state, entry)
        key = "du_L2" if config.stop_on == "raw" else "davg_L2"
        log.debug("k=%d alpha=%.3g newton=%d %s=%.3e", k, alpha, its, key, entry[key])
        if k >= config.min_prox_iters and entry[key] <= config.stop_tol:
            converged = True
            break
    return RunResult(state, records, converged, disc, time.perf_counter() - t0)


def recover_dual(state: HybridState):
    """``(lambda_bar, lambda_k)`` from the latent history."""
    if state.k == 0:
        raise ValueError("no proximal step has been taken yet")
    return (state.psi_initial - state.psi) / state.alpha_sum, (state.psi_previous - state.psi) / state.alpha_last


# ------------------------------------------------------------- reconstructions
def bound_preserving_average(disc: HybridDiscretization, history=None, state: HybridState | None = None) -> np.ndarray:
    """Cellwise ``sum_k alpha_k Pi0 grad R*(psi_k) / sum_k alpha_k`` (requires ``q = 0``).

    ``history`` is a sequence of ``(alpha, psi)`` pairs; alternatively the
    running sum stored in ``state`` is used.
    """
    if disc.boundary or disc.q != 0:
        raise ValueError("the bound-preserving average needs a piecewise-constant volume latent space (q = 0)")
    if history is None:
        if state is None:
            raise ValueError("need either a history or a state")
        return state.average("latent_mean")
    total = 0.0
    acc = np.zeros(disc.mesh.n_cells)
    for alpha, psi in history:
        acc += alpha * _cell_mean_latent(disc, psi)
        total += alpha
    return acc / total


_CLEMENT_CACHE: dict = {}


def clement_weights(mesh, dirichlet_tags=()):
    """Convex centroid weights per node and the facet chosen for Dirichlet boundary nodes.

    Returns ``(rows, cols, vals, boundary_facet)`` where ``rows/cols/vals``
    define the node-by-cell weight matrix and ``boundary_facet[z]`` is the
    lowest-index Dirichlet facet touching node ``z`` (``-1`` otherwise).
    """
    key = (id(mesh), tuple(dirichlet_tags))
    if key in _CLEMENT_CACHE and _CLEMENT_CACHE[key][0] is mesh:
        return _CLEMENT_CACHE[key][1]
    V = mesh.n_vertices
    cents = mesh.centroids
    areas = mesh.areas
    patches = [[] for _ in range(V)]
    for t, cell in enumerate(mesh.cells):
        for v in cell:
            patches[v].append(t)
    bfacet = -np.ones(V, dtype=np.int64)
    dir_facets = mesh.facets_with_tag(*dirichlet_tags) if dirichlet_tags else np.zeros(0, np.int64)
    for f in sorted(dir_facets):
        for v in mesh.facets[f]:
            if bfacet[v] < 0:
                bfacet[v] = f
    on_boundary = np.zeros(V, dtype=bool)
    on_boundary[np.unique(mesh.facets[mesh.boundary_facets])] = True
    rows, cols, vals = [], [], []
    for z in range(V):
        cells = np.array(patches[z])
        if bfacet[z] >= 0:
            continue
        if on_boundary[z]:
            # no convex centroid representation on the boundary: area-weighted means
            w = areas[cells] / areas[cells].sum()
        else:
            A = np.vstack([cents[cells].T, np.ones(len(cells))])
            b = np.append(mesh.vertices[z], 1.0)
            w, res = nnls(A, b)
            if res > 1e-10:
                raise AssertionError(f"node {z} has no convex centroid weights (residual {res:.2e})")
        rows.append(np.full(len(cells), z))
        cols.append(cells)
        vals.append(w)
    out = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), bfacet)
    _CLEMENT_CACHE[key] = (mesh, out)
    return out


def clement_interpolate(disc: HybridDiscretization, u: np.ndarray, u_hat: np.ndarray, dirichlet_tags=None) -> np.ndarray:
    """Continuous P1 nodal values from cell means of ``u`` and facet values ``u_hat``.

    Interior nodes combine cell means with convex centroid weights; nodes on
    Dirichlet facets take the dual-basis moment of ``u_hat`` on the
    lowest-index such facet; remaining boundary nodes use area-weighted
    cell means.
    """
    mesh = disc.mesh
    tags = tuple(disc.problem.dirichlet) if dirichlet_tags is None else tuple(dirichlet_tags)
    rows, cols, vals, bfacet = clement_weights(mesh, tags)
    means = disc.cell_means(u) if u.ndim == 2 else np.asarray(u, float)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, rows, vals * means[cols])
    zb = np.flatnonzero(bfacet >= 0)
    if len(zb):
        f = bfacet[zb]
        coeff = u_hat.reshape(-1, disc.nf)[f]
        if disc.nf == 1:
            out[zb] = coeff[:, 0]
        else:
            # P1 on the facet is nodal: the dual-basis moment is the endpoint coefficient
            first = mesh.facets[f, 0] == zb
            out[zb] = np.where(first, coeff[:, 0], coeff[:, 1])
    return out


def reconstruct_feasible(disc: HybridDiscretization, u: np.ndarray, u_hat: np.ndarray, obstacle=None) -> np.ndarray:
    """``C_h(u - phi, u_hat - phi) + phi`` at the mesh nodes.

    ``obstacle`` defaults to the lower bound of the problem's constraint.
    Raises ``ValueError`` if some cell mean of ``u - phi`` is negative.
    """
    mesh = disc.mesh
    lm = disc.problem.constraint
    phi = obstacle if obstacle is not None else lm.lower
    if phi is None or (np.isscalar(phi) and not np.isfinite(phi)):
        phi = 0.0
    phi_cell = np.einsum("tq,tq->t", disc.wq, evaluate_coefficient(phi, disc.xq)) / mesh.areas
    means = disc.cell_means(u) - phi_cell
    if np.any(means < -1e-12):
        bad = int(np.argmin(means))
        raise ValueError(f"cell {bad} has negative mean slack {means[bad]:.3e}; reconstruction would be infeasible")
    # subtract phi from the facet values via its L2 projection on each facet
    s = disc.s
    w = line_rule(6).weights
    a = mesh.vertices[mesh.facets[:, 0]]
    b = mesh.vertices[mesh.facets[:, 1]]
    x = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    phif = evaluate_coefficient(phi, x)
    Mloc = np.einsum("q,qi,qj->ij", w, disc.Mu, disc.Mu)
    proj = np.linalg.solve(Mloc, np.einsum("q,fq,qi->fi", w, phif, disc.Mu).T).T.ravel()
    nodal = clement_interpolate(disc, means, u_hat - proj)
    return nodal + evaluate_coefficient(phi, mesh.vertices)


def bounded_reconstruction(disc: HybridDiscretization, psi: np.ndarray, u_hat: np.ndarray) -> np.ndarray:
    """Nodal field from the cell means of ``grad R*(psi)`` (constant bounds only).

    Interior nodes are convex combinations of values inside ``(lo, hi)``;
    Dirichlet nodes take the boundary data.  Results are kept strictly
    inside away from Dirichlet nodes, as float rounding of a convex
    combination can land on a bound.
    """
    lm = disc.problem.constraint
    if callable(lm.lower) or callable(lm.upper):
        raise ValueError("bounded reconstruction needs constant bounds")
    lo = -np.inf if lm.lower is None else float(lm.lower)
    hi = np.inf if lm.upper is None else float(lm.upper)
    means = _cell_mean_latent(disc, psi)
    nodal = clement_interpolate(disc, means, u_hat)
    _, _, _, bfacet = clement_weights(disc.mesh, tuple(disc.problem.dirichlet))
    inner = bfacet < 0
    nodal[inner] = np.clip(nodal[inner], np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
    nodal[~inner] = np.clip(nodal[~inner], lo, hi)
    return nodal


def oswald_average(mesh, u_local: np.ndarray) -> np.ndarray:
    """Nodal arithmetic mean of a broken P1 field given per cell at its vertices."""
    u_local = np.asarray(u_local, dtype=float).reshape(mesh.n_cells, 3)
    total = np.zeros(mesh.n_vertices)
    count = np.zeros(mesh.n_vertices)
    np.add.at(total, mesh.cells, u_local)
    np.add.at(count, mesh.cells, 1.0)
    return total / count
