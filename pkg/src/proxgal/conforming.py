"""Conforming Proximal Galerkin iteration.

Each proximal step solves, for ``(u_h, psi_h)`` in ``V_h x W_h``,

    A(u_h, v) + (1/alpha_k) b(v, psi_h - psi_prev) = F(v)      for all v in V_h
    b(u_h, w) - (grad R*(psi_h), w)                 = 0         for all w in W_h

by Newton's method.  ``b`` is the volume mass between ``V_h`` and ``W_h`` or,
for constraints on a boundary part, the trace mass on that part.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from .fem.assembly import (
    QuadratureField,
    assemble_conforming_A,
    assemble_load,
    assemble_mass,
    evaluate_coefficient,
    h1_seminorm,
    l2_norm,
)
from .fem.solve import factorize
from .fem.spaces import DiscreteSpace

if TYPE_CHECKING:
    from .problems.base import VIProblem

log = logging.getLogger(__name__)

#: pairs known to satisfy the discrete inf-sup condition
STABLE_PAIRS = {("P1-bubble", "DG-P0"), ("P1", "P1"), ("P1", "Trace-P1")}


class NewtonFailure(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ProximalLimitReached(RuntimeError):
    """Maximum number of proximal iterations exhausted before the stopping test."""


@dataclass
class PGConfig:
    """Parameters of the proximal loop.

    ``alpha_k = alpha0 * growth**(k-1)`` for ``k = 1, 2, ...``.
    """

    alpha0: float = 1.0
    growth: float = 2.0
    stop_tol: float = 1e-10
    stop_norm: str = "L2"
    stop_on: str = "raw"
    max_prox_iters: int = 100
    newton_tol: float = 1e-11
    max_newton_iters: int = 60
    min_prox_iters: int = 1
    max_latent_increase: float | None = None

    def __post_init__(self):
        if self.alpha0 <= 0 or self.growth < 1:
            raise ValueError("need alpha0 > 0 and growth >= 1")
        if self.stop_norm not in ("L2", "H1"):
            raise ValueError("stop_norm must be 'L2' or 'H1'")
        if self.stop_on not in ("raw", "average"):
            raise ValueError("stop_on must be 'raw' or 'average'")

    def alpha(self, k: int) -> float:
        return self.alpha0 * self.growth ** (k - 1)


@dataclass
class ProximalState:
    """Iterate ``(u, psi)`` with the running sums for the weighted averages."""

    u: np.ndarray
    psi: np.ndarray
    psi_initial: np.ndarray
    k: int = 0
    alpha_sum: float = 0.0
    weighted_u: np.ndarray | None = None
    psi_previous: np.ndarray | None = None
    alpha_last: float | None = None
    history: list = field(default_factory=list)

    def accept(self, u: np.ndarray, psi: np.ndarray, alpha: float, keep_history: bool = False) -> None:
        self.psi_previous = self.psi
        self.alpha_last = alpha
        self.u, self.psi = u, psi
        self.k += 1
        self.alpha_sum += alpha
        self.weighted_u = alpha * u if self.weighted_u is None else self.weighted_u + alpha * u
        if keep_history:
            self.history.append((alpha, u.copy(), psi.copy()))

    @property
    def u_average(self) -> np.ndarray:
        if self.k == 0:
            return self.u
        return self.weighted_u / self.alpha_sum


def recover_dual(state: ProximalState) -> tuple[np.ndarray, np.ndarray]:
    """``(lambda_bar, lambda_k)``: averaged and latest multiplier coefficients.

    ``lambda_k = (psi_{k-1} - psi_k) / alpha_k`` and
    ``lambda_bar = (psi_0 - psi_l) / sum(alpha)``.
    """
    if state.k == 0:
        raise ValueError("no proximal step has been taken yet")
    lam_k = (state.psi_previous - state.psi) / state.alpha_last
    lam_bar = (state.psi_initial - state.psi) / state.alpha_sum
    return lam_bar, lam_k


def _dirichlet_values(space: DiscreteSpace, problem: VIProblem) -> tuple[np.ndarray, np.ndarray]:
    m = space.mesh
    dofs, vals = [], []
    for tag, g in problem.dirichlet.items():
        v = m.vertices_with_tag(tag)
        dofs.append(v)
        vals.append(evaluate_coefficient(g, m.vertices[v]))
    if not dofs:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    uniq, first = np.unique(dofs, return_index=True)
    return uniq, vals[first]


class ConformingDiscretization:
    """Assembled linear operators and the nonlinear coupling for one mesh."""

    def __init__(
        self,
        problem: VIProblem,
        pair: tuple[str, str] = ("P1-bubble", "DG-P0"),
        quad_degree: int = 6,
        dt: float | None = None,
    ):
        self.problem = problem
        mesh = problem.mesh
        boundary = problem.locus != "volume"
        trial_kind, latent_kind = pair
        if boundary and latent_kind != "Trace-P1":
            latent_kind = "Trace-P1"
        if (trial_kind, latent_kind) not in STABLE_PAIRS:
            warnings.warn(f"space pair {(trial_kind, latent_kind)} is not known to be inf-sup stable", stacklevel=2)
        self.V = DiscreteSpace(trial_kind, mesh)
        region = (problem.locus,) if boundary else None
        self.W = DiscreteSpace(latent_kind, mesh, tags=region or ())
        A = assemble_conforming_A(
            self.V, problem.kappa, problem.beta, problem.c, skew=problem.skew,
            coef_degree=problem.coef_degree, quad_degree=quad_degree,
        )
        F = assemble_load(self.V, problem.f, problem.neumann, quad_degree=quad_degree)
        self.mass_VV = assemble_mass(self.V, self.V, quad_degree=quad_degree)
        self.dt = dt
        if dt is not None:
            A = A + self.mass_VV / dt
        self.A = A.tocsr()
        self.F_static = F
        self.B = assemble_mass(self.V, self.W, region=region, quad_degree=quad_degree).tocsr()
        self.coupling = QuadratureField(self.W, region=region, quad_degree=quad_degree)
        self.bounds = problem.constraint.bounds(self.coupling.points)
        self.fixed, self.fixed_values = _dirichlet_values(self.V, problem)
        self.free = np.setdiff1d(np.arange(self.V.n_dofs), self.fixed)
        self.A_ff = self.A[self.free][:, self.free].tocsr()
        self.A_fd = self.A[self.free][:, self.fixed].tocsr()
        self.B_f = self.B[:, self.free].tocsr()
        self.B_d = self.B[:, self.fixed].tocsr()
        self.Bt_f = self.B_f.T.tocsr()
        self.set_previous(None)

    def set_previous(self, u_prev: np.ndarray | None) -> None:
        """Time-stepping hook: load becomes ``F + M u_prev / dt``."""
        F = self.F_static.copy()
        if u_prev is not None:
            if self.dt is None:
                raise ValueError("previous state given without a time step")
            F += self.mass_VV @ u_prev / self.dt
        self.F = F
        self.rhs_free = F[self.free] - self.A_fd @ self.fixed_values
        self.B_lift = self.B_d @ self.fixed_values

    # -------------------------------------------------------------- pieces
    def full(self, u_free: np.ndarray) -> np.ndarray:
        u = np.zeros(self.V.n_dofs)
        u[self.free] = u_free
        u[self.fixed] = self.fixed_values
        return u

    def observable(self, psi: np.ndarray) -> np.ndarray:
        """``grad R*(psi_h)`` at the coupling quadrature points."""
        return self.problem.constraint.grad_dual(self.coupling.evaluate(psi), bounds=self.bounds)

    def residual(self, u_free, psi, psi_prev, alpha):
        r1 = self.A_ff @ u_free + self.Bt_f @ (psi - psi_prev) / alpha - self.rhs_free
        r2 = self.B_f @ u_free + self.B_lift - self.coupling.integrate(self.observable(psi))
        return r1, r2

    def jacobian(self, psi, alpha) -> sp.csc_matrix:
        lm = self.problem.constraint
        d = lm.grad_dual_derivative(self.coupling.evaluate(psi), bounds=self.bounds)
        Mp = self.coupling.mass(d)
        return sp.bmat([[self.A_ff, self.Bt_f / alpha], [self.B_f, -Mp]], format="csc")

    def initial_state(self) -> ProximalState:
        psi0 = self.problem.psi0
        if callable(psi0):
            psi = self.W.interpolate(psi0) if self.W.kind != "Trace-P1" else np.asarray(psi0(self.W.mesh.vertices[self.W.vertex_ids]), float)
        else:
            psi = np.full(self.W.n_dofs, float(psi0))
        u = self.full(np.zeros(len(self.free)))
        return ProximalState(u=u, psi=psi, psi_initial=psi.copy())


def newton_solve(residual, solve_linearized, x0: np.ndarray, tol: float, max_iter: int, record: list | None = None):
    """Newton iteration with residual-based backtracking (at most 30 halvings).

    ``residual(x)`` returns a vector and ``solve_linearized(x, r)`` the
    Newton correction ``dx`` solving ``J(x) dx = -r``.
    Returns ``(x, iterations, residual_norm)``.
    """
    x = x0.copy()
    r = residual(x)
    rn = float(np.linalg.norm(r))
    for it in range(max_iter + 1):
        if record is not None:
            record.append(x.copy())
        if rn <= tol:
            return x, it, rn
        if it == max_iter:
            break
        dx = solve_linearized(x, r)
        t = 1.0
        for _ in range(31):
            trial = x + t * dx
            rt = residual(trial)
            rtn = float(np.linalg.norm(rt))
            if np.isfinite(rtn) and rtn < rn:
                break
            t *= 0.5
        else:
            # no decrease: acceptable only when already at round-off level
            if rn <= 1e3 * tol or np.linalg.norm(dx) <= 1e-14 * (1.0 + np.linalg.norm(x)):
                return x, it, rn
            raise NewtonFailure(f"line search failed at Newton iteration {it} (residual {rn:.3e})", rn)
        stalled = rtn > 0.5 * rn and rtn <= 1e3 * tol
        x, r, rn = trial, rt, rtn
        if stalled:
            # round-off floor: further steps no longer reduce the residual
            return x, it + 1, rn
    raise NewtonFailure(f"Newton did not converge in {max_iter} iterations (residual {rn:.3e})", rn)


def limit_latent_increase(solve_linearized, mask: np.ndarray, cap: float | None):
    """Clip upward latent increments to ``cap`` so ``exp`` cannot overflow.

    Downward moves are left alone: they only push the observable towards its
    bound.  Near convergence increments are small and the clip is inactive.
    """
    if cap is None:
        return solve_linearized

    def solve(x, r):
        dx = solve_linearized(x, r)
        dx[mask] = np.minimum(dx[mask], cap)
        return dx

    return solve


def sparse_newton_correction(jacobian):
    """Adapter turning a sparse-Jacobian callback into a correction solver."""

    def solve(x, r):
        return factorize(jacobian(x)).solve(-r)

    return solve


def proximal_step(disc: ConformingDiscretization, state: ProximalState, alpha: float, config: PGConfig, record=None):
    """Solve one proximal subproblem warm-started from ``state``.

    Returns ``(u, psi, newton_iterations, residual_norm)``.
    """
    nf = len(disc.free)
    psi_prev = state.psi

    def residual(x):
        r1, r2 = disc.residual(x[:nf], x[nf:], psi_prev, alpha)
        return np.concatenate([r1, r2])

    def jacobian(x):
        return disc.jacobian(x[nf:], alpha)

    x0 = np.concatenate([state.u[disc.free], state.psi])
    mask = np.arange(len(x0)) >= nf
    solve = limit_latent_increase(sparse_newton_correction(jacobian), mask, config.max_latent_increase)
    x, its, rn = newton_solve(residual, solve, x0, config.newton_tol, config.max_newton_iters, record)
    return disc.full(x[:nf]), x[nf:], its, rn


def _errors(disc: ConformingDiscretization, u: np.ndarray, u_avg: np.ndarray) -> dict:
    p = disc.problem
    out = {}
    if p.exact is not None:
        out["err_u_L2"] = l2_norm(disc.V, u, p.exact)
        out["err_avg_L2"] = l2_norm(disc.V, u_avg, p.exact)
    if p.exact_grad is not None:
        out["err_flux_L2"] = h1_seminorm(disc.V, u_avg, p.exact_grad)
    return out


@dataclass
class RunResult:
    state: ProximalState
    log: list
    converged: bool
    discretization: object = None
    elapsed: float = 0.0


def run(problem: VIProblem, config: PGConfig | None = None, pair=("P1-bubble", "DG-P0"),
        disc: ConformingDiscretization | None = None, state: ProximalState | None = None,
        keep_history: bool = False, raise_on_limit: bool = False) -> RunResult:
    """Proximal loop until the successive-difference test passes."""
    config = config or PGConfig()
    t0 = time.perf_counter()
    disc = disc or ConformingDiscretization(problem, pair)
    state = state or disc.initial_state()
    records = []
    converged = False
    avg_prev = state.u_average.copy()
    for k in range(1, config.max_prox_iters + 1):
        alpha = config.alpha(k)
        u_old = state.u
        u, psi, its, rn = proximal_step(disc, state, alpha, config)
        state.accept(u, psi, alpha, keep_history)
        du = u - u_old
        davg = state.u_average - avg_prev
        avg_prev = state.u_average.copy()
        obs = disc.observable(psi)
        lo, hi = disc.bounds
        entry = {
            "k": k,
            "alpha": alpha,
            "newton_iters": its,
            "newton_residual": rn,
            "du_L2": l2_norm(disc.V, du),
            "du_H1": h1_seminorm(disc.V, du),
            "davg_L2": l2_norm(disc.V, davg),
            "davg_H1": h1_seminorm(disc.V, davg),
            "min_slack": float(min(np.min(obs - lo), np.min(hi - obs))),
        }
        entry.update(_errors(disc, u, state.u_average))
        records.append(entry)
        key = ("du_" if config.stop_on == "raw" else "davg_") + config.stop_norm
        log.debug("k=%d alpha=%.3g newton=%d %s=%.3e", k, alpha, its, key, entry[key])
        if k >= config.min_prox_iters and entry[key] <= config.stop_tol:
            converged = True
            break
    if not converged and raise_on_limit:
        raise ProximalLimitReached(f"no convergence in {config.max_prox_iters} proximal iterations")
    return RunResult(state, records, converged, disc, time.perf_counter() - t0)


def run_backward_euler(problem: VIProblem, config: PGConfig, dt: float, n_steps: int, u0=None,
                       pair=("P1", "P1")) -> tuple[np.ndarray, list]:
    """Backward Euler in time: one proximal solve per step, ``psi`` carried over."""
    disc = ConformingDiscretization(problem, pair, dt=dt)
    state = disc.initial_state()
    if u0 is not None:
        state.u = disc.V.interpolate(u0) if callable(u0) else np.asarray(u0, float)
    logs = []
    for n in range(n_steps):
        disc.set_previous(state.u)
        fresh = ProximalState(u=state.u, psi=state.psi, psi_initial=state.psi.copy())
        res = run(problem, config, disc=disc, state=fresh)
        state = res.state
        logs.append({"step": n + 1, "prox_iters": len(res.log), "converged": res.converged})
    return state.u, logs


def rate(errors) -> list:
    """``log2(e_{2h}/e_h)`` for successive entries (``nan`` for the first)."""
    out = [math.nan]
    for a, b in zip(errors[:-1], errors[1:]):
        out.append(math.log2(a / b) if a > 0 and b > 0 else math.nan)
    return out
