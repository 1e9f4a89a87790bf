"""American put under the Heston stochastic-volatility model.

Coordinates are ``x1 = ln(S/K)`` (log-moneyness) and ``x2`` (variance); the
time variable is time to maturity so the payoff is the initial state.  The
advection is written in divergence form, so the reaction coefficient becomes
``r - omega`` (``div beta = omega``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..conforming import PGConfig
from ..entropy import LegendreMap
from ..fospg import HybridDiscretization, HybridState, initial_hybrid_state, run_fospg
from ..mesh import SimplicialMesh, tensor_rectangle
from .base import VIProblem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HestonParameters:
    strike: float = 10.0
    rate: float = 0.1
    maturity: float = 0.25
    mean_reversion: float = 5.0
    long_variance: float = 0.16
    vol_of_variance: float = 0.9
    correlation: float = 0.1
    log_range: tuple = (math.log(0.01), math.log(100.0))
    variance_range: tuple = (1e-6, 5.0)


#: reference prices (variance -> prices at S = 8, 9, 10, 11, 12)
REFERENCE_ASSETS = (8.0, 9.0, 10.0, 11.0, 12.0)
REFERENCE_PRICES = {
    0.0625: (1.9999, 1.1054, 0.5160, 0.2126, 0.0836),
    0.25: (2.0761, 1.3289, 0.7903, 0.4441, 0.2412),
}
REFERENCE_LATENT = {
    0.0625: (1.9994, 1.1059, 0.5161, 0.2132, 0.0842),
    0.25: (2.0764, 1.3292, 0.7904, 0.4448, 0.2421),
}


def graded_coordinates(lo: float, hi: float, n: int, focus: float, stretch: float) -> np.ndarray:
    """``n + 1`` points on ``[lo, hi]`` clustered around ``focus``.

    Uses ``x = focus + c sinh(s)`` with uniformly spaced ``s``; larger
    ``stretch`` means stronger clustering (``stretch -> 0`` is uniform).
    """
    if not lo < focus < hi:
        focus = min(max(focus, lo), hi)
    if stretch <= 0:
        return np.linspace(lo, hi, n + 1)
    c = (hi - lo) / stretch
    s = np.linspace(math.asinh((lo - focus) / c), math.asinh((hi - focus) / c), n + 1)
    x = focus + c * np.sinh(s)
    x[0], x[-1] = lo, hi
    return x


def heston_mesh(nx: int = 48, ny: int = 24, params: HestonParameters = HestonParameters(),
                stretch_x: float = 12.0, stretch_y: float = 20.0) -> SimplicialMesh:
    """Tensor mesh refined near the money (``x1 = 0``) and at small variance."""
    xs = graded_coordinates(*params.log_range, nx, 0.0, stretch_x)
    ys = graded_coordinates(*params.variance_range, ny, 0.15, stretch_y)
    return tensor_rectangle(xs, ys)


def heston_problem(mesh: SimplicialMesh | None = None, params: HestonParameters = HestonParameters(),
                   **mesh_kwargs) -> VIProblem:
    """Spatial operator of the Heston put with obstacle ``max(K - K e^{x1}, 0)``."""
    p = params
    mesh = mesh or heston_mesh(params=p, **mesh_kwargs)
    rx = p.correlation * p.vol_of_variance

    def payoff(x):
        return np.maximum(p.strike - p.strike * np.exp(x[..., 0]), 0.0)

    def kappa(x):
        v = 0.5 * x[..., 1]
        K = np.empty(x.shape[:-1] + (2, 2))
        K[..., 0, 0] = v
        K[..., 0, 1] = K[..., 1, 0] = v * rx
        K[..., 1, 1] = v * p.vol_of_variance**2
        return K

    def beta(x):
        v = x[..., 1]
        b1 = -p.rate + 0.5 * v + 0.5 * rx
        b2 = -p.mean_reversion * (p.long_variance - v) + 0.5 * p.vol_of_variance**2
        return np.stack([np.broadcast_to(b1, v.shape), b2], axis=-1)

    return VIProblem(
        name="heston",
        mesh=mesh,
        constraint=LegendreMap("lower", lower=payoff),
        kappa=kappa,
        beta=beta,
        c=p.rate - p.mean_reversion,
        f=0.0,
        dirichlet={"left": payoff, "bottom": payoff},
        neumann={"right": 0.0, "top": 0.0},
        coef_degree=None,
        meta={"params": p, "payoff": payoff},
    )


@dataclass
class OptionResult:
    disc: HybridDiscretization
    state: HybridState
    steps: list = field(default_factory=list)

    def prices(self, assets=REFERENCE_ASSETS, variances=tuple(REFERENCE_PRICES)) -> dict:
        """``{variance: (u_h values, grad R*(psi_h) values)}`` at ``ln(S/K)``.

        A piecewise-constant latent field is read out through its vertex
        average so both rows are interpolated quantities.
        """
        K = self.disc.problem.meta["params"].strike
        out = {}
        for v in variances:
            pts = np.array([[math.log(S / K), v] for S in assets])
            latent = self.disc.interpolate_latent if self.disc.q == 0 else self.disc.evaluate_latent
            out[v] = (self.disc.evaluate_u(self.state.u, pts), latent(self.state.psi, pts))
        return out


def price_american_put(problem: VIProblem | None = None, n_steps: int = 64, config: PGConfig | None = None,
                       p: int = 1, q: int = 0, psi_start: float = 0.0, latent_floor: float | None = -30.0,
                       callback=None) -> OptionResult:
    """Backward Euler over ``[0, T]`` with one proximal solve per step.

    The latent variable is carried from one step to the next, raised to at
    least ``latent_floor`` (``exp(-30)`` is below the resolution of prices of
    order ten, and far more negative values would have to be climbed back
    wherever the exercise region recedes); the proximal step sizes restart
    at ``alpha0`` every step.
    """
    problem = problem or heston_problem()
    params = problem.meta["params"]
    dt = params.maturity / n_steps
    config = config or PGConfig(alpha0=1.0, growth=2.0, stop_tol=1e-6, max_prox_iters=60, newton_tol=1e-8)
    disc = HybridDiscretization(problem, p=p, q=q, dt=dt)
    payoff = problem.meta["payoff"]
    mesh = disc.mesh
    u_prev = payoff(mesh.vertices[mesh.cells]) if p == 1 else payoff(mesh.centroids)[:, None]
    psi = np.full((mesh.n_cells, disc.npsi), psi_start)
    state = None
    steps = []
    for n in range(1, n_steps + 1):
        disc.set_previous(u_prev)
        fresh = initial_hybrid_state(disc)
        fresh.psi = psi.copy()
        fresh.psi_initial = psi.copy()
        if state is not None:
            fresh.q, fresh.u, fresh.u_hat = state.q, state.u, state.u_hat
        res = run_fospg(problem, config, p=p, q=q, disc=disc, state=fresh)
        state = res.state
        u_prev, psi = state.u, state.psi
        if latent_floor is not None:
            psi = np.maximum(psi, latent_floor)
        entry = {"step": n, "time": n * dt, "prox_iters": len(res.log), "converged": res.converged}
        steps.append(entry)
        if callback is not None:
            callback(entry)
        log.info("heston step %d/%d: %d proximal iterations", n, n_steps, len(res.log))
    return OptionResult(disc, state, steps)
