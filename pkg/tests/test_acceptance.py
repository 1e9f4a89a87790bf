"""Reproduction criteria 1-8; each test prints one PASS/FAIL line.

The long runs are marked ``slow``; ``pytest -m "not slow"`` skips them.
"""

import itertools
import math

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from helpers import two_by_two

from proxgal.conforming import PGConfig, rate, run
from proxgal.entropy import LegendreMap
from proxgal.fem import DiscreteSpace, assemble_conforming_A, assemble_load, solve_sparse
from proxgal.fospg import (
    HybridDiscretization,
    _cell_mean_latent,
    bounded_reconstruction,
    clement_interpolate,
    clement_weights,
    run_fospg,
)
from proxgal.mesh import map_vertices, refine_uniform, structured_rectangle
from proxgal.problems import (
    VIProblem,
    biactive_problem,
    circular_obstacle_problem,
    dam_mesh,
    free_surface_extract,
    hemker_problem,
    heston_problem,
    price_american_put,
    secant_discharge,
)
from proxgal.problems.dam import is_monotone_nonincreasing
from proxgal.problems.heston import REFERENCE_PRICES

#: smallest observable slack seen by every run in this module
SLACKS: dict = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def note_slack(name: str, log: list) -> None:
    SLACKS[name] = min(e["min_slack"] for e in log)


# ------------------------------------------------------ circular obstacle study
REFERENCE_ERRORS = (2.352e-2, 5.799e-3, 1.446e-3)


@pytest.fixture(scope="module")
def obstacle_study():
    runs = {}
    for stop in ("raw", "average"):
        for level in range(3):
            res = run_fospg(circular_obstacle_problem(nx=32, levels=level),
                            PGConfig(stop_tol=1e-10, stop_on=stop, max_prox_iters=200), p=1, q=0)
            note_slack(f"obstacle-{stop}-{level}", res.log)
            runs[stop, level] = res
    return runs


@pytest.mark.slow
def test_criterion_1_obstacle_errors_and_rates(obstacle_study):
    logs = [obstacle_study["raw", level].log[-1] for level in range(3)]
    err_u = [e["err_u_L2"] for e in logs]
    err_q = [e["err_q_L2"] for e in logs]
    rel = [abs(e - ref) / ref for e, ref in zip(err_u, REFERENCE_ERRORS)]
    rates_u, rates_q = rate(err_u)[1:], rate(err_q)[1:]
    ok = (max(rel) <= 0.05 and all(1.85 <= r <= 2.20 for r in rates_u)
          and all(1.1 <= r <= 1.5 for r in rates_q))
    detail = (f"L2 errors {', '.join(f'{e:.3e}' for e in err_u)} vs {REFERENCE_ERRORS}, "
              f"u rates {', '.join(f'{r:.2f}' for r in rates_u)}, flux rates {', '.join(f'{r:.2f}' for r in rates_q)}")
    report(1, ok, detail)


@pytest.mark.slow
def test_criterion_2_mesh_independent_iteration_counts(obstacle_study):
    raw = [len(obstacle_study["raw", level].log) for level in range(3)]
    avg = [len(obstacle_study["average", level].log) for level in range(3)]
    converged = all(r.converged for r in obstacle_study.values())
    ok = converged and all(12 <= k <= 20 for k in raw) and all(33 <= k <= 41 for k in avg)
    report(2, ok, f"raw-stop counts {raw} (target [12, 20]), average-stop counts {avg} (target [33, 41])")


# ------------------------------------------------------------- biactive
def test_criterion_3_optimization_error_rate():
    res = run_fospg(biactive_problem(nx=32), PGConfig(stop_tol=0.0, max_prox_iters=25))
    note_slack("biactive", res.log)
    k = np.array([e["k"] for e in res.log])
    diff = np.array([e["davg_L2"] for e in res.log])
    window = (k >= 5) & (k <= 25)
    slope = np.polyfit(k[window], np.log2(diff[window]), 1)[0]
    report(3, slope <= -0.9, f"least-squares slope of log2 successive average differences {slope:.3f} (target <= -0.9)")


# ---------------------------------------------------------------- heston
@pytest.mark.slow
def test_criterion_4_option_prices():
    result = price_american_put(heston_problem())
    SLACKS["heston"] = float(np.min(result.disc.observable(result.state.psi) - result.disc.bounds[0]))
    prices = result.prices()
    worst_ref, worst_rows = 0.0, 0.0
    for variance, ref in REFERENCE_PRICES.items():
        u_vals, latent_vals = prices[variance]
        worst_ref = max(worst_ref, float(np.max(np.abs(u_vals - np.array(ref)))))
        worst_rows = max(worst_rows, float(np.max(np.abs(u_vals - latent_vals))))
    ok = worst_ref <= 5e-2 and worst_rows <= 5e-2
    report(4, ok, f"max deviation from reference prices {worst_ref:.3e}, max gap between read-outs {worst_rows:.3e}"
                  " (targets 5e-2)")


# ------------------------------------------------------------------- dam
@pytest.mark.slow
def test_criterion_5_dam_discharge():
    h0 = 0.05
    mesh = dam_mesh(50, 20)
    result = secant_discharge(mesh, h0=h0)
    q = result.rows[-1]["q"]
    inner = [row["inner_iters"] for row in result.rows]
    surface = free_surface_extract(mesh, result.solution, 1e-4)
    monotone = len(surface) > 0 and is_monotone_nonincreasing(surface, 2 * h0)
    ok = (result.converged and abs(q - 0.2177) <= 2e-3 and len(result.rows) <= 6
          and all(20 <= n <= 40 for n in inner) and monotone)
    report(5, ok, f"q = {q:.5f} after {len(result.rows)} outer iterations, inner counts {inner}, "
                  f"free surface monotone within 2h: {monotone}")


# ---------------------------------------------------------------- hemker
def test_criterion_6_discrete_maximum_principle():
    problem = hemker_problem(resolution="coarse")
    inner_nodes = None
    extremes = []

    def check(disc, state, entry):
        nonlocal inner_nodes
        if inner_nodes is None:
            inner_nodes = clement_weights(disc.mesh, tuple(problem.dirichlet))[3] < 0
        recon = bounded_reconstruction(disc, state.psi, state.u_hat)[inner_nodes]
        unclipped = clement_interpolate(disc, _cell_mean_latent(disc, state.psi), state.u_hat)[inner_nodes]
        extremes.append((entry["dmp_min"], entry["dmp_max"], recon.min(), recon.max(),
                         unclipped.min(), unclipped.max()))

    res = run_fospg(problem, PGConfig(stop_tol=1e-8, max_prox_iters=60), callback=check)
    note_slack("hemker", res.log)
    ext = np.array(extremes)
    latent_ok = bool(np.all(ext[:, 0] > 0) and np.all(ext[:, 1] < 1))
    recon_ok = bool(np.all(ext[:, 2] > 0) and np.all(ext[:, 3] < 1))
    # the clip only guards roundoff: the convex combination itself stays in [0, 1]
    unclipped_ok = bool(np.all(ext[:, 4] >= -1e-15) and np.all(ext[:, 5] <= 1 + 1e-15))
    final = res.log[-1]
    violation = max(-final["u_min"], final["u_max"] - 1.0)
    ok = res.converged and latent_ok and recon_ok and unclipped_ok and violation > 0
    report(6, ok, f"{len(res.log)} iterates; latent range [{ext[:, 0].min():.2e}, {ext[:, 1].max():.17g}], "
                  f"reconstruction range [{ext[:, 2].min():.2e}, {ext[:, 3].max():.17g}], "
                  f"raw u range [{final['u_min']:.3f}, {final['u_max']:.3f}]")


# ----------------------------------------------------------------- oracles
def _oracle_problem(beta):
    mesh = two_by_two()
    return VIProblem("oracle", mesh, LegendreMap("lower", lower=-0.1), beta=beta, f=lambda x: -30 * x[..., 0] - 5,
                     dirichlet={t: 0.0 for t in mesh.tags()}, coef_degree=None)


def _limit_problem(res):
    """``A u = b + B^T lam``, ``B u >= g``, ``lam >= 0`` on the free unknowns."""
    d = res.discretization
    g = -0.1 * d.problem.mesh.areas - d.B_lift
    return d.A_ff.toarray(), d.B_f.toarray(), d.rhs_free, g, d.free


def active_set_oracle(A, B, b, g):
    """Enumerate all active sets; return the unique KKT point."""
    n, m = A.shape[0], B.shape[0]
    found = []
    for pattern in itertools.product((False, True), repeat=m):
        S = np.array(pattern)
        k = int(S.sum())
        K = np.block([[A, -B[S].T], [B[S], np.zeros((k, k))]])
        sol = np.linalg.solve(K, np.concatenate([b, g[S]]))
        u, lam = sol[:n], sol[n:]
        if np.all(lam >= -1e-12) and np.all(B @ u - g >= -1e-12):
            found.append(u)
    assert len(found) >= 1
    for u in found[1:]:
        np.testing.assert_allclose(u, found[0], atol=1e-12)
    return found[0]


def projected_fixed_point_oracle(A, B, b, g, tol=1e-16, max_iter=10**6):
    """``lam <- max(0, lam - rho (B A^-1 (b + B^T lam) - g))`` until stationary."""
    Ainv = np.linalg.inv(A)
    S = B @ Ainv @ B.T
    rho = np.linalg.eigvalsh(0.5 * (S + S.T)).min() / np.linalg.norm(S, 2) ** 2
    lam = np.zeros(B.shape[0])
    for _ in range(max_iter):
        new = np.maximum(0.0, lam - rho * (B @ Ainv @ (b + B.T @ lam) - g))
        if np.max(np.abs(new - lam)) < tol:
            lam = new
            break
        lam = new
    return Ainv @ (b + B.T @ lam)


def test_criterion_7_oracle_equivalence():
    config = PGConfig(stop_tol=1e-14, max_prox_iters=80)
    sym = run(_oracle_problem(None), config)
    A, B, b, g, free = _limit_problem(sym)
    err_sym = float(np.max(np.abs(sym.state.u[free] - active_set_oracle(A, B, b, g))))
    nonsym = run(_oracle_problem((1.0, 1.0)), config)
    A, B, b, g, free = _limit_problem(nonsym)
    err_nonsym = float(np.max(np.abs(nonsym.state.u[free] - projected_fixed_point_oracle(A, B, b, g))))
    note_slack("oracle-symmetric", sym.log)
    note_slack("oracle-advective", nonsym.log)
    ok = err_sym <= 1e-7 and err_nonsym <= 1e-6
    report(7, ok, f"max deviation {err_sym:.2e} from the active-set oracle, {err_nonsym:.2e} from the projected oracle")


# --------------------------------------------------------------- properties
def _three_point_worst():
    rng = np.random.default_rng(7)
    worst = 0.0
    for lm in (LegendreMap("lower", lower=0.0), LegendreMap("upper", upper=2.0),
               LegendreMap("bilateral", lower=0.0, upper=1.0)):
        lo, hi = (float(v) for v in lm.bounds(shape=()))
        a = lo if np.isfinite(lo) else hi - 10.0
        c = hi if np.isfinite(hi) else lo + 10.0
        u, v, w = (np.clip(rng.uniform(a, c, 1000), a + 1e-9, c - 1e-9) for _ in range(3))
        worst = max(worst, float(np.max(np.abs(lm.three_point_residual(u, v, w)))))
    return worst


def _advection_diagonal_worst():
    mesh = refine_uniform(structured_rectangle(3, 3))
    lm = LegendreMap("lower", lower=-1.0)
    sides = {t: 0.0 for t in mesh.tags()}
    with_beta = HybridDiscretization(VIProblem("adv", mesh, lm, beta=(1.0, 1.0), dirichlet=sides))
    plain = HybridDiscretization(VIProblem("plain", mesh, lm, dirichlet=sides))
    su = with_beta.su
    DII = (with_beta.KII - plain.KII)[:, su, su]
    DIF = (with_beta.KIF - plain.KIF)[:, su, :]
    DFI = (with_beta.KFI - plain.KFI)[:, :, su]
    DFF = with_beta.KFF - plain.KFF
    rng = np.random.default_rng(1)
    worst = math.inf
    for _ in range(100):
        u = rng.standard_normal((mesh.n_cells, with_beta.nu))
        u_hat = np.zeros(with_beta.n_hat)
        u_hat[with_beta.free] = rng.standard_normal(len(with_beta.free))
        ul = u_hat[with_beta.ldofs]
        energy = (np.einsum("ti,tij,tj->", u, DII, u) + np.einsum("ti,tij,tj->", u, DIF, ul)
                  + np.einsum("ti,tij,tj->", ul, DFI, u) + np.einsum("ti,tij,tj->", ul, DFF, ul))
        worst = min(worst, float(energy))
    return worst


def _condensation_gap():
    mesh = two_by_two()
    problem = VIProblem("cond", mesh, LegendreMap("lower", lower=-0.05), f=1.0, beta=(1.0, 0.5),
                        dirichlet={t: 0.0 for t in mesh.tags()})
    config = PGConfig(stop_tol=1e-9)
    a = run_fospg(problem, config, condense=True)
    b = run_fospg(problem, config, condense=False)
    note_slack("condensation", a.log)
    return max(float(np.max(np.abs(getattr(a.state, n) - getattr(b.state, n)))) for n in ("q", "u", "u_hat", "psi"))


def _clement_linear_gap():
    mesh = refine_uniform(structured_rectangle(3, 3, diagonal="left"))
    disc = HybridDiscretization(VIProblem("r", mesh, LegendreMap("lower", lower=0.0),
                                          dirichlet={t: 0.0 for t in mesh.tags()}))

    def lin(x):
        return 0.4 - 1.2 * x[..., 0] + 2.1 * x[..., 1]

    ends = mesh.vertices[mesh.facets]
    u_hat = np.stack([lin(ends[:, 0]), lin(ends[:, 1])], axis=1).ravel()
    return float(np.max(np.abs(clement_interpolate(disc, lin(mesh.centroids), u_hat) - lin(mesh.vertices))))


def _patch_gap():
    mesh = map_vertices(refine_uniform(two_by_two()), lambda v: v + 0.04 * np.sin(5 * v[:, ::-1]))
    worst = 0.0
    for kind in ("P1", "P1-bubble"):
        V = DiscreteSpace(kind, mesh)
        A = assemble_conforming_A(V, kappa=np.eye(2)).tocsr()
        b = assemble_load(V, 0.0)
        fixed = V.boundary_dofs()
        free = np.setdiff1d(np.arange(V.n_dofs), fixed)
        exact = V.interpolate(lambda x: 1.0 - x[..., 0] + 3.0 * x[..., 1])
        u = exact.copy()
        u[free] = solve_sparse(A[free][:, free], b[free] - A[free][:, fixed] @ exact[fixed])
        worst = max(worst, float(np.max(np.abs(u - exact))))
    return worst


def test_criterion_8_property_suites():
    three_point = _three_point_worst()
    diagonal = _advection_diagonal_worst()
    condensation = _condensation_gap()
    clement = _clement_linear_gap()
    patch = _patch_gap()
    feasible = all(s > 0 for s in SLACKS.values())
    ok = (three_point <= 1e-9 and diagonal >= -1e-12 and condensation <= 1e-10 and clement <= 1e-13
          and patch <= 1e-12 and feasible)
    report(8, ok, f"three-point {three_point:.1e}, min advection energy {diagonal:.2e}, condensation {condensation:.1e}, "
                  f"linear reproduction {clement:.1e}, patch {patch:.1e}, {len(SLACKS)} runs strictly feasible: {feasible}")
