import numpy as np
import pytest
from helpers import two_by_two, unit_triangle

from proxgal.conforming import PGConfig
from proxgal.entropy import LegendreMap
from proxgal.fospg import (
    HybridDiscretization,
    bound_preserving_average,
    bounded_reconstruction,
    clement_interpolate,
    fospg_step,
    initial_hybrid_state,
    oswald_average,
    reconstruct_feasible,
    recover_dual,
    run_fospg,
)
from proxgal.mesh import refine_uniform, structured_rectangle
from proxgal.problems import VIProblem, circular_obstacle_problem


def all_dirichlet(mesh, value=0.0):
    return {t: value for t in mesh.tags()}


def small_volume_problem(beta=None, f=1.0):
    mesh = two_by_two()
    return VIProblem("small", mesh, LegendreMap("lower", lower=-0.05), f=f, beta=beta,
                     dirichlet=all_dirichlet(mesh), psi0=0.0)


def small_boundary_problem():
    mesh = two_by_two()
    return VIProblem("small-trace", mesh, LegendreMap("lower", lower=0.02), f=-2.0,
                     dirichlet={"left": 0.0, "right": 0.0}, neumann={"top": 0.0}, locus="bottom")


def packed_state(disc, state):
    xI = np.concatenate([state.q, state.u] + ([] if disc.boundary else [state.psi]), axis=1)
    return disc.pack(xI, state.u_hat, state.psi if disc.boundary else np.zeros(0))


def test_zero_solution_is_reproduced():
    mesh = two_by_two()
    problem = VIProblem("zero", mesh, LegendreMap("lower", lower=-1.0), f=0.0, dirichlet=all_dirichlet(mesh))
    res = run_fospg(problem, PGConfig(stop_tol=1e-12))
    assert res.converged and len(res.log) <= 2
    assert np.max(np.abs(res.state.u)) <= 1e-12
    assert np.max(np.abs(res.state.q)) <= 1e-12


@pytest.mark.parametrize("make", [small_volume_problem, small_boundary_problem], ids=["volume", "boundary"])
def test_jacobian_matches_finite_differences(make):
    disc = HybridDiscretization(make())
    state = initial_hybrid_state(disc)
    rng = np.random.default_rng(0)
    x = packed_state(disc, state) + 0.1 * rng.standard_normal(len(packed_state(disc, state)))
    psi_old = state.psi.ravel() if disc.boundary else state.psi
    alpha = 2.0
    J = disc.monolithic_jacobian(x, alpha).toarray()
    h = 1e-7
    fd = np.empty_like(J)
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        fd[:, j] = (disc.residual(x + e, alpha, psi_old) - disc.residual(x - e, alpha, psi_old)) / (2 * h)
    np.testing.assert_allclose(J, fd, atol=1e-6)


def test_single_cell_newton_matches_dense_oracle():
    mesh = unit_triangle()
    problem = VIProblem("one-cell", mesh, LegendreMap("lower", lower=-0.1), f=3.0, dirichlet={"edge": 0.0})
    disc = HybridDiscretization(problem)
    state = initial_hybrid_state(disc)
    alpha = 1.0
    x0 = packed_state(disc, state)
    # independent oracle: undamped Newton with a finite-difference Jacobian
    xs = [x0]
    for _ in range(30):
        x = xs[-1]
        r = disc.residual(x, alpha, state.psi)
        if np.linalg.norm(r) < 1e-13:
            break
        J = np.empty((len(x), len(x)))
        for j in range(len(x)):
            e = np.zeros(len(x))
            e[j] = 1e-7
            J[:, j] = (disc.residual(x + e, alpha, state.psi) - disc.residual(x - e, alpha, state.psi)) / 2e-7
        xs.append(x - np.linalg.solve(J, r))
    record = []
    fospg_step(disc, state, alpha, PGConfig(newton_tol=1e-13, max_latent_increase=None), record=record)
    assert len(record) >= 3
    for mine, ref in zip(record, xs):
        np.testing.assert_allclose(mine, ref, atol=1e-6)
    np.testing.assert_allclose(record[-1], xs[-1], atol=1e-10)


@pytest.mark.parametrize("make", [small_volume_problem, small_boundary_problem], ids=["volume", "boundary"])
def test_condensed_matches_monolithic(make):
    problem = make()
    config = PGConfig(stop_tol=1e-9)
    a = run_fospg(problem, config, condense=True)
    b = run_fospg(problem, config, condense=False)
    assert len(a.log) == len(b.log)
    for name in ("q", "u", "u_hat", "psi"):
        np.testing.assert_allclose(getattr(a.state, name), getattr(b.state, name), atol=1e-10)


def _advection_blocks(problem_beta, problem_plain):
    a, b = HybridDiscretization(problem_beta), HybridDiscretization(problem_plain)
    su = a.su
    return a, (a.KII - b.KII)[:, su, su], (a.KIF - b.KIF)[:, su, :], (a.KFI - b.KFI)[:, :, su], a.KFF - b.KFF


def _advection_energy(disc, DII, DIF, DFI, DFF, u, u_hat):
    ul = u_hat[disc.ldofs]
    cell = np.einsum("ti,tij,tj->", u, DII, u) + np.einsum("ti,tij,tj->", u, DIF, ul)
    facet = np.einsum("ti,tij,tj->", ul, DFI, u) + np.einsum("ti,tij,tj->", ul, DFF, ul)
    return cell + facet


def test_upwind_advection_form_is_nonnegative():
    mesh = refine_uniform(structured_rectangle(3, 3))

    def swirl(x):
        # divergence free
        return np.stack([np.sin(np.pi * x[..., 1]) + 0.3, np.cos(np.pi * x[..., 0]) - 0.2], axis=-1)

    lm = LegendreMap("lower", lower=-1.0)
    with_beta = VIProblem("adv", mesh, lm, beta=swirl, dirichlet=all_dirichlet(mesh), coef_degree=None)
    plain = VIProblem("plain", mesh, lm, dirichlet=all_dirichlet(mesh))
    disc, *blocks = _advection_blocks(with_beta, plain)
    rng = np.random.default_rng(3)
    for _ in range(100):
        u = rng.standard_normal((mesh.n_cells, disc.nu))
        u_hat = np.zeros(disc.n_hat)
        u_hat[disc.free] = rng.standard_normal(len(disc.free))
        assert _advection_energy(disc, *blocks, u, u_hat) >= -1e-12


def test_zero_velocity_gives_no_advection():
    mesh = two_by_two()
    lm = LegendreMap("lower", lower=-1.0)
    zero = VIProblem("zero-beta", mesh, lm, beta=(0.0, 0.0), dirichlet=all_dirichlet(mesh))
    plain = VIProblem("plain", mesh, lm, dirichlet=all_dirichlet(mesh))
    _, *blocks = _advection_blocks(zero, plain)
    for blk in blocks:
        assert np.max(np.abs(blk)) == 0.0


def test_linear_solution_is_reproduced():
    mesh = refine_uniform(two_by_two(((0.0, 2.0), (0.0, 1.0))))
    beta = np.array([1.0, 0.5])

    def exact(x):
        return 1.0 + 0.5 * x[..., 0] - 0.25 * x[..., 1]

    problem = VIProblem("linear", mesh, LegendreMap("lower", lower=-50.0), beta=tuple(beta),
                        f=float(beta @ [0.5, -0.25]), dirichlet={t: exact for t in mesh.tags()},
                        exact=exact, exact_grad=lambda x: np.broadcast_to([0.5, -0.25], x.shape))
    res = run_fospg(problem, PGConfig(stop_tol=1e-12, max_prox_iters=80))
    assert res.converged
    assert res.log[-1]["err_u_L2"] <= 1e-9
    assert res.log[-1]["err_q_L2"] <= 1e-9


def test_degree_validation():
    problem = small_volume_problem()
    with pytest.raises(ValueError, match="latent degree"):
        HybridDiscretization(problem, p=0, q=1)
    with pytest.raises(ValueError):
        HybridDiscretization(problem, p=2)


# --------------------------------------------------------- reconstructions
def _disc_on(mesh, dirichlet):
    return HybridDiscretization(VIProblem("r", mesh, LegendreMap("lower", lower=0.0), dirichlet=dirichlet))


def _facet_trace(disc, fn):
    """Nodal facet coefficients of ``fn`` (lower-index vertex first)."""
    m = disc.mesh
    ends = m.vertices[m.facets]
    return np.stack([fn(ends[:, 0]), fn(ends[:, 1])], axis=1).ravel()


def test_clement_reproduces_constants_and_linears():
    mesh = refine_uniform(structured_rectangle(3, 2, ((0.0, 1.5), (0.0, 1.0)), "left"))
    disc = _disc_on(mesh, {t: 0.0 for t in mesh.tags()})

    def lin(x):
        return 0.4 - 1.2 * x[..., 0] + 2.1 * x[..., 1]

    np.testing.assert_allclose(clement_interpolate(disc, np.full(mesh.n_cells, 2.5), np.full(disc.n_hat, 2.5)), 2.5,
                               atol=1e-13)
    # the cell mean of a linear function is its centroid value
    nodal = clement_interpolate(disc, lin(mesh.centroids), _facet_trace(disc, lin))
    np.testing.assert_allclose(nodal, lin(mesh.vertices), atol=1e-13)


def test_clement_preserves_sign():
    mesh = refine_uniform(structured_rectangle(4, 4))
    disc = _disc_on(mesh, {"left": 0.0})
    rng = np.random.default_rng(9)
    means = rng.uniform(0, 1, mesh.n_cells) * (rng.uniform(size=mesh.n_cells) > 0.5)
    u_hat = rng.uniform(0, 1, disc.n_hat)
    assert np.all(clement_interpolate(disc, means, u_hat) >= 0.0)


def test_oswald_average():
    mesh = refine_uniform(structured_rectangle(2, 2))
    cont = mesh.vertices[:, 0] ** 2 - mesh.vertices[:, 1]
    np.testing.assert_allclose(oswald_average(mesh, cont[mesh.cells]), cont, atol=1e-15)
    sign = np.where(np.arange(mesh.n_cells) % 2 == 0, 1.0, -1.0)
    out = oswald_average(mesh, np.repeat(sign[:, None], 3, axis=1))
    assert np.all(np.abs(out) <= 1.0)
    # each vertex sees the mean of its cells
    v = mesh.cells[0, 0]
    touching = np.flatnonzero(np.any(mesh.cells == v, axis=1))
    assert out[v] == pytest.approx(sign[touching].mean())


def test_bound_preserving_average_from_history_and_state():
    problem = circular_obstacle_problem(nx=4)
    res = run_fospg(problem, PGConfig(stop_tol=1e-8), keep_history=True)
    disc, st = res.discretization, res.state
    hist = [(a, psi) for a, _, _, _, psi in st.history]
    from_hist = bound_preserving_average(disc, history=hist)
    np.testing.assert_allclose(from_hist, bound_preserving_average(disc, state=st), atol=1e-12)
    lo = problem.constraint.bounds(disc.xq)[0]
    lo_mean = np.einsum("tq,tq->t", disc.wq, lo) / disc.mesh.areas
    assert np.all(from_hist > lo_mean)
    one = bound_preserving_average(disc, history=hist[:1])
    obs = disc.observable(hist[0][1])
    np.testing.assert_allclose(one, np.einsum("tq,tq->t", disc.wq, obs) / disc.mesh.areas, atol=1e-14)
    with pytest.raises(ValueError):
        bound_preserving_average(disc)


def test_dual_recovery():
    res = run_fospg(circular_obstacle_problem(nx=4), PGConfig(stop_tol=1e-8))
    st = res.state
    lam_bar, lam_k = recover_dual(st)
    np.testing.assert_allclose(lam_bar * st.alpha_sum, st.psi_initial - st.psi, atol=1e-12)
    np.testing.assert_allclose(lam_k * st.alpha_last, st.psi_previous - st.psi, atol=1e-12)


def test_feasible_reconstructions():
    problem = small_volume_problem(f=-20.0)
    res = run_fospg(problem, PGConfig(stop_tol=1e-9))
    disc, st = res.discretization, res.state
    nodal = reconstruct_feasible(disc, st.u, st.u_hat)
    assert np.all(nodal >= -0.05 - 1e-14)
    inner = bounded_reconstruction(disc, st.psi, st.u_hat)
    assert np.all(inner >= -0.05)
    with pytest.raises(ValueError, match="negative mean"):
        reconstruct_feasible(disc, st.u - 1.0, st.u_hat)
