import math

import numpy as np
import pytest
from helpers import dense_newton, two_by_two, unit_triangle

from proxgal.conforming import (
    ConformingDiscretization,
    NewtonFailure,
    PGConfig,
    ProximalState,
    newton_solve,
    proximal_step,
    rate,
    recover_dual,
    run,
)
from proxgal.entropy import LegendreMap
from proxgal.mesh import refine_uniform
from proxgal.problems import VIProblem, circular_obstacle_problem


def trivial_problem(mesh=None):
    mesh = mesh or refine_uniform(two_by_two())
    sides = {t: 0.0 for t in mesh.tags()}
    return VIProblem("trivial", mesh, LegendreMap("lower", lower=-1.0), f=0.0, dirichlet=sides)


def test_trivial_problem_converges_immediately():
    res = run(trivial_problem(), PGConfig(stop_tol=1e-12))
    assert res.converged and len(res.log) <= 2
    assert np.max(np.abs(res.state.u)) <= 1e-12
    assert np.max(np.abs(res.state.psi)) <= 1e-12


def test_single_cell_newton_matches_dense_oracle():
    # one free bubble coefficient and one latent value; integrals from exact
    # symbolic evaluation on the unit right triangle
    mesh = unit_triangle()
    problem = VIProblem("one-cell", mesh, LegendreMap("lower", lower=0.0), f=1.0, dirichlet={"edge": 0.0})
    disc = ConformingDiscretization(problem)
    assert len(disc.free) == 1
    area, bubble_int, bubble_energy = 0.5, 9 / 40, 81 / 10
    psi_prev, alpha = 0.0, 1.0

    def residual(z):
        u, psi = z
        return np.array([bubble_energy * u + bubble_int * (psi - psi_prev) / alpha - bubble_int,
                         bubble_int * u - area * math.exp(psi)])

    def jacobian(z):
        return np.array([[bubble_energy, bubble_int / alpha], [bubble_int, -area * math.exp(z[1])]])

    oracle = dense_newton(residual, jacobian, [0.0, 0.0])
    state = disc.initial_state()
    record = []
    proximal_step(disc, state, alpha, PGConfig(newton_tol=1e-14), record)
    assert len(record) >= 3
    for mine, ref in zip(record, oracle):
        np.testing.assert_allclose(mine, ref, atol=1e-12)


def test_dual_recovery_identities():
    problem = circular_obstacle_problem(nx=8)
    res = run(problem, PGConfig(stop_tol=1e-8), keep_history=True)
    st = res.state
    lam_bar, lam_k = recover_dual(st)
    np.testing.assert_allclose(lam_bar * st.alpha_sum, st.psi_initial - st.psi, atol=1e-13)
    alpha_last, _, psi_last = st.history[-1]
    psi_before = st.history[-2][2]
    np.testing.assert_array_equal(lam_k, (psi_before - psi_last) / alpha_last)
    # weighted average from the stored history equals the running sum
    num = sum(a * u for a, u, _ in st.history)
    den = sum(a for a, _, _ in st.history)
    np.testing.assert_allclose(num / den, st.u_average, atol=1e-13)
    # every iterate kept its observable strictly feasible
    assert all(e["min_slack"] > 0 for e in res.log)


def test_dual_recovery_single_step_and_constant_history():
    problem = circular_obstacle_problem(nx=4)
    res = run(problem, PGConfig(max_prox_iters=1, stop_tol=0.0))
    lam_bar, lam_k = recover_dual(res.state)
    np.testing.assert_array_equal(lam_bar, lam_k)
    psi = np.full(3, 0.7)
    st = ProximalState(u=np.zeros(2), psi=psi, psi_initial=psi.copy())
    st.accept(np.zeros(2), psi.copy(), 2.0)
    assert np.all(recover_dual(st)[0] == 0.0)
    with pytest.raises(ValueError):
        recover_dual(ProximalState(u=np.zeros(1), psi=psi, psi_initial=psi))


def test_saddle_residual_after_each_step():
    problem = circular_obstacle_problem(nx=8)
    disc = ConformingDiscretization(problem)
    state = disc.initial_state()
    config = PGConfig(newton_tol=1e-11)
    for k in range(1, 8):
        alpha = config.alpha(k)
        psi_prev = state.psi
        u, psi, _, rn = proximal_step(disc, state, alpha, config)
        r1, r2 = disc.residual(u[disc.free], psi, psi_prev, alpha)
        assert math.hypot(np.linalg.norm(r1), np.linalg.norm(r2)) <= 1e-11 * 1e3
        state.accept(u, psi, alpha)


def test_averaged_stopping_is_selectable():
    problem = circular_obstacle_problem(nx=8)
    raw = run(problem, PGConfig(stop_tol=1e-8))
    avg = run(problem, PGConfig(stop_tol=1e-8, stop_on="average", max_prox_iters=60))
    assert raw.converged and avg.converged
    assert len(avg.log) > len(raw.log)


def test_circular_obstacle_error_decreases():
    errs = []
    for nx in (16, 32):
        res = run(circular_obstacle_problem(nx=nx), PGConfig(stop_tol=1e-9))
        errs.append(res.log[-1]["err_u_L2"])
    assert errs[1] < errs[0] / 3


def test_iteration_limit_is_reported():
    from proxgal.conforming import ProximalLimitReached

    with pytest.raises(ProximalLimitReached):
        run(circular_obstacle_problem(nx=4), PGConfig(max_prox_iters=2, stop_tol=0.0), raise_on_limit=True)
    res = run(circular_obstacle_problem(nx=4), PGConfig(max_prox_iters=2, stop_tol=0.0))
    assert not res.converged and len(res.log) == 2


def test_newton_failure_carries_residual():
    def residual(x):
        return np.array([x[0] ** 2 + 1.0])

    def solve(x, r):
        return np.array([1.0])

    with pytest.raises(NewtonFailure) as info:
        newton_solve(residual, solve, np.array([0.0]), 1e-12, 5)
    assert info.value.residual == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        PGConfig(alpha0=0.0)
    with pytest.raises(ValueError):
        PGConfig(stop_on="mean")
    assert PGConfig(alpha0=1.0, growth=2.0).alpha(3) == 4.0


def test_rates():
    r = rate([4.0, 1.0, 0.25])
    assert math.isnan(r[0]) and r[1:] == [2.0, 2.0]


def test_boundary_constraint_pair():
    mesh = refine_uniform(two_by_two())
    problem = VIProblem("trace", mesh, LegendreMap("lower", lower=0.05), f=-1.0,
                        dirichlet={"left": 0.0, "right": 0.0}, neumann={"top": 0.0}, locus="bottom")
    res = run(problem, PGConfig(stop_tol=1e-10), pair=("P1", "Trace-P1"))
    disc = res.discretization
    assert res.converged
    # corners belong to the Dirichlet sides
    inner = np.setdiff1d(disc.W.vertex_ids, disc.fixed)
    assert len(inner) == 3
    assert np.all(res.state.u[inner] >= 0.05 - 1e-6)
