"""Solver tests: convex-oracle comparisons, KKT certificates, group-death
thresholds, and explicit region coefficients."""

import itertools

import numpy as np
import pytest

from pwadeepc.errors import SingularWbar
from pwadeepc.pwa_system import simulate_ss
from pwadeepc.behavior_matrices import MosaicBlocks, LocalBlock
from pwadeepc.deepc_solver import (
    DeepcConfig,
    build_problem,
    solve_elastic,
    solve_cap,
    kkt_residual_elastic,
    kkt_residual_cap,
    shrink_threshold,
    critical_lambda,
    explicit_elastic_coefficients,
)

cp = pytest.importorskip("cvxpy")


def cvxpy_reference(problem, scheme, lams):
    """Solve the selector problem with a generic convex solver."""
    k = problem.kernel
    g = cp.Variable(k.n)
    du = k.U_F @ g - problem.u_ref
    dy = k.Y_F @ g - problem.y_ref
    obj = cp.quad_form(du, cp.psd_wrap(k.Rbar)) + cp.quad_form(dy, cp.psd_wrap(k.Qbar))
    if scheme == "elastic":
        obj = obj + lams[0] * cp.norm1(g) + lams[1] * cp.sum_squares(g)
    else:
        for i in range(k.S):
            obj = obj + lams[0] * k.group_weights[i] * cp.norm2(
                g[k.offsets[i]: k.offsets[i + 1]])
    cons = [k.A_eq @ g == problem.b_eq]
    if k.Gamma.shape[0]:
        cons.append(k.Gamma @ g <= k.gamma)
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=cp.CLARABEL)
    assert prob.status == cp.OPTIMAL
    return float(prob.value), np.asarray(g.value).ravel()


def random_targets(system, cfg, rng):
    """A consistent recent window plus a random reference."""
    u = rng.uniform(-4.0, 4.0, 40)
    traj = simulate_ss(system, np.zeros(1), u)
    z_ini = np.concatenate([u[-cfg.rho:], traj.y.ravel()[-cfg.rho:]])
    u_ref = rng.uniform(-3.0, 3.0, cfg.L)
    y_ref = rng.uniform(-4.0, 4.0, cfg.L)
    return z_ini, u_ref, y_ref


@pytest.fixture(scope="module")
def cfg4():
    return DeepcConfig(L=4, rho=2, Q=1.0, R=1.0, lambda1=1.0, lambda2=1e-3,
                       lambda_cap=2.0)


@pytest.mark.parametrize("scheme", ["elastic", "cap"])
def test_solver_matches_convex_oracle(system, small_mosaic, cfg4, scheme):
    rng = np.random.default_rng(42)
    for trial in range(10):
        z_ini, u_ref, y_ref = random_targets(system, cfg4, rng)
        prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg4)
        if scheme == "elastic":
            sol = solve_elastic(prob)
            lams = (cfg4.lambda1, cfg4.lambda2)
        else:
            sol = solve_cap(prob)
            lams = (cfg4.lambda_cap, 0.0)
        ref_obj, _ = cvxpy_reference(prob, scheme, lams)
        rel = abs(sol.objective - ref_obj) / max(abs(ref_obj), 1e-12)
        assert rel < 1e-6, f"trial {trial}: rel objective error {rel:.2e}"
        assert max(sol.kkt.values()) < 1e-5
        assert sol.converged


def test_solver_respects_boxes(system, small_mosaic):
    cfg = DeepcConfig(L=4, rho=2, Q=1.0, R=1.0, lambda1=0.5, lambda2=1e-3,
                      lambda_cap=1.0, u_box=(-1.0, 1.0), y_box=(-3.0, 3.0))
    rng = np.random.default_rng(3)
    z_ini, u_ref, y_ref = random_targets(system, cfg, rng)
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg)
    for sol, lams, scheme in (
            (solve_elastic(prob), (cfg.lambda1, cfg.lambda2), "elastic"),
            (solve_cap(prob), (cfg.lambda_cap, 0.0), "cap")):
        assert np.all(sol.u_f <= 1.0 + 1e-7) and np.all(sol.u_f >= -1.0 - 1e-7)
        assert np.all(np.abs(sol.y_pred) <= 3.0 + 1e-7)
        assert np.all(sol.mu >= -1e-9)
        ref_obj, _ = cvxpy_reference(prob, scheme, lams)
        rel = abs(sol.objective - ref_obj) / max(abs(ref_obj), 1e-12)
        assert rel < 1e-6


@pytest.fixture(scope="module")
def tiny_mosaic(small_mosaic):
    """Eight-column problem small enough for exhaustive sign enumeration."""
    blocks = []
    for b in small_mosaic.blocks:
        sel = np.linspace(0, b.U_P.shape[1] - 1, 4).astype(int)  # four spread-out windows
        blocks.append(LocalBlock(mode=b.mode, U_P=b.U_P[:, sel],
                                 Y_P=b.Y_P[:, sel], U_F=b.U_F[:, sel],
                                 Y_F=b.Y_F[:, sel]))
    return MosaicBlocks(blocks=blocks, L=small_mosaic.L, rho=small_mosaic.rho,
                        n_u=1, n_y=1)


def exhaustive_elastic(problem, lam1, lam2):
    """Minimum over all sign patterns of the restricted stationary points."""
    k = problem.kernel
    n = k.n
    best = np.inf
    H2 = k.H + 2.0 * lam2 * np.eye(n)
    for signs in itertools.product((-1.0, 0.0, 1.0), repeat=n):
        s = np.array(signs)
        Z = np.nonzero(s != 0.0)[0]
        A = k.A_eq[:, Z]
        m = A.shape[0]
        M = np.block([[H2[np.ix_(Z, Z)], A.T], [A, np.zeros((m, m))]])
        rhs = np.concatenate([-problem.q[Z] - lam1 * s[Z], problem.b_eq])
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            continue
        gZ = sol[: len(Z)]
        if np.any(np.sign(gZ) != s[Z]):
            continue
        g = np.zeros(n)
        g[Z] = gZ
        if np.max(np.abs(k.A_eq @ g - problem.b_eq)) > 1e-8:
            continue
        # zero coordinates must satisfy the subgradient bound
        grad = H2 @ g + problem.q + k.A_eq.T @ sol[len(Z):]
        zeros = np.setdiff1d(np.arange(n), Z)
        if zeros.size and np.max(np.abs(grad[zeros])) > lam1 + 1e-8:
            continue
        val = (0.5 * g @ (k.H @ g) + problem.q @ g
               + lam1 * np.abs(g).sum() + lam2 * g @ g)
        best = min(best, val)
    return best


def test_elastic_matches_exhaustive_enumeration(system, tiny_mosaic):
    cfg = DeepcConfig(L=4, rho=2, Q=1.0, R=1.0, lambda1=1.0, lambda2=0.01)
    rng = np.random.default_rng(17)
    z_ini, u_ref, y_ref = random_targets(system, cfg, rng)
    prob = build_problem(tiny_mosaic, z_ini, u_ref, y_ref, cfg)
    sol = solve_elastic(prob)
    # same objective scale as the enumeration (drop the target constant)
    const = (prob.u_ref @ (prob.kernel.Rbar @ prob.u_ref)
             + prob.y_ref @ (prob.kernel.Qbar @ prob.y_ref))
    best = exhaustive_elastic(prob, cfg.lambda1, cfg.lambda2)
    assert np.isfinite(best)
    assert sol.objective - const == pytest.approx(best, rel=1e-6, abs=1e-8)


def test_warm_start_agrees_with_cold(system, small_mosaic, cfg4):
    rng = np.random.default_rng(9)
    z_ini, u_ref, y_ref = random_targets(system, cfg4, rng)
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg4)
    sol = solve_elastic(prob)
    prob2 = prob.with_target(z_ini + 0.01, u_ref, y_ref + 0.05)
    warm = solve_elastic(prob2, warm=sol.admm_state)
    cold = solve_elastic(prob2)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-7)
    np.testing.assert_allclose(warm.g, cold.g, atol=1e-5)


def test_group_survives_with_sum_constraint(system, small_mosaic):
    # both sum-to-one rows kept: no penalty can kill a group
    cfg = DeepcConfig(L=4, rho=2, Q=1.0, R=1.0, lambda_cap=1e4)
    rng = np.random.default_rng(11)
    z_ini, u_ref, y_ref = random_targets(system, cfg, rng)
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg)
    sol = solve_cap(prob)
    assert min(sol.group_norms) > 1e-3


@pytest.fixture(scope="module")
def death_instance(system, small_mosaic):
    """Target deep inside mode 1 so the mode-0 group becomes dispensable."""
    u_warm = np.full(6, 3.0)
    traj = simulate_ss(system, np.zeros(1), u_warm)
    z_ini = np.concatenate([u_warm[-2:], traj.y.ravel()[-2:]])
    y_ref = np.full(4, 3.0)
    u_ref = np.full(4, (1 - 0.9) * 3.0 / 0.15)
    cfg = DeepcConfig(L=4, rho=2, Q=1.0, R=1.0, lambda_cap=5.0)
    return cfg, z_ini, u_ref, y_ref


def test_threshold_brackets_group_death(system, small_mosaic, death_instance):
    cfg, z_ini, u_ref, y_ref = death_instance
    lam_c = critical_lambda(small_mosaic, z_ini, u_ref, y_ref, cfg, iota=0)
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg,
                         relax_sum_to_one=(0,))
    alive = solve_cap(prob, lam=0.98 * lam_c)
    dead = solve_cap(prob, lam=1.02 * lam_c)
    assert alive.group_norms[0] > 0.0
    assert dead.group_norms[0] == 0.0
    assert max(alive.kkt.values()) < 1e-5
    assert max(dead.kkt.values()) < 1e-5


def test_threshold_requires_relaxed_sum_row(system, small_mosaic, death_instance):
    cfg, z_ini, u_ref, y_ref = death_instance
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg)
    sol = solve_cap(prob)
    with pytest.raises(ValueError):
        shrink_threshold(prob, sol, iota=0)


def test_no_transition_raises(system, small_mosaic, cfg4):
    # reference straddling both modes: the mode-0 group never becomes zero
    rng = np.random.default_rng(1)
    z_ini, u_ref, _ = random_targets(system, cfg4, rng)
    y_ref = np.array([-3.0, 3.0, -3.0, 3.0])
    with pytest.raises(SingularWbar):
        critical_lambda(small_mosaic, z_ini, u_ref, y_ref, cfg4, iota=0)


def sign_pattern(sol, tol=0.0):
    s = np.sign(sol.g)
    s[np.abs(sol.g) <= tol] = 0.0
    return s


def test_explicit_coefficients_reproduce_solution(system, small_mosaic, cfg4):
    rng = np.random.default_rng(23)
    z_ini, u_ref, y_ref = random_targets(system, cfg4, rng)
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg4)
    sol = solve_elastic(prob)
    region = explicit_elastic_coefficients(prob, sol.active_set, sign_pattern(sol))
    np.testing.assert_allclose(region.selector(prob.z_tilde), sol.g, atol=1e-6)
    assert region.contains(prob.z_tilde, tol=1e-7)


def test_explicit_coefficients_are_affine_on_region(system, small_mosaic, cfg4):
    rng = np.random.default_rng(23)
    z_ini, u_ref, y_ref = random_targets(system, cfg4, rng)
    prob = build_problem(small_mosaic, z_ini, u_ref, y_ref, cfg4)
    sol = solve_elastic(prob)
    region = explicit_elastic_coefficients(prob, sol.active_set, sign_pattern(sol))
    z0 = prob.z_tilde
    step = np.zeros_like(z0)
    step[0] = 1e-3
    z_a, z_b = z0 - step, z0 + step
    assert region.contains(z_a, tol=1e-7) and region.contains(z_b, tol=1e-7)
    g_a, g_b = region.selector(z_a), region.selector(z_b)
    # midpoint of collinear initial conditions maps to the midpoint selector
    np.testing.assert_allclose(region.selector(z0), 0.5 * (g_a + g_b), atol=1e-10)
    # and the affine law agrees with a fresh solve at the perturbed point
    prob_a = prob.with_target(z_a[: len(prob.z_ini)], u_ref, y_ref)
    sol_a = solve_elastic(prob_a)
    np.testing.assert_allclose(sol_a.g, g_a, atol=1e-5)
