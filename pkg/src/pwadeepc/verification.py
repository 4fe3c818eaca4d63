"""Self-contained property suites backing the `verify` command.

Each suite builds its own small instances from the given system, runs a
check with an independent method (Monte-Carlo reconstruction, exact rank,
brute-force sign enumeration, long-run projected subgradient, penalty
sweeps), and returns a report dict with a boolean `passed`.  Nothing here
depends on files or configuration; the CLI wires the suites to config.
"""

import itertools

import numpy as np

from .pwa_system import (PwaStateSpace, PwarxModel, behavior_basis,
                         matrix_rank, pwarx_active_mode, simulate_ss)
from .data_pipeline import Dataset, partition_dataset, pwarx_labels
from .behavior_matrices import (build_mosaic_blocks, lemma_blocks,
                                verify_fundamental_lemma)
from .deepc_solver import (DeepcConfig, build_problem, critical_lambda,
                           kkt_residual_cap, kkt_residual_elastic,
                           solve_cap, solve_elastic)
from .closed_loop import equilibrium_input
from .errors import SingularWbar


def _square_wave_dataset(sys: PwaStateSpace, pwarx: PwarxModel, seed: int,
                         periods: int = 16, hold: int = 25,
                         level: float = 3.0, dither: float = 0.8):
    """Excitation with long same-mode runs, labeled with the true partition."""
    rng = np.random.default_rng(seed)
    levels = np.repeat([level, -level] * periods, hold)
    u = levels + rng.uniform(-dither, dither, levels.size)
    traj = simulate_ss(sys, np.zeros(sys.n_x), u)
    ds = Dataset(u_d=u.reshape(-1, sys.n_u), y_d=traj.y.reshape(-1, sys.n_y),
                 s_d=traj.s.copy())
    return ds, pwarx_labels(ds, pwarx)


def lemma_suite(sys: PwaStateSpace, pwarx: PwarxModel, L: int = 5,
                trials: int = 100, seed: int = 0,
                residual_tol: float = 1e-6) -> dict:
    """Fresh random trajectories must be combinations of stored windows."""
    ds, labels = _square_wave_dataset(sys, pwarx, seed)
    blocks = lemma_blocks(partition_dataset(ds, labels), L)
    report = verify_fundamental_lemma(sys, pwarx, blocks, L, trials,
                                      seed + 1, residual_tol)
    report["passed"] = (report["success_rate"] == 1.0
                        and report["max_residual"] < residual_tol)
    return report


def _feasible_mode_sequences(sys, pwarx, L, count, rng):
    """Mode sequences realized by the plant under random excitation."""
    seqs = []
    rho = pwarx.rho
    while len(seqs) < count:
        u = rng.uniform(-3.0, 3.0, 30 + L + rho)
        traj = simulate_ss(sys, rng.uniform(-2.0, 2.0, sys.n_x), u)
        t0 = 30
        seq = tuple(
            pwarx_active_mode(pwarx, traj.y[t - rho: t], traj.u[t - rho: t + 1])
            for t in range(t0, t0 + L))
        seqs.append(seq)
    return seqs


def rank_suite(sys: PwaStateSpace, pwarx: PwarxModel,
               depths=(3, 5, 8), per_depth: int = 20, seed: int = 0) -> dict:
    """The trajectory basis of a feasible mode sequence has the exact
    behavioral dimension n_x + n_u*L + 1 (the +1 carries the affine offsets)."""
    rng = np.random.default_rng(seed)
    failures = []
    checked = 0
    for L in depths:
        expected = sys.n_x + sys.n_u * L + 1
        for seq in _feasible_mode_sequences(sys, pwarx, L, per_depth, rng):
            basis = behavior_basis(sys, seq)
            r = matrix_rank(basis)
            checked += 1
            if r != expected:
                failures.append({"L": L, "sequence": list(seq),
                                 "rank": r, "expected": expected})
    return {"checked": checked, "failures": failures,
            "passed": not failures}


def _random_instance(sys, pwarx, rng, max_cols: int = 30, L: int = 4,
                     rho: int = 2):
    """Tiny two-mode problem with a handful of columns per mode."""
    ds, labels = _square_wave_dataset(sys, pwarx, int(rng.integers(1 << 31)),
                                      periods=4, hold=15)
    mb = build_mosaic_blocks(partition_dataset(ds, labels), L, rho,
                             windows="concat")
    keep = min(max_cols, min(mb.n_cols))
    # evenly spaced column subsets keep the blocks well spread in time
    sub = []
    for b in mb.blocks:
        idx = np.linspace(0, b.U_P.shape[1] - 1, keep).astype(int)
        sub.append(type(b)(mode=b.mode, U_P=b.U_P[:, idx], U_F=b.U_F[:, idx],
                           Y_P=b.Y_P[:, idx], Y_F=b.Y_F[:, idx]))
    mb = type(mb)(blocks=tuple(sub), L=L, rho=rho, n_u=mb.n_u, n_y=mb.n_y)
    cfg = DeepcConfig(L=L, rho=rho, Q=1.0, R=1.0,
                      lambda1=float(rng.uniform(0.5, 2.0)), lambda2=1e-3,
                      lambda_cap=float(rng.uniform(0.5, 2.0)))
    z_ini = rng.uniform(-1.0, 1.0, (sys.n_u + sys.n_y) * rho)
    u_ref = rng.uniform(-2.0, 2.0, sys.n_u * L)
    y_ref = rng.uniform(-2.0, 2.0, sys.n_y * L)
    return build_problem(mb, z_ini, u_ref, y_ref, cfg)


def _enumeration_objective_elastic(problem, lam1, lam2):
    """Exact minimum by enumerating sign patterns (tiny instances only)."""
    k = problem.kernel
    n = k.n
    if n > 10:
        raise ValueError("sign enumeration is exponential; keep n <= 10")
    He = k.H + 2.0 * lam2 * np.eye(n)
    best = np.inf
    for pattern in itertools.product((-1.0, 0.0, 1.0), repeat=n):
        s = np.array(pattern)
        Z = np.nonzero(s)[0]
        m_eq = k.A_eq.shape[0]
        M = np.vstack([
            np.hstack([He[np.ix_(Z, Z)], k.A_eq[:, Z].T]),
            np.hstack([k.A_eq[:, Z], np.zeros((m_eq, m_eq))])])
        b = np.concatenate([-problem.q[Z] - lam1 * s[Z], problem.b_eq])
        sol, *_ = np.linalg.lstsq(M, b, rcond=None)
        gZ = sol[: len(Z)]
        if np.any(np.sign(gZ) * s[Z] < 0):
            continue
        g = np.zeros(n)
        g[Z] = gZ
        if np.max(np.abs(k.A_eq @ g - problem.b_eq)) > 1e-8:
            continue
        obj = (0.5 * g @ (k.H @ g) + problem.q @ g + lam1 * np.abs(g).sum()
               + lam2 * g @ g)
        best = min(best, obj)
    return best


def _objective(problem, g, scheme, lams):
    k = problem.kernel
    smooth = 0.5 * g @ (k.H @ g) + problem.q @ g
    if scheme == "elastic":
        return smooth + lams[0] * np.abs(g).sum() + lams[1] * g @ g
    return smooth + lams[0] * sum(
        k.group_weights[i] * np.linalg.norm(k.group(g, i)) for i in range(k.S))


def _projected_subgradient(problem, scheme, lams, target, iters=20000,
                           seed=0):
    """Long-run Polyak-step subgradient descent on the constraint manifold.

    Uses the candidate optimum as the Polyak target: if the candidate value
    were not optimal, the method would drive the objective strictly below it.
    Returns the best objective encountered.
    """
    k = problem.kernel
    n = k.n
    rng = np.random.default_rng(seed)
    # null-space parametrization of the equality constraints
    A = k.A_eq
    g0, *_ = np.linalg.lstsq(A, problem.b_eq, rcond=None)
    _, sv, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(sv > 1e-12 * (sv[0] if sv.size else 1.0)))
    Nn = Vt[rank:].T
    best = np.inf
    for start in range(3):
        v = rng.normal(scale=0.1, size=Nn.shape[1]) if start else np.zeros(Nn.shape[1])
        for _ in range(iters):
            g = g0 + Nn @ v
            f = _objective(problem, g, scheme, lams)
            best = min(best, f)
            sub = k.H @ g + problem.q
            if scheme == "elastic":
                sub = sub + lams[0] * np.sign(g) + 2.0 * lams[1] * g
            else:
                for i in range(k.S):
                    sl = slice(k.offsets[i], k.offsets[i + 1])
                    nrm = np.linalg.norm(g[sl])
                    if nrm > 1e-14:
                        sub[sl] += lams[0] * k.group_weights[i] * g[sl] / nrm
            d = Nn.T @ sub
            nd2 = d @ d
            if nd2 < 1e-20:
                break
            step = max(f - target, 1e-12) / nd2
            v = v - step * d
    return best


def _primal_dual_elastic(problem, lams, iters=200000):
    """Long-run primal-dual (proximal-gradient/dual-ascent) elastic oracle.

    Entirely splitting-free on the support: the l1 term enters only through
    its prox, so the method shares no code path with the production solver.
    Returns the best feasible-projected objective seen.
    """
    k = problem.kernel
    n = k.n
    A = k.A_eq
    lam1, lam2 = lams
    Lf = float(np.linalg.eigvalsh(k.H).max()) + 2.0 * lam2
    nA = float(np.linalg.norm(A, 2))
    sig = 1.0 / nA
    tau = 0.9 / (Lf / 2.0 + sig * nA * nA)
    AAt = A @ A.T
    g = np.zeros(n)
    y = np.zeros(A.shape[0])
    best = np.inf
    for it in range(iters):
        grad = k.H @ g + problem.q + 2.0 * lam2 * g
        v = g - tau * (grad + A.T @ y)
        gn = np.sign(v) * np.maximum(np.abs(v) - tau * lam1, 0.0)
        y = y + sig * (A @ (2.0 * gn - g) - problem.b_eq)
        g = gn
        if it % 1000 == 999:
            gp = g - A.T @ np.linalg.solve(AAt, A @ g - problem.b_eq)
            best = min(best, _objective(problem, gp, "elastic", lams))
    return best


def solver_oracle_suite(sys: PwaStateSpace, pwarx: PwarxModel,
                        instances: int = 10, seed: int = 0,
                        rel_tol: float = 1e-4, kkt_tol: float = 1e-5) -> dict:
    """Both solvers must match independent oracles on random instances."""
    rng = np.random.default_rng(seed)
    rows = []
    passed = True
    max_kkt = 0.0
    for j in range(instances):
        problem = _random_instance(sys, pwarx, rng)
        cfg = problem.cfg
        sol_e = solve_elastic(problem)
        sol_c = solve_cap(problem)
        kkt_e = max(kkt_residual_elastic(problem, sol_e).values())
        kkt_c = max(kkt_residual_cap(problem, sol_c).values())
        max_kkt = max(max_kkt, kkt_e, kkt_c)
        obj_e = _objective(problem, sol_e.g, "elastic",
                           (cfg.lambda1, cfg.lambda2))
        obj_c = _objective(problem, sol_c.g, "cap", (cfg.lambda_cap, 0.0))
        oracle_e = _primal_dual_elastic(problem, (cfg.lambda1, cfg.lambda2))
        oracle_c = _projected_subgradient(problem, "cap",
                                          (cfg.lambda_cap, 0.0), obj_c,
                                          seed=j)
        rel_e = abs(obj_e - oracle_e) / max(1.0, abs(oracle_e))
        rel_c = abs(obj_c - oracle_c) / max(1.0, abs(oracle_c))
        ok = (rel_e < rel_tol and rel_c < rel_tol
              and kkt_e < kkt_tol and kkt_c < kkt_tol)
        passed = passed and ok
        rows.append({"instance": j, "elastic_rel": rel_e, "cap_rel": rel_c,
                     "elastic_kkt": kkt_e, "cap_kkt": kkt_c, "ok": ok})
    return {"instances": rows, "max_kkt": max_kkt, "passed": passed}


def tiny_enumeration_check(sys: PwaStateSpace, pwarx: PwarxModel,
                           seed: int = 0, rel_tol: float = 1e-6) -> dict:
    """Exact sign-enumeration cross-check on one 8-column instance."""
    rng = np.random.default_rng(seed)
    problem = _random_instance(sys, pwarx, rng, max_cols=4)
    cfg = problem.cfg
    sol = solve_elastic(problem)
    obj = _objective(problem, sol.g, "elastic", (cfg.lambda1, cfg.lambda2))
    oracle = _enumeration_objective_elastic(problem, cfg.lambda1, cfg.lambda2)
    rel = abs(obj - oracle) / max(1.0, abs(oracle))
    return {"objective": obj, "enumeration": oracle, "rel_error": rel,
            "passed": rel < rel_tol}


def threshold_suite(sys: PwaStateSpace, pwarx: PwarxModel,
                    instances: int = 5, seed: int = 0,
                    margin: float = 0.02, norm_tol: float = 1e-8) -> dict:
    """The computed shrink threshold must bracket group death within 2%."""
    rng = np.random.default_rng(seed)
    L, rho = 4, 2
    cfg = DeepcConfig(L=L, rho=rho, Q=1.0, R=1.0, lambda2=1e-6)
    rows = []
    passed = True
    done = 0
    attempts = 0
    while done < instances and attempts < 10 * instances:
        ds, labels = _square_wave_dataset(sys, pwarx, seed + attempts,
                                          periods=6, hold=20)
        mb = build_mosaic_blocks(partition_dataset(ds, labels), L, rho,
                                 windows="concat")
        attempts += 1
        level = float(rng.uniform(1.5, 3.5))
        u_eq = equilibrium_input(sys, level)
        z_ini = np.concatenate([np.full(rho, u_eq), np.full(rho, level)])
        u_ref = np.full(L, u_eq)
        y_ref = np.full(L, level)
        iota = 0  # reference deep in mode 1 territory: mode-0 group can die
        try:
            thr = critical_lambda(mb, z_ini, u_ref, y_ref, cfg, iota)
        except SingularWbar:
            continue
        norms = {}
        for fac in (1.0 - margin, 1.0 + margin):
            problem = build_problem(mb, z_ini, u_ref, y_ref, cfg,
                                    relax_sum_to_one=(iota,))
            sol = solve_cap(problem, lam=fac * thr)
            norms[fac] = float(np.linalg.norm(sol.G[iota]))
        ok = (norms[1.0 - margin] > norm_tol
              and norms[1.0 + margin] < norm_tol)
        passed = passed and ok
        rows.append({"level": level, "threshold": thr,
                     "norm_below": norms[1.0 - margin],
                     "norm_above": norms[1.0 + margin], "ok": ok})
        done += 1
    if done < instances:
        passed = False
    return {"instances": rows, "completed": done, "requested": instances,
            "passed": passed}


def run_all(sys: PwaStateSpace, pwarx: PwarxModel, seed: int = 0) -> dict:
    suites = {
        "fundamental_lemma": lemma_suite(sys, pwarx, seed=seed),
        "rank": rank_suite(sys, pwarx, seed=seed),
        "solver_oracle": solver_oracle_suite(sys, pwarx, seed=seed),
        "sign_enumeration": tiny_enumeration_check(sys, pwarx, seed=seed),
        "shrink_threshold": threshold_suite(sys, pwarx, seed=seed),
    }
    return {"suites": suites,
            "passed": all(s["passed"] for s in suites.values())}
