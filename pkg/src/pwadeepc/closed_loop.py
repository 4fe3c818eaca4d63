"""Receding-horizon control of the simulated plant plus run metrics.

Runs a selector-based predictive controller against the piecewise affine
plant, records the applied trajectories and per-step solutions, and computes
tracking RMSEs, the behavioral performance indicator, and the per-step
misclassification cost-bound ledger comparing exact-label and estimated-label
controllers.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, MaxIter, MissingSolution, RankDeficient, SolverFailure
from .pwa_system import PwaStateSpace, active_mode_ss, simulate_ss, step_ss
from .behavior_matrices import MosaicBlocks, subspace_predictor, delta_m
from .deepc_solver import (DeepcConfig, DeepcProblem, build_problem,
                           solve_elastic, solve_cap)


@dataclass
class ClosedLoopRun:
    """Record of one closed-loop experiment."""

    sys: PwaStateSpace
    scheme: str
    cfg: DeepcConfig
    u: np.ndarray            # applied inputs, (T, n_u)
    y: np.ndarray            # realized outputs, (T, n_y)
    s: np.ndarray            # realized modes, (T,)
    x: np.ndarray            # states, (T+1, n_x); x[t] precedes u[t]
    u_ref: np.ndarray        # full reference incl. preview, (>= T+L, n_u)
    y_ref: np.ndarray
    solutions: list          # per-step DeepcSolution
    z_inis: list             # per-step stacked past window
    completed: bool = True
    failure: str | None = None

    @property
    def T(self) -> int:
        return len(self.u)


@dataclass
class MetricsReport:
    rmse_u: float
    rmse_y: float
    bpi: np.ndarray                   # (T, S), inf where undefined
    zero_denominators: int = 0
    misclassification: float | None = None
    ledger: list = field(default_factory=list)


def rmse(seq, ref) -> float:
    seq = np.asarray(seq, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if seq.size != ref.size:
        raise ValueError("sequences must have equal length")
    return float(np.sqrt(np.mean((seq - ref) ** 2)))


def equilibrium_input(sys: PwaStateSpace, y_target: float) -> float:
    """Input holding the scalar-state plant at the given output level."""
    x = np.atleast_1d(float(y_target))
    mode = sys.modes[active_mode_ss(sys, x, np.zeros(sys.n_u))]
    u = np.linalg.lstsq(mode.B, (np.eye(sys.n_x) - mode.A) @ x - mode.f,
                        rcond=None)[0]
    return float(u[0])


def case_references(sys: PwaStateSpace, case: int, T: int, L: int,
                    switch: int = 25, amplitude: float = 4.0):
    """Piecewise-constant reference forcing one mode switch.

    Case 1 steps the output reference from -amplitude to +amplitude at
    `switch`; case 2 is mirrored.  Input references are the per-level
    equilibrium inputs.  Both include L steps of preview past T.
    """
    if case not in (1, 2):
        raise ValueError("case must be 1 or 2")
    first, second = (-amplitude, amplitude) if case == 1 else (amplitude, -amplitude)
    n = T + L
    y_ref = np.where(np.arange(n) < switch, first, second).astype(float)
    u_levels = {level: equilibrium_input(sys, level) for level in (first, second)}
    u_ref = np.array([u_levels[v] for v in y_ref])
    return u_ref, y_ref


def run_receding_horizon(sys: PwaStateSpace, blocks: MosaicBlocks,
                         cfg: DeepcConfig, scheme: str, u_ref, y_ref, T: int,
                         x0=0.0, relax_sum_to_one=()) -> ClosedLoopRun:
    """Closed loop: solve, apply the first planned input, shift, repeat.

    The past window starts zero-padded; a SolverFailure ends the run early
    with the partial record flagged instead of raising.
    """
    if scheme not in ("elastic", "cap"):
        raise ValueError("scheme must be 'elastic' or 'cap'")
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1, sys.n_u)
    y_ref = np.asarray(y_ref, dtype=float).reshape(-1, sys.n_y)
    L, rho = cfg.L, cfg.rho
    if len(u_ref) < T + L or len(y_ref) < T + L:
        raise ValueError("references must cover T + L steps of preview")
    solve = solve_elastic if scheme == "elastic" else solve_cap
    u_past = np.zeros((rho, sys.n_u))
    y_past = np.zeros((rho, sys.n_y))
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    us, ys, ss, xs = [], [], [], [x.copy()]
    solutions, z_inis = [], []
    problem = None
    warm = None
    completed, failure = True, None
    for t in range(T):
        z_ini = np.concatenate([u_past.ravel(), y_past.ravel()])
        uf_ref = u_ref[t: t + L].ravel()
        yf_ref = y_ref[t: t + L].ravel()
        if problem is None:
            problem = build_problem(blocks, z_ini, uf_ref, yf_ref, cfg,
                                    relax_sum_to_one)
        else:
            problem = problem.with_target(z_ini, uf_ref, yf_ref)
        try:
            sol = solve(problem, warm=warm)
        except (SolverFailure, MaxIter, Infeasible, RankDeficient) as exc:
            completed, failure = False, str(exc)
            break
        warm = sol.admm_state
        u_t = sol.u_f[: sys.n_u]
        x, y_t, mode = step_ss(sys, x, u_t)
        us.append(u_t)
        ys.append(y_t)
        ss.append(mode)
        xs.append(x.copy())
        solutions.append(sol)
        z_inis.append(z_ini)
        u_past = np.vstack([u_past[1:], u_t])
        y_past = np.vstack([y_past[1:], y_t])
    return ClosedLoopRun(
        sys=sys, scheme=scheme, cfg=cfg,
        u=np.array(us).reshape(-1, sys.n_u),
        y=np.array(ys).reshape(-1, sys.n_y),
        s=np.array(ss, dtype=int),
        x=np.array(xs),
        u_ref=u_ref, y_ref=y_ref,
        solutions=solutions, z_inis=z_inis,
        completed=completed, failure=failure)


def _padding_mode(sys: PwaStateSpace) -> int:
    """Mode attributed to the fictitious pre-run samples (plant at rest)."""
    return active_mode_ss(sys, np.zeros(sys.n_x), np.zeros(sys.n_u))


def _continuation(run: ClosedLoopRun, t: int, sol):
    """Plant rollout from the step-t state under the planned input sequence."""
    u_plan = sol.u_f.reshape(-1, run.sys.n_u)
    return simulate_ss(run.sys, run.x[t], u_plan)


def _window_modes(run: ClosedLoopRun, t: int, sol) -> tuple:
    """(past rho modes, future L modes) realized around step t."""
    rho = run.cfg.rho
    pad = [_padding_mode(run.sys)] * max(rho - t, 0)
    past = pad + list(run.s[max(t - rho, 0): t])
    future = list(_continuation(run, t, sol).s)
    return past, future


def bpi(run: ClosedLoopRun, zero_tol: float = 1e-6,
        affine: bool = True):
    """Per-step, per-mode ratio of selector support to explainable data.

    The denominator counts ground-truth samples of each mode in the past
    window and over the plant continuation under the planned inputs; a zero
    denominator yields +inf and is tallied separately.
    """
    if not run.solutions:
        raise MissingSolution("run carries no per-step solutions")
    sys = run.sys
    S = len(run.solutions[0].G)
    out = np.zeros((run.T, S))
    zero_count = 0
    extra = 1 if affine else 0
    for t, sol in enumerate(run.solutions):
        past, future = _window_modes(run, t, sol)
        window = past + future
        scale = zero_tol * max(1.0, float(np.max(np.abs(sol.g))))
        for i in range(S):
            n_ti = sum(1 for m in window if m == i)
            support = int(np.sum(np.abs(sol.G[i]) > scale))
            den = sys.n_u * n_ti + sys.n_x + extra
            if den == 0:
                out[t, i] = np.inf
                zero_count += 1
            else:
                out[t, i] = support / den
    return out, zero_count


def summarize_run(run: ClosedLoopRun, zero_tol: float = 1e-6,
                  affine: bool = True) -> MetricsReport:
    T = run.T
    series, zero_count = bpi(run, zero_tol, affine)
    return MetricsReport(
        rmse_u=rmse(run.u, run.u_ref[:T]),
        rmse_y=rmse(run.y, run.y_ref[:T]),
        bpi=series,
        zero_denominators=zero_count)


def _regularizer(cfg: DeepcConfig, scheme: str, sol) -> float:
    if scheme == "elastic":
        return float(cfg.lambda1 * np.abs(sol.g).sum()
                     + cfg.lambda2 * sol.g @ sol.g)
    weights = np.sqrt([len(Gi) for Gi in sol.G])
    return float(cfg.lambda_cap * sum(w * np.linalg.norm(Gi)
                                      for w, Gi in zip(weights, sol.G)))


def _realized_cost(run: ClosedLoopRun, t: int, sol, scheme: str) -> float:
    """Regularized cost with the plant's realized outputs under the plan."""
    cfg = run.cfg
    L = cfg.L
    traj = _continuation(run, t, sol)
    y_real = traj.y.ravel()
    dy = y_real - run.y_ref[t: t + L].ravel()
    du = sol.u_f - run.u_ref[t: t + L].ravel()
    Qbar = np.kron(np.eye(L), cfg.Q)
    Rbar = np.kron(np.eye(L), cfg.R)
    return float(dy @ Qbar @ dy + du @ Rbar @ du) + _regularizer(cfg, scheme, sol)


def _padded_l1_diff(a: np.ndarray, b: np.ndarray) -> float:
    n = max(a.size, b.size)
    pa = np.zeros(n)
    pb = np.zeros(n)
    pa[: a.size] = a
    pb[: b.size] = b
    return float(np.abs(pa - pb).sum())


def misclassification_bound_check(exact_run: ClosedLoopRun,
                                  miss_run: ClosedLoopRun,
                                  blocks_exact: MosaicBlocks,
                                  blocks_miss: MosaicBlocks,
                                  cfg: DeepcConfig, scheme: str) -> list:
    """Per-step evaluation of the misclassification cost bound.

    LHS is the realized regularized cost of the exact-label controller; RHS
    is the estimated-label cost plus the penalty terms built from the
    realized discrepancies (selector, input plan, initial condition) and the
    predictor mismatch of the exact mosaic.  Matrix differences that are not
    dimensionally defined across the two mosaics are replaced by triangle-
    inequality upper bounds, which keeps the RHS an upper bound.
    """
    T = min(exact_run.T, miss_run.T)
    if not exact_run.solutions or not miss_run.solutions:
        raise MissingSolution("both runs must carry per-step solutions")
    sys = exact_run.sys
    phi_bar = max(float(np.max(np.linalg.eigvalsh(np.atleast_2d(cfg.Q)))),
                  float(np.max(np.linalg.eigvalsh(np.atleast_2d(cfg.R)))))
    Phi = subspace_predictor(blocks_exact)
    Y_F = np.hstack([b.Y_F for b in blocks_exact.blocks])
    U_F_hat = np.hstack([b.U_F for b in blocks_miss.blocks])
    Y_F_hat = np.hstack([b.Y_F for b in blocks_miss.blocks])
    norm_YF = float(np.linalg.norm(Y_F, 2))
    norm_UF_hat = float(np.linalg.norm(U_F_hat, 2))
    if Y_F.shape == Y_F_hat.shape:
        norm_dYF = float(np.linalg.norm(Y_F_hat - Y_F, 2))
    else:
        norm_dYF = norm_YF + float(np.linalg.norm(Y_F_hat, 2))
    if scheme == "cap":
        weights = np.sqrt([c for c in blocks_miss.n_cols])
        lam_bar = float(cfg.lambda_cap * np.max(weights))
    ledger = []
    for t in range(T):
        sol = exact_run.solutions[t]
        sol_hat = miss_run.solutions[t]
        lhs = _realized_cost(exact_run, t, sol, scheme)
        j_hat = _realized_cost(miss_run, t, sol_hat, scheme)
        past, future = _window_modes(exact_run, t, sol)
        dM = delta_m(sys, blocks_exact, Phi, past + future)
        ndM2 = float(np.linalg.norm(dM, 2)) ** 2
        z_hat = miss_run.z_inis[t]
        eta_ini = float(np.sum((exact_run.z_inis[t] - z_hat) ** 2))
        eta_u = float(np.sum((sol.u_f - sol_hat.u_f) ** 2))
        eta_g = _padded_l1_diff(sol_hat.g, sol.g)
        eps_hat = (float(np.sum((sol_hat.y_pred
                                 - miss_run.y_ref[t: t + cfg.L].ravel()) ** 2))
                   + float(np.sum((sol_hat.u_f
                                   - miss_run.u_ref[t: t + cfg.L].ravel()) ** 2)))
        c1 = 16.0 * phi_bar * ndM2
        c2 = phi_bar * (16.0 * ndM2 + 2.0)
        c4 = phi_bar * (16.0 * ndM2 * norm_UF_hat ** 2 + 8.0 * norm_dYF ** 2)
        if scheme == "elastic":
            c3 = 16.0 * phi_bar * norm_YF ** 2 + 2.0 * cfg.lambda2
            c4 = c4 + cfg.lambda2
            reg_term = cfg.lambda1 * eta_g
        else:
            c3 = 16.0 * phi_bar * norm_YF ** 2
            reg_term = lam_bar * (eta_g + float(np.abs(sol_hat.g).sum()))
        rhs = (j_hat + c1 * (eta_ini + float(z_hat @ z_hat)) + c2 * eta_u
               + c3 * eta_g ** 2 + c4 * float(sol_hat.g @ sol_hat.g)
               + reg_term + 2.0 * phi_bar * eps_hat + 8.0 * phi_bar * ndM2)
        ledger.append({
            "t": t, "lhs": lhs, "rhs": rhs, "slack": rhs - lhs,
            "holds": bool(rhs - lhs >= -1e-6),
            "eta_g": eta_g, "eta_ini": eta_ini, "eta_u": eta_u,
            "eps_hat": eps_hat, "delta_m_norm2": float(np.sqrt(ndM2)),
        })
    return ledger
