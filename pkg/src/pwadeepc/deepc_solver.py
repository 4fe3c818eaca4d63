"""Shrinkage-regularized data-enabled predictive control solvers.

The decision variable is the stacked per-mode selector g = [G_1; ...; G_S].
Both regularization schemes share the quadratic tracking objective

    J(g) = || U_F g - u_ref ||^2_Rbar + || Y_F g - y_ref ||^2_Qbar

subject to the past-matching equalities Z_P g = z_ini, per-mode sum-to-one
rows, and optional box constraints on the predicted inputs/outputs.  The
elastic scheme adds lambda1 * ||g||_1 + lambda2 * ||g||_2^2; the CAP (group
lasso) scheme adds lambda * sum_i sqrt(n_i) * ||G_i||_2 with n_i the column
count of mode i.

Both are solved by ADMM (operator splitting) with a prefactored KKT system,
followed by an exact polish on the support/sign pattern of the splitting
iterate.  The polish solves the reduced KKT equations directly, which yields
exact zeros, machine-precision constraint satisfaction, and certifiable KKT
residuals.

Note: a per-mode sum-to-one row makes that mode's selector sum to one, so a
group can only shrink to exactly zero when its sum row is relaxed
(`relax_sum_to_one`); the shrink-threshold analysis operates on that reduced
problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .behavior_matrices import MosaicBlocks
from .errors import Infeasible, MaxIter, RankDeficient, SingularWbar


@dataclass(frozen=True)
class DeepcConfig:
    L: int
    rho: int
    Q: np.ndarray
    R: np.ndarray
    lambda1: float = 10.0
    lambda2: float = 1e-9
    lambda_cap: float = 10.0
    u_box: tuple | None = None   # (lo, hi) per input channel or scalars
    y_box: tuple | None = None
    admm_tol: float = 1e-9
    admm_max_iter: int = 50000
    over_relax: float = 1.6
    kkt_tol: float = 1e-6

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.any(np.linalg.eigvalsh(R) <= 0):
            raise ValueError("R must be positive definite")
        if np.any(np.linalg.eigvalsh(Q) < 0):
            raise ValueError("Q must be positive semidefinite")
        if self.lambda2 <= 0:
            raise ValueError("lambda2 must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


class DeepcProblem:
    """Assembled solver data; treated as immutable after construction.

    `kernel` carries target-independent precomputations (stacked blocks,
    Hessian, factorization cache) shared across receding-horizon steps.
    """

    def __init__(self, kernel, z_ini, u_ref, y_ref):
        self.kernel = kernel
        self.cfg = kernel.cfg
        self.z_ini = np.asarray(z_ini, dtype=float).ravel()
        self.u_ref = np.asarray(u_ref, dtype=float).ravel()
        self.y_ref = np.asarray(y_ref, dtype=float).ravel()
        k = kernel
        if self.z_ini.size != (k.n_u + k.n_y) * k.rho:
            raise ValueError("z_ini length must be (n_u + n_y) * rho")
        if self.u_ref.size != k.n_u * k.L or self.y_ref.size != k.n_y * k.L:
            raise ValueError("references must span the horizon")
        self.b_eq = np.concatenate([self.z_ini, np.ones(len(k.kept_modes))])
        self.q = -2.0 * (k.UtR @ self.u_ref) - 2.0 * (k.YtQ @ self.y_ref)
        # z_ini extended with one entry per kept sum-to-one row
        self.z_tilde = self.b_eq

    def with_target(self, z_ini, u_ref, y_ref) -> "DeepcProblem":
        return DeepcProblem(self.kernel, z_ini, u_ref, y_ref)


class _Kernel:
    def __init__(self, mb: MosaicBlocks, cfg: DeepcConfig, relax_sum_to_one=()):
        self.cfg = cfg
        self.L, self.rho = cfg.L, cfg.rho
        self.n_u, self.n_y = mb.n_u, mb.n_y
        if (mb.L, mb.rho) != (cfg.L, cfg.rho):
            raise ValueError("config horizon/lag must match the data blocks")
        self.S = mb.S
        self.cols = list(mb.n_cols)
        self.offsets = np.concatenate([[0], np.cumsum(self.cols)]).astype(int)
        self.n = int(self.offsets[-1])
        self.U_F = np.hstack([b.U_F for b in mb.blocks])
        self.Y_F = np.hstack([b.Y_F for b in mb.blocks])
        self.Z_P = np.hstack([b.Z_P for b in mb.blocks])
        self.relaxed = tuple(sorted(set(int(i) for i in relax_sum_to_one)))
        self.kept_modes = [i for i in range(self.S) if i not in self.relaxed]
        ones = np.zeros((len(self.kept_modes), self.n))
        for r, i in enumerate(self.kept_modes):
            ones[r, self.offsets[i]: self.offsets[i + 1]] = 1.0
        self.A_eq = np.vstack([self.Z_P, ones])
        Qbar = np.kron(np.eye(cfg.L), cfg.Q)
        Rbar = np.kron(np.eye(cfg.L), cfg.R)
        self.Qbar, self.Rbar = Qbar, Rbar
        self.UtR = self.U_F.T @ Rbar
        self.YtQ = self.Y_F.T @ Qbar
        self.H = 2.0 * (self.UtR @ self.U_F) + 2.0 * (self.YtQ @ self.Y_F)
        # inequality rows from boxes on predicted inputs/outputs
        rows, rhs = [], []
        for box, block, m in ((cfg.u_box, self.U_F, self.n_u * cfg.L),
                              (cfg.y_box, self.Y_F, self.n_y * cfg.L)):
            if box is not None:
                lo, hi = box
                rows += [block, -block]
                rhs += [np.broadcast_to(np.atleast_1d(hi), (cfg.L, len(np.atleast_1d(hi)))).ravel()
                        if np.ndim(hi) else np.full(m, hi),
                        -np.broadcast_to(np.atleast_1d(lo), (cfg.L, len(np.atleast_1d(lo)))).ravel()
                        if np.ndim(lo) else np.full(m, -lo)]
        if rows:
            self.Gamma = np.vstack(rows)
            self.gamma = np.concatenate(rhs)
        else:
            self.Gamma = np.zeros((0, self.n))
            self.gamma = np.zeros(0)
        self.group_weights = np.sqrt(np.array(self.cols, dtype=float))
        self._factor_cache = {}

    def group(self, g: np.ndarray, i: int) -> np.ndarray:
        return g[self.offsets[i]: self.offsets[i + 1]]

    def factorization(self, sigma: float, extra_diag: float):
        key = (round(float(sigma), 12), round(float(extra_diag), 16))
        if key not in self._factor_cache:
            K = self.H + (sigma + extra_diag) * np.eye(self.n)
            if self.Gamma.shape[0]:
                K = K + sigma * (self.Gamma.T @ self.Gamma)
            try:
                cK = scipy.linalg.cho_factor(K)
            except np.linalg.LinAlgError as exc:
                raise RankDeficient("splitting system not positive definite") from exc
            Kinv_AT = scipy.linalg.cho_solve(cK, self.A_eq.T, check_finite=False)
            AKinvAT = self.A_eq @ Kinv_AT
            try:
                cS = scipy.linalg.cho_factor(AKinvAT)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                cS = None  # rank-deficient equalities: handled via lstsq path
            self._factor_cache[key] = (cK, cS, Kinv_AT)
        return self._factor_cache[key]


def build_problem(blocks: MosaicBlocks, z_ini, u_ref, y_ref, cfg: DeepcConfig,
                  relax_sum_to_one=()) -> DeepcProblem:
    """Assemble the selector-space problem for one target.

    Use problem.with_target(...) across receding-horizon steps to reuse the
    block stacks and factorizations.
    """
    kernel = _Kernel(blocks, cfg, relax_sum_to_one)
    return DeepcProblem(kernel, z_ini, u_ref, y_ref)


@dataclass
class DeepcSolution:
    scheme: str
    G: list
    g: np.ndarray
    u_f: np.ndarray
    y_pred: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    active_set: np.ndarray
    kkt: dict = field(default_factory=dict)
    iterations: int = 0
    objective: float = 0.0
    converged: bool = False
    polished: bool = False
    admm_state: tuple | None = None

    @property
    def group_norms(self) -> list:
        return [float(np.linalg.norm(Gi)) for Gi in self.G]


def _tracking_objective(problem: DeepcProblem, g: np.ndarray) -> float:
    k = problem.kernel
    du = k.U_F @ g - problem.u_ref
    dy = k.Y_F @ g - problem.y_ref
    return float(du @ (k.Rbar @ du) + dy @ (k.Qbar @ dy))


def _eq_solve(problem, sigma, extra_diag, rhs_g):
    """Solve the equality-constrained quadratic step; returns (g, nu)."""
    k = problem.kernel
    cK, cS, Kinv_AT = k.factorization(sigma, extra_diag)
    t = scipy.linalg.cho_solve(cK, rhs_g, check_finite=False)
    r = k.A_eq @ t - problem.b_eq
    if cS is not None:
        nu = scipy.linalg.cho_solve(cS, r, check_finite=False)
    else:
        nu, res, *_ = np.linalg.lstsq(k.A_eq @ Kinv_AT, r, rcond=None)
        if res.size and res[0] > 1e-8 * max(1.0, np.linalg.norm(problem.b_eq)):
            raise Infeasible("equality constraints are inconsistent")
    g = t - Kinv_AT @ nu
    return g, nu


def _prox_elastic(v, thr, shrink):
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0) / shrink


def _prox_cap(kernel, v, lam_over_sigma):
    out = v.copy()
    for i in range(kernel.S):
        sl = slice(kernel.offsets[i], kernel.offsets[i + 1])
        nrm = np.linalg.norm(v[sl])
        w = lam_over_sigma * kernel.group_weights[i]
        out[sl] = 0.0 if nrm <= w else (1.0 - w / nrm) * v[sl]
    return out


def _admm(problem: DeepcProblem, scheme: str, lams: tuple, warm=None,
          try_finish=None):
    """Shared splitting loop.  Splits g = z on the regularized variable and,
    when boxes exist, Gamma g = z_c on the constrained image.

    The penalty parameter is rebalanced against the primal/dual residual
    ratio, and at exponentially spaced checkpoints `try_finish(g, z, w, nu,
    sigma, it)` may certify an exact solution from the current support and
    stop early (splitting identifies the pattern; the polish supplies the
    precision).
    """
    k = problem.kernel
    cfg = problem.cfg
    n, m_ineq = k.n, k.Gamma.shape[0]
    extra = 2.0 * lams[1] if scheme == "elastic" else 0.0
    sigma = max(1.0, np.trace(k.H) / max(n, 1))
    alpha = cfg.over_relax
    if warm is not None:
        g, z, w = (np.asarray(x, dtype=float).copy() for x in warm)
    else:
        g = np.zeros(n)
        z = np.zeros(n + m_ineq)
        w = np.zeros(n + m_ineq)

    def apply_F(v):
        return np.concatenate([v, k.Gamma @ v]) if m_ineq else v

    def applyFT(v):
        return v[:n] + (k.Gamma.T @ v[n:] if m_ineq else 0.0)

    nu = np.zeros(k.A_eq.shape[0])
    tol = cfg.admm_tol
    checkpoint = 50
    for it in range(1, cfg.admm_max_iter + 1):
        rhs = -problem.q + sigma * applyFT(z - w)
        g, nu = _eq_solve(problem, sigma, extra, rhs)
        Fg = apply_F(g)
        Fg_rel = alpha * Fg + (1.0 - alpha) * z
        v = Fg_rel + w
        z_prev = z
        if scheme == "elastic":
            z_g = _prox_elastic(v[:n], lams[0] / sigma, 1.0)
        else:
            z_g = _prox_cap(k, v[:n], lams[0] / sigma)
        if m_ineq:
            z_c = np.minimum(v[n:], k.gamma)
            z = np.concatenate([z_g, z_c])
        else:
            z = z_g
        w = w + Fg_rel - z
        if it % 10 == 0 or it == cfg.admm_max_iter:
            r_prim = np.linalg.norm(Fg - z)
            r_dual = sigma * np.linalg.norm(applyFT(z - z_prev))
            scale_p = max(np.linalg.norm(Fg), np.linalg.norm(z), 1.0)
            scale_d = max(sigma * np.linalg.norm(applyFT(w)), 1.0)
            if r_prim <= tol * scale_p and r_dual <= tol * scale_d:
                return g, z, w, nu, sigma, it, True, None
        if it == checkpoint:
            # double early on, then every 400: certification attempts are
            # cheap next to the iterations they can save
            checkpoint = min(checkpoint * 2, checkpoint + 400)
            if try_finish is not None:
                done = try_finish(g, z, w, nu, sigma, it)
                if done is not None:
                    return g, z, w, nu, sigma, it, True, done
            # rebalance the penalty against the residual ratio
            r_prim = np.linalg.norm(Fg - z) / max(np.linalg.norm(Fg),
                                                  np.linalg.norm(z), 1.0)
            r_dual = sigma * np.linalg.norm(applyFT(z - z_prev))
            r_dual /= max(sigma * np.linalg.norm(applyFT(w)), 1.0)
            if r_prim > 10.0 * r_dual:
                sigma *= 4.0
                w /= 4.0
            elif r_dual > 10.0 * r_prim:
                sigma /= 4.0
                w *= 4.0
    return g, z, w, nu, sigma, it, False, None


def _duals_from_admm(k, z, w, sigma):
    n = k.n
    y_dual = sigma * w
    mu = np.maximum(y_dual[n:], 0.0) if k.Gamma.shape[0] else np.zeros(0)
    return y_dual[:n], mu


def _grad_smooth(problem, g, extra_diag=0.0):
    k = problem.kernel
    return k.H @ g + extra_diag * g + problem.q


def _finish(problem, scheme, lams, g, nu, mu, iterations, converged, polished,
            admm_state) -> DeepcSolution:
    k = problem.kernel
    G = [k.group(g, i).copy() for i in range(k.S)]
    reg = (lams[0] * np.abs(g).sum() + lams[1] * g @ g if scheme == "elastic"
           else lams[0] * sum(k.group_weights[i] * np.linalg.norm(G[i])
                              for i in range(k.S)))
    slack = k.Gamma @ g - k.gamma if k.Gamma.shape[0] else np.zeros(0)
    active = np.nonzero(slack > -1e-8)[0] if slack.size else np.array([], dtype=int)
    return DeepcSolution(
        scheme=scheme, G=G, g=g,
        u_f=k.U_F @ g, y_pred=k.Y_F @ g,
        alpha=nu, mu=mu, active_set=active,
        iterations=iterations,
        objective=_tracking_objective(problem, g) + float(reg),
        converged=converged, polished=polished, admm_state=admm_state,
    )


# --- elastic net ---------------------------------------------------------------

def _polish_elastic(problem, lam1, lam2, support, signs, active, max_passes=25):
    """Exact solve on a support/sign pattern with single-pivot repair.

    Each pass changes the pattern by at most one coordinate (worst violation
    first); wholesale updates oscillate on near-degenerate problems.  Returns
    (g, nu, mu, ok).
    """
    k = problem.kernel
    n = k.n
    support = np.asarray(support, dtype=bool).copy()
    signs = np.asarray(signs, dtype=float).copy()
    active = set(int(a) for a in active)
    seen = set()
    for _ in range(max_passes):
        key = (support.tobytes(), signs.tobytes(), tuple(sorted(active)))
        if key in seen:
            break
        seen.add(key)
        Z = np.nonzero(support)[0]
        act = np.array(sorted(active), dtype=int)
        m_eq = k.A_eq.shape[0]
        He = k.H + 2.0 * lam2 * np.eye(n)
        top = np.hstack([He[np.ix_(Z, Z)], k.A_eq[:, Z].T,
                         k.Gamma[np.ix_(act, Z)].T if act.size else np.zeros((len(Z), 0))])
        midA = np.hstack([k.A_eq[:, Z], np.zeros((m_eq, m_eq + act.size))])
        rows = [top, midA]
        rhs = [-problem.q[Z] - lam1 * signs[Z], problem.b_eq]
        if act.size:
            rows.append(np.hstack([k.Gamma[np.ix_(act, Z)],
                                   np.zeros((act.size, m_eq + act.size))]))
            rhs.append(k.gamma[act])
        M = np.vstack(rows)
        b = np.concatenate(rhs)
        sol, *_ = np.linalg.lstsq(M, b, rcond=None)
        gZ = sol[: len(Z)]
        nu = sol[len(Z): len(Z) + m_eq]
        mu_act = sol[len(Z) + m_eq:]
        g = np.zeros(n)
        g[Z] = gZ
        # verify / repair the pattern
        grad = _grad_smooth(problem, g, 2.0 * lam2) + k.A_eq.T @ nu
        if act.size:
            grad = grad + k.Gamma[act].T @ mu_act
        flipped = np.nonzero(support & (np.sign(g) != signs) & (g != 0.0))[0]
        tiny = np.nonzero(support & (g == 0.0))[0]
        viol = np.nonzero(~support & (np.abs(grad) > lam1 * (1 + 1e-9) + 1e-11))[0]
        neg = ([a for a, m in zip(sorted(active), mu_act) if m < -1e-9]
               if act.size else [])
        if k.Gamma.shape[0]:
            slack = k.Gamma @ g - k.gamma
            new_act = [a for a in np.nonzero(slack > 1e-11)[0] if a not in active]
        else:
            new_act = []
        if flipped.size:
            worst = flipped[np.argmax(np.abs(g[flipped]))]
            support[worst] = False
            signs[worst] = 0.0
        elif tiny.size:
            support[tiny] = False
            signs[tiny] = 0.0
        elif new_act:
            worst = max(new_act, key=lambda a: slack[a])
            active.add(int(worst))
        elif neg:
            mu_map = dict(zip(sorted(active), mu_act))
            active.discard(int(min(neg, key=lambda a: mu_map[a])))
        elif viol.size:
            worst = viol[np.argmax(np.abs(grad[viol]))]
            support[worst] = True
            signs[worst] = -np.sign(grad[worst])
        else:
            mu = np.zeros(k.Gamma.shape[0])
            if act.size:
                mu[act] = np.maximum(mu_act, 0.0)
            return g, nu, mu, True
    return g, nu, np.zeros(k.Gamma.shape[0]), False


def _ipm_elastic(problem, lam1, lam2, max_iter=100, tol=1e-11):
    """Predictor-corrector interior-point solve of the positive/negative split.

    Fallback for instances where the splitting iterate stalls on a degenerate
    face (many coordinates tied at the shrinkage threshold): the central path
    ends at the strictly complementary solution, whose support the active-set
    polish can then certify.  Handles equality constraints only.
    """
    k = problem.kernel
    n = k.n
    m = k.A_eq.shape[0]
    He = k.H + 2.0 * lam2 * np.eye(n)
    Q = np.block([[He, -He], [-He, He]])
    c = np.concatenate([problem.q + lam1, -problem.q + lam1])
    Ab = np.hstack([k.A_eq, -k.A_eq])
    N = 2 * n
    v = np.ones(N)
    s = np.ones(N)
    nu = np.zeros(m)
    scale = 1.0 + max(float(np.abs(c).max()), float(np.abs(problem.b_eq).max()))

    def step_len(x, dx):
        neg = dx < 0
        return 1.0 if not np.any(neg) else min(1.0, float(np.min(-x[neg] / dx[neg])))

    for _ in range(max_iter):
        r_d = Q @ v + c + Ab.T @ nu - s
        r_p = Ab @ v - problem.b_eq
        mu = v @ s / N
        if max(np.abs(r_d).max(), np.abs(r_p).max(), mu) < tol * scale:
            break
        d = s / v
        M = np.block([[Q + np.diag(d), Ab.T], [Ab, np.zeros((m, m))]])
        lu = scipy.linalg.lu_factor(M)
        sol = scipy.linalg.lu_solve(lu, np.concatenate([-r_d - s, -r_p]))
        dv_a = sol[:N]
        ds_a = -s - d * dv_a
        mu_aff = ((v + step_len(v, dv_a) * dv_a)
                  @ (s + step_len(s, ds_a) * ds_a) / N)
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1
        rhs = np.concatenate([-r_d - s + (sigma * mu - dv_a * ds_a) / v, -r_p])
        sol = scipy.linalg.lu_solve(lu, rhs)
        dv, dnu = sol[:N], sol[N:]
        ds = (sigma * mu - dv_a * ds_a) / v - s - d * dv
        v = v + 0.995 * step_len(v, dv) * dv
        s = s + 0.995 * step_len(s, ds) * ds
        nu = nu + 0.995 * step_len(s, ds) * dnu
    return v[:n] - v[n:], nu


def solve_elastic(problem: DeepcProblem, lambda1: float | None = None,
                  lambda2: float | None = None, warm=None) -> DeepcSolution:
    """Entrywise shrinkage scheme; returns a KKT-certified solution."""
    cfg = problem.cfg
    lam1 = cfg.lambda1 if lambda1 is None else float(lambda1)
    lam2 = cfg.lambda2 if lambda2 is None else float(lambda2)
    if lam2 <= 0:
        raise ValueError("lambda2 must be positive")
    k = problem.kernel
    n = k.n

    def attempt(g, z, w, nu, sigma, it, passes=25):
        support = z[:n] != 0.0
        signs = np.sign(z[:n])
        slack = k.Gamma @ g - k.gamma if k.Gamma.shape[0] else np.zeros(0)
        active = np.nonzero(slack > -1e-7)[0] if slack.size else []
        gp, nup, mup, ok = _polish_elastic(problem, lam1, lam2, support, signs,
                                           active, max_passes=passes)
        if not ok:
            return None
        sol = _finish(problem, "elastic", (lam1, lam2), gp, nup, mup,
                      it, True, True, (g, z, w))
        sol.kkt = kkt_residual_elastic(problem, sol, lam1, lam2)
        if max(sol.kkt["stationarity"], sol.kkt["primal_eq"],
               sol.kkt["primal_ineq"]) < cfg.kkt_tol:
            return sol
        return None

    g, z, w, nu, sigma, iters, conv, done = _admm(
        problem, "elastic", (lam1, lam2), warm, attempt)
    if done is not None:
        return done
    sol = attempt(g, z, w, nu, sigma, iters, passes=200)
    if sol is not None:
        return sol
    if k.Gamma.shape[0] == 0:
        gi, _ = _ipm_elastic(problem, lam1, lam2)
        support = np.abs(gi) > 1e-7 * max(1.0, float(np.abs(gi).max()))
        signs = np.where(support, np.sign(gi), 0.0)
        gp, nup, mup, ok = _polish_elastic(problem, lam1, lam2, support, signs,
                                           [], max_passes=200)
        if ok:
            sol = _finish(problem, "elastic", (lam1, lam2), gp, nup, mup,
                          iters, True, True, (gp, gp.copy(), w))
            sol.kkt = kkt_residual_elastic(problem, sol, lam1, lam2)
            if max(sol.kkt["stationarity"], sol.kkt["primal_eq"],
                   sol.kkt["primal_ineq"]) < cfg.kkt_tol:
                return sol
    if not conv:
        raise MaxIter(f"elastic splitting did not converge in {iters} iterations")
    alpha_d, mu = _duals_from_admm(k, z, w, sigma)
    sol = _finish(problem, "elastic", (lam1, lam2), z[:n], nu, mu,
                  iters, conv, False, (g, z, w))
    sol.kkt = kkt_residual_elastic(problem, sol, lam1, lam2)
    return sol


def kkt_residual_elastic(problem: DeepcProblem, sol: DeepcSolution,
                         lambda1: float | None = None,
                         lambda2: float | None = None) -> dict:
    """Stationarity/feasibility residuals of the entrywise-shrinkage system."""
    cfg = problem.cfg
    lam1 = cfg.lambda1 if lambda1 is None else float(lambda1)
    lam2 = cfg.lambda2 if lambda2 is None else float(lambda2)
    k = problem.kernel
    g = sol.g
    grad = _grad_smooth(problem, g, 2.0 * lam2) + k.A_eq.T @ sol.alpha
    if k.Gamma.shape[0] and sol.mu.size:
        grad = grad + k.Gamma.T @ sol.mu
    nz = g != 0.0
    stat = 0.0
    if np.any(nz):
        stat = float(np.max(np.abs(grad[nz] + lam1 * np.sign(g[nz]))))
    if np.any(~nz):
        stat = max(stat, float(np.max(np.maximum(np.abs(grad[~nz]) - lam1, 0.0))))
    out = {
        "stationarity": stat,
        "primal_eq": float(np.max(np.abs(k.A_eq @ g - problem.b_eq))),
    }
    if k.Gamma.shape[0]:
        slack = k.Gamma @ g - k.gamma
        out["primal_ineq"] = float(max(np.max(slack), 0.0))
        out["comp_slack"] = float(np.max(np.abs(sol.mu * slack))) if sol.mu.size else 0.0
        out["dual_feas"] = float(max(np.max(-sol.mu), 0.0)) if sol.mu.size else 0.0
    else:
        out["primal_ineq"] = 0.0
        out["comp_slack"] = 0.0
        out["dual_feas"] = 0.0
    return out


# --- CAP / group lasso ----------------------------------------------------------

def _polish_cap(problem, lam, dead, g0=None, max_iter=200, tol=1e-13,
                kkt_exit=None):
    """Majorize-minimize refinement on the live groups.

    Dead groups stay pinned at zero (they can only be dead when their sum row
    is relaxed); live groups solve the smooth stationarity system with the
    group-norm weights re-evaluated each pass.  g0 seeds the initial weights
    (unit norms when omitted).  With kkt_exit set, the loop also stops as soon
    as the live-group stationarity residual drops below it.
    """
    k = problem.kernel
    n = k.n
    live_cols = np.concatenate([
        np.arange(k.offsets[i], k.offsets[i + 1]) for i in range(k.S)
        if i not in dead
    ]) if len(dead) < k.S else np.array([], dtype=int)
    A = k.A_eq[:, live_cols]
    b = problem.b_eq
    g = np.zeros(n) if g0 is None else g0.copy()
    norms0 = {i: (1.0 if g0 is None else max(np.linalg.norm(k.group(g, i)), 1e-14))
              for i in range(k.S)}
    first = True
    nu = np.zeros(A.shape[0])
    for _ in range(max_iter):
        diag = np.zeros(n)
        for i in range(k.S):
            if i in dead:
                continue
            sl = slice(k.offsets[i], k.offsets[i + 1])
            nrm = norms0[i] if first else max(np.linalg.norm(g[sl]), 1e-14)
            diag[sl] = lam * k.group_weights[i] / nrm
        Hs = k.H[np.ix_(live_cols, live_cols)] + np.diag(diag[live_cols])
        m_eq = A.shape[0]
        M = np.block([[Hs, A.T], [A, np.zeros((m_eq, m_eq))]])
        rhs = np.concatenate([-problem.q[live_cols], b])
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        g_new = np.zeros(n)
        g_new[live_cols] = sol[: len(live_cols)]
        nu = sol[len(live_cols):]
        delta = np.linalg.norm(g_new - g) / max(np.linalg.norm(g_new), 1.0)
        g = g_new
        first = False
        if delta < tol:
            break
        if kkt_exit is not None:
            grad = k.H @ g + problem.q + k.A_eq.T @ nu
            res = 0.0
            for i in range(k.S):
                if i in dead:
                    continue
                sl = slice(k.offsets[i], k.offsets[i + 1])
                nrm = np.linalg.norm(g[sl])
                if nrm > 1e-14:
                    res = max(res, float(np.linalg.norm(
                        grad[sl] + lam * k.group_weights[i] * g[sl] / nrm)))
                else:
                    res = max(res, float(max(
                        np.linalg.norm(grad[sl]) - lam * k.group_weights[i], 0.0)))
            if res < kkt_exit:
                break
    return g, nu


def solve_cap(problem: DeepcProblem, lam: float | None = None,
              warm=None) -> DeepcSolution:
    """Group-shrinkage scheme; returns a KKT-certified solution."""
    cfg = problem.cfg
    lam = cfg.lambda_cap if lam is None else float(lam)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    k = problem.kernel
    n = k.n

    def detect_dead(zv):
        dead = set()
        for i in range(k.S):
            sl = slice(k.offsets[i], k.offsets[i + 1])
            if i in k.relaxed and np.all(zv[sl] == 0.0):
                dead.add(i)
        return dead

    def polish_with(cand, g, z, w, it):
        gp, nup = _polish_cap(problem, lam, cand, z[:n],
                              kkt_exit=0.5 * cfg.kkt_tol)
        sol = _finish(problem, "cap", (lam, 0.0), gp, nup,
                      np.zeros(k.Gamma.shape[0]), it, True, True, (g, z, w))
        sol.kkt = kkt_residual_cap(problem, sol, lam)
        worst = max(sol.kkt["stationarity"], sol.kkt["primal_eq"],
                    sol.kkt["zero_group"], sol.kkt["primal_ineq"])
        return sol, worst

    def attempt(g, z, w, nu, sigma, it):
        sol, worst = polish_with(detect_dead(z[:n]), g, z, w, it)
        return sol if worst < cfg.kkt_tol else None

    if warm is not None:
        # seed the majorize-minimize refinement from the warm iterate; when it
        # certifies, the splitting loop is unnecessary
        gw, zw, ww = (np.asarray(x, dtype=float) for x in warm)
        hot = attempt(gw, zw, ww, None, None, 0)
        if hot is not None:
            return hot

    g, z, w, nu, sigma, iters, conv, done = _admm(
        problem, "cap", (lam, 0.0), warm, attempt)
    if done is not None:
        return done
    # near the shrink boundary the splitting iterate may misjudge a relaxed
    # group; try the detected dead set and its single-group toggles
    dead = detect_dead(z[:n])
    candidates = [dead]
    for i in k.relaxed:
        candidates += [dead | {i}, dead - {i}]
    best = None
    seen = set()
    for cand in candidates:
        key = frozenset(cand)
        if key in seen:
            continue
        seen.add(key)
        sol, worst = polish_with(cand, g, z, w, iters)
        if worst < cfg.kkt_tol:
            return sol
        if best is None or worst < best[0]:
            best = (worst, sol)
    if not conv:
        raise MaxIter(f"group splitting did not converge in {iters} iterations")
    alpha_d, mu = _duals_from_admm(k, z, w, sigma)
    sol = _finish(problem, "cap", (lam, 0.0), z[:n], nu, mu,
                  iters, conv, False, (g, z, w))
    sol.kkt = kkt_residual_cap(problem, sol, lam)
    return sol


def kkt_residual_cap(problem: DeepcProblem, sol: DeepcSolution,
                     lam: float | None = None) -> dict:
    """Residuals of the group-shrinkage optimality system.

    `zero_group` is the violation of the dead-group subgradient bound
    ||c_i + Ztilde_i^T alpha|| <= lambda_i; zero when no group is dead.
    """
    cfg = problem.cfg
    lam = cfg.lambda_cap if lam is None else float(lam)
    k = problem.kernel
    g = sol.g
    grad = _grad_smooth(problem, g) + k.A_eq.T @ sol.alpha
    if k.Gamma.shape[0] and sol.mu.size:
        grad = grad + k.Gamma.T @ sol.mu
    stat, zero_violation = 0.0, 0.0
    for i in range(k.S):
        sl = slice(k.offsets[i], k.offsets[i + 1])
        gi = g[sl]
        lam_i = lam * k.group_weights[i]
        nrm = np.linalg.norm(gi)
        if nrm > 0:
            stat = max(stat, float(np.linalg.norm(grad[sl] + lam_i * gi / nrm)))
        else:
            zero_violation = max(
                zero_violation, float(max(np.linalg.norm(grad[sl]) - lam_i, 0.0)))
    out = {
        "stationarity": stat,
        "zero_group": zero_violation,
        "primal_eq": float(np.max(np.abs(k.A_eq @ g - problem.b_eq))),
    }
    if k.Gamma.shape[0]:
        slack = k.Gamma @ g - k.gamma
        out["primal_ineq"] = float(max(np.max(slack), 0.0))
        out["comp_slack"] = float(np.max(np.abs(sol.mu * slack))) if sol.mu.size else 0.0
        out["dual_feas"] = float(max(np.max(-sol.mu), 0.0)) if sol.mu.size else 0.0
    else:
        out["primal_ineq"] = 0.0
        out["comp_slack"] = 0.0
        out["dual_feas"] = 0.0
    return out


def shrink_threshold(problem: DeepcProblem, sol: DeepcSolution, iota: int,
                     lam: float | None = None) -> float:
    """Smallest penalty at which group `iota` is consistent with exact zero.

    Evaluates || c_iota + Ztilde_iota^T alpha ||_2 / sqrt(n_iota) on the
    reduced dual system in which the other groups are smoothed by their
    current norms; requires at least one other group to be nonzero.
    """
    k = problem.kernel
    if k.S < 2:
        raise ValueError("threshold needs at least two groups")
    if iota not in k.relaxed:
        raise ValueError(
            "group iota keeps its sum-to-one row, so it can never be zero; "
            "build the problem with relax_sum_to_one=(iota,)")
    lam = problem.cfg.lambda_cap if lam is None else float(lam)
    others = [i for i in range(k.S) if i != iota]
    for i in others:
        if np.linalg.norm(k.group(sol.g, i)) == 0.0:
            raise ValueError("threshold formula assumes the other groups are nonzero")
    cols_i = {i: np.arange(k.offsets[i], k.offsets[i + 1]) for i in range(k.S)}
    # c_i = gradient of the tracking term wrt group i, excluding its own block
    Hg = k.H @ sol.g
    Wbar = np.zeros((k.A_eq.shape[0], k.A_eq.shape[0]))
    rhs = problem.b_eq.copy()
    for i in others:
        ci = (Hg - k.H[:, cols_i[i]] @ k.group(sol.g, i) + problem.q)[cols_i[i]]
        lam_i = lam * k.group_weights[i]
        nrm = np.linalg.norm(k.group(sol.g, i))
        Wi = k.H[np.ix_(cols_i[i], cols_i[i])] + (lam_i / nrm) * np.eye(len(cols_i[i]))
        Zi = k.A_eq[:, cols_i[i]]
        try:
            WinvZt = np.linalg.solve(Wi, Zi.T)
            Winvc = np.linalg.solve(Wi, ci)
        except np.linalg.LinAlgError as exc:
            raise SingularWbar("per-group system is singular") from exc
        Wbar += Zi @ WinvZt
        rhs += Zi @ Winvc
    try:
        alpha = -np.linalg.solve(Wbar, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularWbar("reduced dual system is singular") from exc
    c_iota = (Hg - k.H[:, cols_i[iota]] @ k.group(sol.g, iota) + problem.q)[cols_i[iota]]
    num = np.linalg.norm(c_iota + k.A_eq[:, cols_i[iota]].T @ alpha)
    return float(num / k.group_weights[iota])


def _solve_cap_pinned(problem: DeepcProblem, lam: float, dead: set) -> DeepcSolution:
    """Solution of the group scheme with `dead` pinned to exact zero."""
    g, nu = _polish_cap(problem, lam, dead)
    k = problem.kernel
    sol = _finish(problem, "cap", (lam, 0.0), g, nu,
                  np.zeros(k.Gamma.shape[0]), 0, True, True, None)
    sol.kkt = kkt_residual_cap(problem, sol, lam)
    return sol


def critical_lambda(blocks: MosaicBlocks, z_ini, u_ref, y_ref, cfg: DeepcConfig,
                    iota: int, iters: int = 60) -> float:
    """Penalty at which group `iota` transitions between zero and nonzero.

    Solves thr(lam) = lam by bisection, where thr is the smallest penalty
    consistent with the group being zero given the other groups' solution at
    lam (computed with the group pinned to zero).  Above the returned value
    the zero-group condition holds; below, the group must be nonzero.
    """
    problem = build_problem(blocks, z_ini, u_ref, y_ref, cfg,
                            relax_sum_to_one=(iota,))

    def excess(lam):
        sol = _solve_cap_pinned(problem, lam, {iota})
        return shrink_threshold(problem, sol, iota, lam=lam) - lam

    # the zero-group condition need not hold for any penalty (the threshold
    # itself grows with lam through the duals); scan a log grid for a sign
    # change, then bisect
    grid = np.geomspace(1e-6, 1e9, 76)
    vals = [excess(l) for l in grid]
    bracket = None
    for a, b, va, vb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if va > 0 >= vb:
            bracket = (a, b)
            break
    if bracket is None:
        raise SingularWbar("no shrink transition on this instance")
    lo, hi = bracket
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --- explicit piecewise-affine law (entrywise scheme) ----------------------------

@dataclass(frozen=True)
class RegionData:
    """Affine law g* = F z_tilde + intercept valid where E z_tilde + offset <= 0."""

    F: np.ndarray
    intercept: np.ndarray
    E: np.ndarray
    offset: np.ndarray

    def selector(self, z_tilde) -> np.ndarray:
        return self.F @ np.asarray(z_tilde, dtype=float).ravel() + self.intercept

    def contains(self, z_tilde, tol: float = 1e-9) -> bool:
        v = self.E @ np.asarray(z_tilde, dtype=float).ravel() + self.offset
        return bool(np.all(v <= tol))


def explicit_elastic_coefficients(problem: DeepcProblem, active_set,
                                  sign_pattern) -> RegionData:
    """Affine coefficients of the entrywise-shrinkage optimizer on one region.

    For a fixed support/sign pattern and active inequality set the KKT system
    is linear, so the optimizer is affine in the extended initial condition
    z_tilde = [z_ini; 1 per kept sum row].  Region rows collect sign
    feasibility, zero-entry subgradient bounds, inactive-constraint slack, and
    dual nonnegativity.
    """
    k = problem.kernel
    cfg = problem.cfg
    lam1, lam2 = cfg.lambda1, cfg.lambda2
    n = k.n
    signs = np.asarray(sign_pattern, dtype=float).ravel()
    if signs.size != n:
        raise ValueError("sign pattern must cover every selector entry")
    Z = np.nonzero(signs != 0.0)[0]
    act = np.asarray(sorted(int(a) for a in active_set), dtype=int)
    m_eq = k.A_eq.shape[0]
    He = k.H + 2.0 * lam2 * np.eye(n)
    GaZ = k.Gamma[np.ix_(act, Z)] if act.size else np.zeros((0, len(Z)))
    M = np.block([
        [He[np.ix_(Z, Z)], k.A_eq[:, Z].T, GaZ.T],
        [k.A_eq[:, Z], np.zeros((m_eq, m_eq + act.size))],
        [GaZ, np.zeros((act.size, m_eq + act.size))],
    ])
    if np.linalg.matrix_rank(M) < M.shape[0]:
        raise RankDeficient("KKT system is singular for this pattern "
                            "(independence assumption violated)")
    Minv = np.linalg.inv(M)
    nz = len(Z)
    # rhs = [-q_Z - lam1 s_Z; b_eq; gamma_act]; b_eq = z_tilde (affine part),
    # the rest constant.
    const_rhs = np.concatenate([-problem.q[Z] - lam1 * signs[Z],
                                np.zeros(m_eq),
                                k.gamma[act] if act.size else np.zeros(0)])
    lin_rhs = np.zeros((M.shape[0], m_eq))
    lin_rhs[nz: nz + m_eq] = np.eye(m_eq)
    sol_lin = Minv @ lin_rhs
    sol_const = Minv @ const_rhs
    F = np.zeros((n, m_eq))
    intercept = np.zeros(n)
    F[Z] = sol_lin[:nz]
    intercept[Z] = sol_const[:nz]
    nu_lin, nu_const = sol_lin[nz: nz + m_eq], sol_const[nz: nz + m_eq]
    mu_lin, mu_const = sol_lin[nz + m_eq:], sol_const[nz + m_eq:]
    # gradient at the solution, affine in z_tilde
    grad_lin = He @ F + k.A_eq.T @ nu_lin
    grad_const = He @ intercept + problem.q + k.A_eq.T @ nu_const
    if act.size:
        grad_lin = grad_lin + k.Gamma[act].T @ mu_lin
        grad_const = grad_const + k.Gamma[act].T @ mu_const
    E_rows, off = [], []
    if len(Z):
        E_rows.append(-signs[Z, None] * F[Z])
        off.append(-signs[Z] * intercept[Z])
    zeros = np.setdiff1d(np.arange(n), Z)
    if zeros.size:
        E_rows += [grad_lin[zeros], -grad_lin[zeros]]
        off += [grad_const[zeros] - lam1, -grad_const[zeros] - lam1]
    inact = np.setdiff1d(np.arange(k.Gamma.shape[0]), act)
    if inact.size:
        E_rows.append(k.Gamma[inact] @ F)
        off.append(k.Gamma[inact] @ intercept - k.gamma[inact])
    if act.size:
        E_rows.append(-mu_lin)
        off.append(-mu_const)
    E = np.vstack(E_rows) if E_rows else np.zeros((0, m_eq))
    offset = np.concatenate(off) if off else np.zeros(0)
    return RegionData(F=F, intercept=intercept, E=E, offset=offset)
