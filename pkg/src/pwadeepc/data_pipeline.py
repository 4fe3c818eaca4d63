"""Excitation-data generation, mode estimation, and dataset partitioning.

The pipeline mirrors how the benchmark data are produced: an oracle model
predictive controller (exact dynamic programming on a state grid, true model)
tracks a decaying triangular wave, the collected samples are clustered in
regressor space to estimate modes, and the dataset is split per mode for the
data-matrix constructions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .behavior_matrices import hankel
from .errors import EmptyCluster, GridTooCoarse, InsufficientData, TooShort
from .pwa_system import PwaStateSpace, PwarxModel, pwarx_active_mode, step_ss


@dataclass(frozen=True)
class Dataset:
    """Collected input/output data with optional true and estimated mode labels.

    Labels use -1 where undefined (e.g. the first rho samples carry no
    regressor, so estimated labels start at index rho).
    """

    u_d: np.ndarray
    y_d: np.ndarray
    s_d: np.ndarray | None = None
    s_hat: np.ndarray | None = None

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u_d, dtype=float))
        y = np.atleast_2d(np.asarray(self.y_d, dtype=float))
        if u.shape[0] == 1 and u.shape[1] > 1:
            u = u.T
        if y.shape[0] == 1 and y.shape[1] > 1:
            y = y.T
        if len(u) != len(y):
            raise ValueError("u_d and y_d must have equal lengths")
        object.__setattr__(self, "u_d", u)
        object.__setattr__(self, "y_d", y)
        for name in ("s_d", "s_hat"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=int)
                if len(v) != len(u):
                    raise ValueError(f"{name} must have one label per sample")
                object.__setattr__(self, name, v)

    @property
    def N(self) -> int:
        return len(self.u_d)


@dataclass(frozen=True)
class LocalDataset:
    """Samples of one mode, concatenated in time order with source indices kept."""

    mode: int
    u: np.ndarray
    y: np.ndarray
    source_indices: np.ndarray

    @property
    def N_i(self) -> int:
        return len(self.u)


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    inertia: float
    seed: int
    restarts: int
    rho: int


def triangular_reference(amplitude: float, period: int, decay_per_period: float,
                         N: int) -> np.ndarray:
    """Triangular wave starting at 0 rising, peaks decaying per period.

    Period k spans [-a_k, a_k] with a_k = amplitude * (1 - decay)^k; within a
    period the wave rises to +a_k at period/4, falls to -a_k at 3*period/4,
    and returns to 0.
    """
    if N <= 0:
        raise ValueError("N must be positive")
    if period % 2:
        raise ValueError("period must be even")
    t = np.arange(N)
    k = t // period
    phase = (t % period) / period
    unit = np.where(phase < 0.25, 4 * phase,
                    np.where(phase < 0.75, 2 - 4 * phase, 4 * phase - 4))
    return amplitude * (1.0 - decay_per_period) ** k * unit


def _mode_grid(sys: PwaStateSpace, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Active mode for every (x, u) pair of broadcastable scalar arrays."""
    shape = np.broadcast_shapes(np.shape(x), np.shape(u))
    mode = np.full(shape, -1, dtype=np.int64)
    for i, p in enumerate(sys.partition):
        inside = np.ones(shape, dtype=bool)
        for r, row in enumerate(p.coefficients):
            v = row[0] * x + row[1] * u + row[2]
            if p.strict is not None and p.strict[r]:
                inside &= v < 0.0
            else:
                inside &= v <= 0.0
        mode = np.where((mode < 0) & inside, i, mode)
    if np.any(mode < 0):
        raise GridTooCoarse("partition does not cover the DP grid")
    return mode


@numba.njit(parallel=True, cache=True)
def _dp_sweep(V, idx, w, Yn, Y2, r, n_s, n_q):
    """One backward value-iteration sweep; rows are independent, so the
    parallel loop is deterministic."""
    out = np.empty(n_s)
    for i in numba.prange(n_s):
        best = np.inf
        base = i * n_q
        for j in range(n_q):
            k = base + j
            ii = idx[k]
            vn = V[ii] * (1.0 - w[k]) + V[ii + 1] * w[k]
            c = Y2[k] - 2.0 * r * Yn[k] + r * r + vn
            if c < best:
                best = c
        out[i] = best
    return out


class _DpOracle:
    """Exact finite-horizon tracking control for scalar-state PWA systems.

    Value iteration on a uniform state grid with a finite input grid; the
    next-state array and its interpolation indices are precomputed once, so
    each backward sweep is a pair of gathers plus a min-reduction.
    """

    def __init__(self, sys: PwaStateSpace, state_grid, input_grid):
        if sys.n_x != 1 or sys.n_u != 1 or sys.n_y != 1:
            raise ValueError("DP oracle supports scalar systems only")
        for m in sys.modes:
            if m.D[0, 0] != 0.0:
                raise ValueError("DP oracle requires D = 0")
        self.sys = sys
        lo, hi, n = state_grid
        self.s_grid = np.linspace(lo, hi, int(n))
        lo_u, hi_u, n_q = input_grid
        self.u_grid = np.linspace(lo_u, hi_u, int(n_q))
        x = self.s_grid[:, None]
        u = self.u_grid[None, :]
        mode = _mode_grid(sys, x, u)
        A = np.array([m.A[0, 0] for m in sys.modes])
        B = np.array([m.B[0, 0] for m in sys.modes])
        f = np.array([m.f[0] for m in sys.modes])
        self.X_next = A[mode] * x + B[mode] * u + f[mode]
        self.Y_next = self._output(self.X_next)
        step = self.s_grid[1] - self.s_grid[0]
        pos = np.clip((self.X_next - lo) / step, 0.0, len(self.s_grid) - 1.0)
        idx = np.minimum(pos.astype(np.int64), len(self.s_grid) - 2)
        self._idx_flat = idx.ravel()
        self._w_flat = (pos - idx).ravel()
        self._Yn_flat = self.Y_next.ravel()
        self._Y2_flat = (self.Y_next ** 2).ravel()

    def _output(self, x: np.ndarray) -> np.ndarray:
        mode = _mode_grid(self.sys, x, 0.0)
        C = np.array([m.C[0, 0] for m in self.sys.modes])
        g = np.array([m.g[0] for m in self.sys.modes])
        return C[mode] * x + g[mode]

    def value_sweeps(self, refs: np.ndarray) -> np.ndarray:
        """V_1 on the state grid: cost-to-go over steps 2..H before the first move."""
        n_s, n_q = len(self.s_grid), len(self.u_grid)
        V = np.zeros(n_s)
        for r in refs[:0:-1]:          # refs[H-1] down to refs[1]
            V = _dp_sweep(V, self._idx_flat, self._w_flat,
                          self._Yn_flat, self._Y2_flat, float(r), n_s, n_q)
        return V

    def first_input(self, x: float, refs: np.ndarray):
        """(u, cost) minimizing the horizon tracking cost from state x."""
        V1 = self.value_sweeps(refs)
        sigma = _mode_grid(self.sys, np.array([[x]]), self.u_grid[None, :])[0]
        A = np.array([m.A[0, 0] for m in self.sys.modes])
        B = np.array([m.B[0, 0] for m in self.sys.modes])
        f = np.array([m.f[0] for m in self.sys.modes])
        x1 = A[sigma] * x + B[sigma] * self.u_grid + f[sigma]
        y1 = self._output(x1)
        v1 = np.interp(x1, self.s_grid, V1)
        cost = (y1 - refs[0]) ** 2 + v1
        j = int(np.argmin(cost))
        return float(self.u_grid[j]), float(cost[j])


def oracle_mpc_collect(sys: PwaStateSpace, reference, N: int = 1000,
                       horizon: int = 20,
                       state_grid=(-15.0, 15.0, 3001),
                       input_grid=(-12.0, 12.0, 961),
                       x0: float = 0.0,
                       grid_check_every: int = 200,
                       grid_check_tol: float = 0.01) -> Dataset:
    """Collect N closed-loop samples under the DP tracking controller.

    At every step the controller minimizes the squared output tracking error
    over the horizon using the true model, applies the first input, and the
    realized (u, y, mode) triple is recorded.  Periodically the first-step
    cost is recomputed on 2x-refined grids; a relative change above
    grid_check_tol raises GridTooCoarse.
    """
    reference = np.asarray(reference, dtype=float).ravel()
    if len(reference) < N + horizon:
        reference = np.concatenate([reference, np.full(N + horizon - len(reference),
                                                       reference[-1])])
    oracle = _DpOracle(sys, state_grid, input_grid)
    fine = None
    x = float(x0)
    us, ys, ss = [], [], []
    for t in range(N):
        refs = reference[t + 1: t + 1 + horizon]
        u, cost = oracle.first_input(x, refs)
        if grid_check_every and t % grid_check_every == 0:
            if fine is None:
                fine = _DpOracle(
                    sys,
                    (state_grid[0], state_grid[1], 2 * state_grid[2] - 1),
                    (input_grid[0], input_grid[1], 2 * input_grid[2] - 1))
            _, cost_fine = fine.first_input(x, refs)
            # floor the scale at 1: near-zero costs are interpolation noise,
            # not evidence of a coarse grid
            if abs(cost - cost_fine) > grid_check_tol * max(abs(cost_fine), 1.0):
                raise GridTooCoarse(
                    f"t={t}: DP cost {cost:.6g} vs refined {cost_fine:.6g}")
        x_next, y, sigma = step_ss(sys, x, u)
        us.append(u)
        ys.append(float(y[0]))
        ss.append(sigma)
        x = float(x_next[0])
    return Dataset(u_d=np.array(us)[:, None], y_d=np.array(ys)[:, None],
                   s_d=np.array(ss))


# --- mode estimation -----------------------------------------------------------

def regressor_matrix(ds: Dataset, rho: int) -> np.ndarray:
    """Rows [y_{t-rho..t-1}; u_{t-rho..t}] for t in [rho, N-1]."""
    N = ds.N
    rows = []
    for t in range(rho, N):
        rows.append(np.concatenate([ds.y_d[t - rho: t].ravel(),
                                    ds.u_d[t - rho: t + 1].ravel()]))
    return np.array(rows)


def _kmeans_once(X: np.ndarray, S: int, rng: np.random.Generator,
                 tol: float, max_iter: int):
    # k-means++ seeding
    n = len(X)
    centroids = np.empty((S, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for k in range(1, S):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[k] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((X - centroids[k]) ** 2, axis=1))
    labels = None
    for _ in range(max_iter):
        dist = cdist(X, centroids, "sqeuclidean")
        labels = np.argmin(dist, axis=1)
        new = centroids.copy()
        for k in range(S):
            members = X[labels == k]
            if len(members) == 0:
                return None  # empty cluster: caller retries
            new[k] = members.mean(axis=0)
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift <= tol:
            break
    inertia = float(np.sum((X - centroids[labels]) ** 2))
    return centroids, labels, inertia


def kmeans_modes(ds: Dataset, S: int, rho: int, seed: int, restarts: int = 50,
                 tol: float = 1e-9, max_iter: int = 500):
    """Cluster regressors with k-means (k-means++ inits, best of `restarts`).

    Returns (ClusterModel, s_hat) with s_hat[t] = -1 for t < rho.
    Deterministic given (seed, restarts).
    """
    if ds.N <= rho:
        raise ValueError("dataset shorter than the lag")
    if S < 2:
        raise ValueError("S must be >= 2")
    X = regressor_matrix(ds, rho)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        result = _kmeans_once(X, S, rng, tol, max_iter)
        if result is None:
            continue
        if best is None or result[2] < best[2]:
            best = result
    if best is None:
        raise EmptyCluster(f"all {restarts} restarts produced an empty cluster")
    centroids, labels, inertia = best
    s_hat = np.full(ds.N, -1, dtype=int)
    s_hat[rho:] = labels
    model = ClusterModel(centroids=centroids, inertia=inertia, seed=seed,
                         restarts=restarts, rho=rho)
    return model, s_hat


def pwarx_labels(ds: Dataset, model: PwarxModel) -> np.ndarray:
    """Ground-truth regressor-partition labels; -1 where no regressor exists."""
    rho = model.rho
    labels = np.full(ds.N, -1, dtype=int)
    for t in range(rho, ds.N):
        labels[t] = pwarx_active_mode(model, ds.y_d[t - rho: t], ds.u_d[t - rho: t + 1])
    return labels


def match_clusters_to_modes(s_hat, s_true) -> np.ndarray:
    """Permutation perm with perm[cluster] = mode maximizing label agreement."""
    s_hat = np.asarray(s_hat, dtype=int)
    s_true = np.asarray(s_true, dtype=int)
    valid = (s_hat >= 0) & (s_true >= 0)
    S = max(s_hat[valid].max(), s_true[valid].max()) + 1
    confusion = np.zeros((S, S))
    for c, m in zip(s_hat[valid], s_true[valid]):
        confusion[c, m] += 1
    rows, cols = linear_sum_assignment(-confusion)
    perm = np.empty(S, dtype=int)
    perm[rows] = cols
    return perm


def apply_label_permutation(s_hat, perm) -> np.ndarray:
    s_hat = np.asarray(s_hat, dtype=int)
    out = s_hat.copy()
    mask = s_hat >= 0
    out[mask] = np.asarray(perm, dtype=int)[s_hat[mask]]
    return out


def misclassification_rate(s_hat, s_true) -> float:
    """Fraction of mismatched labels over indices where both are defined."""
    s_hat = np.asarray(s_hat, dtype=int)
    s_true = np.asarray(s_true, dtype=int)
    valid = (s_hat >= 0) & (s_true >= 0)
    if not np.any(valid):
        raise ValueError("no overlapping labeled indices")
    return float(np.mean(s_hat[valid] != s_true[valid]))


def partition_dataset(ds: Dataset, labels, min_samples: int | None = None) -> list:
    """Split the dataset per mode, keeping time order and source indices."""
    labels = np.asarray(labels, dtype=int)
    S = labels[labels >= 0].max() + 1
    out = []
    for i in range(S):
        idx = np.nonzero(labels == i)[0]
        if min_samples is not None and len(idx) < min_samples:
            raise InsufficientData(
                f"mode {i}: {len(idx)} samples < required {min_samples}")
        out.append(LocalDataset(mode=i, u=ds.u_d[idx], y=ds.y_d[idx],
                                source_indices=idx))
    return out


def persistence_check(u_local, order: int):
    """(full_row_rank, rank) of the depth-`order` input data matrix."""
    H = hankel(u_local, order)
    if H.shape[1] < H.shape[0]:
        raise TooShort(
            f"{H.shape[1]} columns < {H.shape[0]} rows at order {order}")
    rank = np.linalg.matrix_rank(H)
    return rank == H.shape[0], int(rank)


def aic_lag_select(ds: Dataset, max_lag: int, sse_floor: float = 1e-12) -> int:
    """Lag minimizing AIC = N ln(SSE/N) + 2p over single ARX fits.

    A heuristic: it fits one ARX model across all modes and ignores the
    switching.  Ties (e.g. SSE at the numerical floor) break to the smallest
    lag.
    """
    if max_lag >= ds.N / 4:
        raise ValueError("max_lag must be < N/4")
    best_lag, best_aic = None, np.inf
    for lag in range(1, max_lag + 1):
        rows, targets = [], []
        for t in range(max_lag, ds.N):
            rows.append(np.concatenate([ds.y_d[t - lag: t].ravel(),
                                        ds.u_d[t - lag: t + 1].ravel(),
                                        [1.0]]))
            targets.append(ds.y_d[t])
        A = np.array(rows)
        b = np.array(targets)
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        n_eff = len(A)
        sse = max(float(np.sum((A @ coef - b) ** 2)), sse_floor)
        p = coef.size
        aic = n_eff * np.log(sse / n_eff) + 2 * p
        if aic < best_aic - 1e-12:
            best_aic, best_lag = aic, lag
    return best_lag


# --- CSV round trip ------------------------------------------------------------

def dataset_to_csv(ds: Dataset) -> str:
    """Header t,u,y,s_true[,s_hat]; floats at full double precision."""
    cols = ["t", "u", "y"]
    if ds.s_d is not None:
        cols.append("s_true")
    if ds.s_hat is not None:
        cols.append("s_hat")
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for t in range(ds.N):
        row = [str(t)]
        row += [f"{v:.17g}" for v in ds.u_d[t]]
        row += [f"{v:.17g}" for v in ds.y_d[t]]
        if ds.s_d is not None:
            row.append(str(int(ds.s_d[t])))
        if ds.s_hat is not None:
            row.append(str(int(ds.s_hat[t])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    lines = [ln for ln in text.strip().splitlines()
             if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    u = data[:, 1][:, None]
    y = data[:, 2][:, None]
    s_d = data[:, header.index("s_true")].astype(int) if "s_true" in header else None
    s_hat = data[:, header.index("s_hat")].astype(int) if "s_hat" in header else None
    return Dataset(u_d=u, y_d=y, s_d=s_d, s_hat=s_hat)
