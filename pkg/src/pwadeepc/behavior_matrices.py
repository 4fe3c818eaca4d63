"""Mode-structured data matrices and numerical verification of the trajectory lemma.

Per-mode data are generally non-contiguous in time.  Two window policies are
supported when filling Hankel columns:

* ``"segment"`` — columns are taken only inside maximal same-mode runs, so
  every column is a genuine single-mode trajectory window.  Used for the
  trajectory-lemma verification, where windows must be real mode trajectories.
* ``"concat"`` — columns slide over the per-mode samples concatenated in time
  order.  Used for the predictive-control blocks, whose depth typically
  exceeds the length of individual same-mode runs.

All outputs are plain immutable arrays; every operation is a pure function.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, TooShort
from .pwa_system import (
    PwaStateSpace,
    PwarxModel,
    behavior_basis,
    pwarx_active_mode,
    simulate_ss,
)


def hankel(seq, depth: int) -> np.ndarray:
    """Block Hankel matrix of a (possibly vector-valued) sequence.

    seq has shape (N,) or (N, n); the result has shape (n*depth, N-depth+1)
    with column c stacking samples c .. c+depth-1.
    """
    seq = np.asarray(seq, dtype=float)
    if seq.ndim == 1:
        seq = seq[:, None]
    N, n = seq.shape
    if N < depth:
        raise TooShort(f"sequence of length {N} cannot fill depth {depth}")
    cols = N - depth + 1
    out = np.empty((n * depth, cols))
    for r in range(depth):
        out[r * n: (r + 1) * n, :] = seq[r: r + cols].T
    return out


def segment_window_starts(source_indices, depth: int) -> np.ndarray:
    """Start offsets (into the concatenated local arrays) of windows that stay
    inside one maximal run of consecutive source indices."""
    idx = np.asarray(source_indices, dtype=int)
    starts = []
    run_start = 0
    for k in range(1, len(idx) + 1):
        if k == len(idx) or idx[k] != idx[k - 1] + 1:
            run_len = k - run_start
            starts.extend(range(run_start, run_start + run_len - depth + 1))
            run_start = k
    return np.asarray(starts, dtype=int)


def _windowed(seq: np.ndarray, depth: int, starts: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    if seq.ndim == 1:
        seq = seq[:, None]
    n = seq.shape[1]
    out = np.empty((n * depth, len(starts)))
    for c, s in enumerate(starts):
        out[:, c] = seq[s: s + depth].ravel()
    return out


@dataclass(frozen=True)
class LocalBlock:
    """Past/future slices of one mode's depth-(L+rho) data matrix."""

    mode: int
    U_P: np.ndarray
    Y_P: np.ndarray
    U_F: np.ndarray
    Y_F: np.ndarray

    @property
    def n_cols(self) -> int:
        return self.U_P.shape[1]

    @property
    def Z_P(self) -> np.ndarray:
        return np.vstack([self.U_P, self.Y_P])


@dataclass(frozen=True)
class MosaicBlocks:
    """All per-mode blocks plus the shared dimensions."""

    blocks: tuple
    L: int
    rho: int
    n_u: int
    n_y: int

    @property
    def S(self) -> int:
        return len(self.blocks)

    @property
    def n_cols(self) -> tuple:
        return tuple(b.n_cols for b in self.blocks)


def local_blocks(local, L: int, rho: int, windows: str = "segment") -> LocalBlock:
    """Slice one mode's data into past/future blocks of a depth-(L+rho) matrix.

    `local` needs attributes mode, u (N_i, n_u), y (N_i, n_y) and, for the
    segment policy, source_indices.
    """
    depth = L + rho
    u = np.asarray(local.u, dtype=float)
    y = np.asarray(local.y, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n_u, n_y = u.shape[1], y.shape[1]
    if windows == "segment":
        starts = segment_window_starts(local.source_indices, depth)
        if len(starts) == 0:
            raise InsufficientData(
                f"mode {local.mode}: no same-mode run of length >= {depth}")
        HU = _windowed(u, depth, starts)
        HY = _windowed(y, depth, starts)
    elif windows == "concat":
        if len(u) < depth:
            raise InsufficientData(
                f"mode {local.mode}: {len(u)} samples < depth {depth}")
        HU = hankel(u, depth)
        HY = hankel(y, depth)
    else:
        raise ValueError(f"unknown window policy {windows!r}")
    return LocalBlock(
        mode=int(local.mode),
        U_P=HU[: n_u * rho], U_F=HU[n_u * rho:],
        Y_P=HY[: n_y * rho], Y_F=HY[n_y * rho:],
    )


def build_mosaic_blocks(locals_, L: int, rho: int, windows: str = "concat") -> MosaicBlocks:
    blocks = tuple(local_blocks(d, L, rho, windows=windows) for d in locals_)
    n_u = blocks[0].U_P.shape[0] // rho if rho else blocks[0].U_F.shape[0] // L
    n_y = blocks[0].Y_P.shape[0] // rho if rho else blocks[0].Y_F.shape[0] // L
    return MosaicBlocks(blocks=blocks, L=L, rho=rho, n_u=n_u, n_y=n_y)


def mosaic_matrix(mb: MosaicBlocks) -> np.ndarray:
    """Dense assembly with row blocks [Z_P; U_F; Y_F; I].

    I is block diagonal with one all-ones row per mode, so applying the
    matrix to a stacked selector evaluates all constraints at once.
    """
    S = mb.S
    cols = mb.n_cols
    top = np.hstack([np.vstack([b.Z_P, b.U_F, b.Y_F]) for b in mb.blocks])
    eye = np.zeros((S, sum(cols)))
    ofs = 0
    for i, c in enumerate(cols):
        eye[i, ofs: ofs + c] = 1.0
        ofs += c
    return np.vstack([top, eye])


def mosaic_metadata(mb: MosaicBlocks) -> dict:
    """Block boundaries and dims, e.g. for rendering the matrix as a heatmap."""
    return {
        "S": mb.S, "L": mb.L, "rho": mb.rho, "n_u": mb.n_u, "n_y": mb.n_y,
        "columns_per_mode": list(mb.n_cols),
        "row_blocks": {
            "Z_P": (mb.n_u + mb.n_y) * mb.rho,
            "U_F": mb.n_u * mb.L,
            "Y_F": mb.n_y * mb.L,
            "I": mb.S,
        },
    }


# --- depth-L blocks and the trajectory lemma ----------------------------------

def lemma_blocks(locals_, L: int, windows: str = "segment") -> list:
    """Per-mode stacked [H_L(u); H_L(y)] matrices (inputs on top)."""
    out = []
    for d in locals_:
        u = np.asarray(d.u, dtype=float)
        y = np.asarray(d.y, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if windows == "segment":
            starts = segment_window_starts(d.source_indices, L)
            if len(starts) == 0:
                raise InsufficientData(f"mode {d.mode}: no run of length >= {L}")
            HU, HY = _windowed(u, L, starts), _windowed(y, L, starts)
        else:
            HU, HY = hankel(u, L), hankel(y, L)
        out.append(np.vstack([HU, HY]))
    return out


def selection_masks(mode_seq, n_u: int, n_y: int) -> list:
    """Per-mode 0/1 row masks over the stacked [u; y] signal of one horizon.

    Row layout matches lemma_blocks: all input rows first, then all output
    rows.  The masks sum to the all-ones vector (each step belongs to exactly
    one mode).
    """
    mode_seq = np.asarray(mode_seq, dtype=int)
    S = int(mode_seq.max()) + 1
    masks = []
    for i in range(S):
        hit = (mode_seq == i).astype(float)
        masks.append(np.concatenate([np.repeat(hit, n_u), np.repeat(hit, n_y)]))
    return masks


def restricted_residual(blocks: list, G: list, mode_seq, u_target, y_target):
    """Residual of the mode-masked data-driven representation.

    Returns (reconstruction residual 2-norm, per-mode sum-to-one violations).
    """
    u_target = np.asarray(u_target, dtype=float).ravel()
    y_target = np.asarray(y_target, dtype=float).ravel()
    L = len(np.asarray(mode_seq))
    n_u = u_target.size // L
    n_y = y_target.size // L
    masks = selection_masks(mode_seq, n_u, n_y)
    lhs = np.zeros((n_u + n_y) * L)
    for i, (H, g) in enumerate(zip(blocks, G)):
        if H.shape[1] != np.asarray(g).size:
            raise ValueError(f"mode {i}: selector length {np.asarray(g).size} "
                             f"!= column count {H.shape[1]}")
        if i < len(masks):
            lhs += masks[i] * (H @ np.asarray(g, dtype=float).ravel())
    target = np.concatenate([u_target, y_target])
    sum_violation = [abs(float(np.sum(g)) - 1.0) for g in G]
    return float(np.linalg.norm(lhs - target)), sum_violation


def solve_restricted(blocks: list, mode_seq, u_target, y_target):
    """Minimum-norm least-squares selector for the masked representation.

    Solves the masked reconstruction rows together with the per-mode
    sum-to-one rows; returns (G_list, residual).
    """
    u_target = np.asarray(u_target, dtype=float).ravel()
    y_target = np.asarray(y_target, dtype=float).ravel()
    L = len(np.asarray(mode_seq))
    n_u = u_target.size // L
    n_y = y_target.size // L
    S = len(blocks)
    masks = selection_masks(mode_seq, n_u, n_y)
    while len(masks) < S:
        masks.append(np.zeros((n_u + n_y) * L))
    cols = [H.shape[1] for H in blocks]
    A = np.hstack([masks[i][:, None] * blocks[i] for i in range(S)])
    ones = np.zeros((S, sum(cols)))
    ofs = 0
    for i, c in enumerate(cols):
        ones[i, ofs: ofs + c] = 1.0
        ofs += c
    A = np.vstack([A, ones])
    b = np.concatenate([u_target, y_target, np.ones(S)])
    g, *_ = np.linalg.lstsq(A, b, rcond=None)
    G, ofs = [], 0
    for c in cols:
        G.append(g[ofs: ofs + c])
        ofs += c
    return G, float(np.linalg.norm(A @ g - b))


def verify_fundamental_lemma(sys: PwaStateSpace, pwarx: PwarxModel, blocks: list,
                             L: int, trials: int, seed: int,
                             residual_tol: float = 1e-8, burn: int = 30) -> dict:
    """Monte-Carlo check that fresh trajectories are combinations of stored windows.

    Each trial simulates a fresh length-L window (after a burn-in from a
    random state), labels its steps with the regressor-partition modes, solves
    the masked linear system for a selector, and re-evaluates the modes on the
    reconstructed window (for t >= lag, where the window itself carries the
    regressor).  Failures are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    rho = pwarx.rho
    max_residual = 0.0
    successes = 0
    mode_check_failures = 0
    for _ in range(trials):
        u = rng.uniform(-3.0, 3.0, size=burn + L)
        traj = simulate_ss(sys, rng.uniform(-2.0, 2.0), u)
        t0 = burn
        u_win = traj.u[t0: t0 + L].ravel()
        y_win = traj.y[t0: t0 + L].ravel()
        mode_seq = [
            pwarx_active_mode(pwarx, traj.y[t - rho: t], traj.u[t - rho: t + 1])
            for t in range(t0, t0 + L)
        ]
        G, residual = solve_restricted(blocks, mode_seq, u_win, y_win)
        max_residual = max(max_residual, residual)
        if residual >= residual_tol:
            continue
        # reconstruct and re-evaluate modes where the window carries a regressor
        masks = selection_masks(mode_seq, sys.n_u, sys.n_y)
        rec = np.zeros((sys.n_u + sys.n_y) * L)
        for i, g in enumerate(G):
            if i < len(masks):
                rec += masks[i] * (blocks[i] @ g)
        y_rec = rec[sys.n_u * L:].reshape(L, sys.n_y)
        u_real = traj.u[t0: t0 + L]
        ok = True
        for t in range(rho, L):
            s = pwarx_active_mode(pwarx, y_rec[t - rho: t], u_real[t - rho: t + 1])
            if s != mode_seq[t]:
                ok = False
                break
        if ok:
            successes += 1
        else:
            mode_check_failures += 1
    return {
        "trials": trials,
        "success_rate": successes / trials,
        "max_residual": max_residual,
        "mode_check_failures": mode_check_failures,
    }


# --- subspace predictor and model mismatch ------------------------------------

def subspace_predictor(mb: MosaicBlocks) -> np.ndarray:
    """Least-squares multi-step predictor Phi = Y_F [Z_P; U_F; I]^+.

    Fit on all stored columns across modes; maps [z_ini; u_f; 1_S] to y_f.
    Warns when the regressor stack is row-rank deficient (pseudo-inverse
    still applies).
    """
    Y_F = np.hstack([b.Y_F for b in mb.blocks])
    M = mosaic_matrix(mb)
    n_yf = mb.n_y * mb.L
    Z_rows = (mb.n_u + mb.n_y) * mb.rho
    UF_rows = mb.n_u * mb.L
    regress = np.vstack([M[:Z_rows], M[Z_rows: Z_rows + UF_rows], M[-mb.S:]])
    rank = np.linalg.matrix_rank(regress)
    if rank < regress.shape[0]:
        warnings.warn(
            f"predictor regressor stack rank {rank} < rows {regress.shape[0]}; "
            "using pseudo-inverse", RuntimeWarning)
    Phi = Y_F @ np.linalg.pinv(regress)
    assert Phi.shape == (n_yf, regress.shape[0])
    return Phi


def _affine_split(sys: PwaStateSpace, mode_seq_full, rho: int):
    """Exact affine map (z_ini, u_f, 1) -> y_f for a fixed mode sequence.

    mode_seq_full covers the rho past steps followed by the L future steps.
    The initial state is eliminated through the past window (requires the
    past-window observability stack to have full column rank).
    """
    mode_seq_full = [int(s) for s in mode_seq_full]
    n_x, n_u, n_y = sys.n_x, sys.n_u, sys.n_y
    total = len(mode_seq_full)
    L = total - rho
    full = behavior_basis(sys, mode_seq_full)
    Y = full[: n_y * total]
    O = Y[:, :n_x]
    T = Y[:, n_x: n_x + n_u * total]
    c = Y[:, -1]
    O_p, O_f = O[: n_y * rho], O[n_y * rho:]
    T_pp = T[: n_y * rho, : n_u * rho]
    T_fp = T[n_y * rho:, : n_u * rho]
    T_ff = T[n_y * rho:, n_u * rho:]
    c_p, c_f = c[: n_y * rho], c[n_y * rho:]
    Op_pinv = np.linalg.pinv(O_p)
    if np.linalg.matrix_rank(O_p) < n_x:
        warnings.warn("past window does not determine the state", RuntimeWarning)
    K = O_f @ Op_pinv
    V_u = T_fp - K @ T_pp
    V_y = K
    const = c_f - K @ c_p
    assert T[: n_y * rho, n_u * rho:].max(initial=0.0) == 0.0  # causality
    return np.hstack([V_u, V_y]), T_ff, const, L


def delta_m(sys: PwaStateSpace, mb: MosaicBlocks, Phi: np.ndarray,
            mode_seq_full) -> np.ndarray:
    """Mismatch between the exact multi-step map and the data-driven predictor.

    Both maps are compared on the compressed domain [z_ini; u_f; 1]: Phi's S
    ones-columns are summed into a single constant column so the norms used in
    the misclassification bound refer to the natural input vector.
    """
    V, T, const, L = _affine_split(sys, mode_seq_full, mb.rho)
    exact = np.hstack([V, T, const[:, None]])
    ones_cols = Phi[:, -mb.S:].sum(axis=1, keepdims=True)
    Phi_c = np.hstack([Phi[:, : -mb.S], ones_cols])
    return exact - Phi_c
