"""Piecewise affine systems: state-space and ARX forms, simulation, trajectory bases.

A PWA state-space system switches among affine local models according to a
polyhedral partition of the combined state-input space.  The equivalent PWARX
(piecewise auto-regressive with exogenous input) form drives the switching
from a window of past outputs and inputs instead of the hidden state.

All types are immutable after construction; every operation is a pure
function, safe to call concurrently with shared read access.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NoRegion


def _freeze(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def matrix_rank(mat: np.ndarray, rel_tol: float = 1e-9) -> int:
    """Rank by singular values with a relative threshold rel_tol * sigma_max."""
    sv = np.linalg.svd(np.asarray(mat, dtype=float), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


@dataclass(frozen=True)
class Polyhedron:
    """Region {z : P [z; 1] <= 0}, with optional per-row strict inequalities.

    `coefficients` has one more column than dim(z); the last column is the
    offset multiplying the homogeneous 1.  Rows flagged in `strict` require
    P_row [z; 1] < 0 instead of <= 0, which lets adjacent regions meet
    without overlapping on the shared facet.
    """

    coefficients: np.ndarray
    strict: np.ndarray | None = None

    def __post_init__(self):
        coeffs = _freeze(np.atleast_2d(self.coefficients))
        if coeffs.shape[0] < 1 or coeffs.shape[1] < 2:
            raise ValueError("polyhedron needs >= 1 row and >= 2 columns")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("polyhedron coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)
        if self.strict is not None:
            s = np.array(self.strict, dtype=bool)
            if s.shape != (coeffs.shape[0],):
                raise ValueError("strict flags must have one entry per row")
            s.flags.writeable = False
            object.__setattr__(self, "strict", s)

    @property
    def dim(self) -> int:
        return self.coefficients.shape[1] - 1

    def contains(self, z) -> bool:
        z = np.asarray(z, dtype=float).ravel()
        if z.size != self.dim:
            raise ValueError(f"expected point of dim {self.dim}, got {z.size}")
        v = self.coefficients[:, :-1] @ z + self.coefficients[:, -1]
        if self.strict is None:
            return bool(np.all(v <= 0.0))
        return bool(np.all(v[~self.strict] <= 0.0) and np.all(v[self.strict] < 0.0))


@dataclass(frozen=True)
class AffineMode:
    """One local affine model x+ = A x + B u + f, y = C x + D u + g."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D"):
            object.__setattr__(self, name, _freeze(np.atleast_2d(getattr(self, name))))
        for name in ("f", "g"):
            object.__setattr__(self, name, _freeze(np.atleast_1d(getattr(self, name))))
        n_x = self.A.shape[0]
        n_u = self.B.shape[1]
        n_y = self.C.shape[0]
        if self.A.shape != (n_x, n_x) or self.B.shape != (n_x, n_u):
            raise ValueError("inconsistent state-update dimensions")
        if self.C.shape != (n_y, n_x) or self.D.shape != (n_y, n_u):
            raise ValueError("inconsistent output dimensions")
        if self.f.shape != (n_x,) or self.g.shape != (n_y,):
            raise ValueError("inconsistent affine-offset dimensions")


@dataclass(frozen=True)
class PwaStateSpace:
    """PWA system: one AffineMode per region of a complete (x, u) partition."""

    modes: tuple
    partition: tuple

    def __post_init__(self):
        modes = tuple(self.modes)
        partition = tuple(self.partition)
        if len(modes) != len(partition):
            raise ValueError("one polyhedron per mode required")
        if not modes:
            raise ValueError("at least one mode required")
        m0 = modes[0]
        for m in modes:
            if (m.A.shape, m.B.shape, m.C.shape, m.D.shape) != (
                m0.A.shape, m0.B.shape, m0.C.shape, m0.D.shape,
            ):
                raise ValueError("all modes must share dimensions")
        d = m0.A.shape[0] + m0.B.shape[1]
        for p in partition:
            if p.dim != d:
                raise ValueError("partition must live in (x, u) space")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "partition", partition)

    @property
    def n_x(self) -> int:
        return self.modes[0].A.shape[0]

    @property
    def n_u(self) -> int:
        return self.modes[0].B.shape[1]

    @property
    def n_y(self) -> int:
        return self.modes[0].C.shape[0]

    @property
    def n_modes(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class Trajectory:
    """Input/output/mode record of a simulation; states kept when available."""

    u: np.ndarray
    y: np.ndarray
    s: np.ndarray
    x: np.ndarray | None = None

    def __post_init__(self):
        u = _freeze(np.atleast_2d(self.u))
        y = _freeze(np.atleast_2d(self.y))
        s = np.array(self.s, dtype=int)
        s.flags.writeable = False
        if not (len(u) == len(y) == len(s)):
            raise ValueError("u, y, s must have equal lengths")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s", s)
        if self.x is not None:
            object.__setattr__(self, "x", _freeze(np.atleast_2d(self.x)))

    def __len__(self) -> int:
        return len(self.u)


def region_memberships(sys: PwaStateSpace, x, u) -> list:
    """Indices of every region containing (x, u); diagnostic for shared facets."""
    z = np.concatenate([np.atleast_1d(x).astype(float), np.atleast_1d(u).astype(float)])
    return [i for i, p in enumerate(sys.partition) if p.contains(z)]


def active_mode_ss(sys: PwaStateSpace, x, u) -> int:
    """Active mode at (x, u): smallest region index containing the point."""
    hits = region_memberships(sys, x, u)
    if not hits:
        raise NoRegion(f"no region contains x={x}, u={u}")
    return hits[0]


def step_ss(sys: PwaStateSpace, x, u):
    """One step of the PWA dynamics; returns (x_next, y, mode)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    sigma = active_mode_ss(sys, x, u)
    m = sys.modes[sigma]
    x_next = m.A @ x + m.B @ u + m.f
    y = m.C @ x + m.D @ u + m.g
    return x_next, y, sigma


def simulate_ss(sys: PwaStateSpace, x0, u_seq) -> Trajectory:
    """Iterate step_ss along u_seq from x0, recording states and modes."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[1] != sys.n_u:
        u_seq = u_seq.reshape(-1, sys.n_u)
    if len(u_seq) == 0:
        raise ValueError("u_seq must be nonempty")
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    xs, ys, ss = [], [], []
    for t, u in enumerate(u_seq):
        try:
            x_next, y, sigma = step_ss(sys, x, u)
        except NoRegion as exc:
            raise NoRegion(f"at time {t}: {exc}") from exc
        xs.append(x)
        ys.append(y)
        ss.append(sigma)
        x = x_next
    return Trajectory(u=u_seq, y=np.array(ys), s=np.array(ss), x=np.array(xs))


def simulate_forced(sys: PwaStateSpace, x0, u_seq, mode_seq) -> np.ndarray:
    """Outputs of the affine dynamics under a prescribed mode sequence.

    Ignores the partition; used to build trajectory bases for a fixed mode
    sequence.  Returns outputs of shape (L, n_y).
    """
    u_seq = np.asarray(u_seq, dtype=float).reshape(len(mode_seq), sys.n_u)
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    ys = np.empty((len(mode_seq), sys.n_y))
    for t, (u, sigma) in enumerate(zip(u_seq, mode_seq)):
        m = sys.modes[sigma]
        ys[t] = m.C @ x + m.D @ u + m.g
        x = m.A @ x + m.B @ u + m.f
    return ys


def behavior_basis(sys: PwaStateSpace, mode_seq) -> np.ndarray:
    """Basis of length-L trajectories [y; u; 1_L] for a fixed mode sequence.

    Columns are images of the unit vectors of (x0, u, 1): the span is the set
    of all [y; u; 1_L] stacks the affine dynamics can generate along
    `mode_seq`.  Shape ((n_y + n_u + 1) L, n_x + n_u L + 1); the rank equals
    n_x + n_u L + 1 whenever the stacked observability matrix of the sequence
    has full column rank.
    """
    mode_seq = [int(s) for s in mode_seq]
    L = len(mode_seq)
    n_x, n_u, n_y = sys.n_x, sys.n_u, sys.n_y
    zero_x = np.zeros(n_x)
    zero_u = np.zeros((L, n_u))

    y_aff = simulate_forced(sys, zero_x, zero_u, mode_seq).ravel()
    O = np.empty((n_y * L, n_x))
    for j in range(n_x):
        e = np.zeros(n_x)
        e[j] = 1.0
        O[:, j] = simulate_forced(sys, e, zero_u, mode_seq).ravel() - y_aff
    T = np.empty((n_y * L, n_u * L))
    for j in range(n_u * L):
        uu = np.zeros(L * n_u)
        uu[j] = 1.0
        T[:, j] = simulate_forced(sys, zero_x, uu.reshape(L, n_u), mode_seq).ravel() - y_aff

    top = np.hstack([O, T, y_aff[:, None]])
    mid = np.hstack([np.zeros((n_u * L, n_x)), np.eye(n_u * L), np.zeros((n_u * L, 1))])
    bot = np.hstack([np.zeros((L, n_x + n_u * L)), np.ones((L, 1))])
    return np.vstack([top, mid, bot])


@dataclass(frozen=True)
class PwarxModel:
    """PWARX form: y_t = -sum_j a_j(s) y_{t-j} + sum_j b_j(s) u_{t-j} + c(s).

    The active mode s is picked by a polyhedral partition of the regressor
    [y_{t-rho..t-1}; u_{t-rho..t}].  Coefficient arrays:
    a: (S, n_a, n_y, n_y), b: (S, n_b + 1, n_y, n_u) with b[:, j] multiplying
    u_{t-j}, c: (S, n_y).  Lag rho = max(n_a, n_b) unless set higher.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    partition: tuple
    rho: int | None = None

    def __post_init__(self):
        a = _freeze(self.a)
        b = _freeze(self.b)
        c = _freeze(np.atleast_2d(self.c))
        if a.ndim != 4 or b.ndim != 4 or c.ndim != 2:
            raise ValueError("a must be (S,n_a,n_y,n_y), b (S,n_b+1,n_y,n_u), c (S,n_y)")
        S = a.shape[0]
        if b.shape[0] != S or c.shape[0] != S or len(self.partition) != S:
            raise ValueError("mode counts of a, b, c, partition must match")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "partition", tuple(self.partition))
        rho = self.rho if self.rho is not None else max(self.n_a, self.n_b)
        if rho < max(self.n_a, self.n_b):
            raise ValueError("rho must be >= max(n_a, n_b)")
        object.__setattr__(self, "rho", int(rho))
        d = self.n_y * self.rho + self.n_u * (self.rho + 1)
        for p in self.partition:
            if p.dim != d:
                raise ValueError("partition must live in regressor space")

    @property
    def S(self) -> int:
        return self.a.shape[0]

    @property
    def n_a(self) -> int:
        return self.a.shape[1]

    @property
    def n_b(self) -> int:
        return self.b.shape[1] - 1

    @property
    def n_y(self) -> int:
        return self.a.shape[2]

    @property
    def n_u(self) -> int:
        return self.b.shape[3]


def pwarx_regressor(model: PwarxModel, y_hist, u_hist) -> np.ndarray:
    """Stack [y_{t-rho..t-1}; u_{t-rho..t}] in time order (oldest first)."""
    rho = model.rho
    y_hist = np.asarray(y_hist, dtype=float).reshape(rho, model.n_y)
    u_hist = np.asarray(u_hist, dtype=float).reshape(rho + 1, model.n_u)
    return np.concatenate([y_hist.ravel(), u_hist.ravel()])


def pwarx_active_mode(model: PwarxModel, y_hist, u_hist) -> int:
    """Mode of the regressor built from rho past outputs and rho+1 inputs."""
    z = pwarx_regressor(model, y_hist, u_hist)
    for i, p in enumerate(model.partition):
        if p.contains(z):
            return i
    raise NoRegion("no region contains the regressor")


def pwarx_predict(model: PwarxModel, y_hist, u_hist):
    """One-step prediction (y_t, mode); u_hist must end with the current input."""
    rho = model.rho
    y_hist = np.asarray(y_hist, dtype=float).reshape(rho, model.n_y)
    u_hist = np.asarray(u_hist, dtype=float).reshape(rho + 1, model.n_u)
    s = pwarx_active_mode(model, y_hist, u_hist)
    y = model.c[s].copy()
    for j in range(1, model.n_a + 1):
        y -= model.a[s, j - 1] @ y_hist[rho - j]
    for j in range(0, model.n_b + 1):
        y += model.b[s, j] @ u_hist[rho - j]
    return y, s


# --- built-in example system -------------------------------------------------

def eq75_system() -> PwaStateSpace:
    """Scalar two-mode PWL benchmark: x+ = -0.3 x + 1.4 u (x < 0), 0.9 x + 0.15 u (x >= 0)."""
    mode1 = AffineMode(A=[[-0.3]], B=[[1.4]], C=[[1.0]], D=[[0.0]], f=[0.0], g=[0.0])
    mode2 = AffineMode(A=[[0.9]], B=[[0.15]], C=[[1.0]], D=[[0.0]], f=[0.0], g=[0.0])
    # Region rows act on [x; u; 1]: mode 1 is strictly x < 0 so the facet
    # x = 0 belongs to mode 2 only.
    region1 = Polyhedron([[1.0, 0.0, 0.0]], strict=[True])
    region2 = Polyhedron([[-1.0, 0.0, 0.0]])
    return PwaStateSpace(modes=(mode1, mode2), partition=(region1, region2))


def eq75_pwarx(rho: int = 1) -> PwarxModel:
    """PWARX realization of the benchmark system (n_a = n_b = 1, lag >= 1).

    Since y = x, the regressor component y_{t-1} reproduces the state-side
    switching: mode 1 iff y_{t-1} < 0.
    """
    a = np.array([[[[0.3]]], [[[-0.9]]]])             # y_t + a1 y_{t-1} = ...
    b = np.array([[[[0.0]], [[1.4]]], [[[0.0]], [[0.15]]]])
    c = np.zeros((2, 1))
    d = 1 * rho + 1 * (rho + 1)
    row1 = np.zeros((1, d + 1))
    row1[0, rho - 1] = 1.0                            # y_{t-1} < 0
    row2 = -row1
    part = (Polyhedron(row1, strict=[True]), Polyhedron(row2))
    if rho == 1:
        return PwarxModel(a=a, b=b, c=c, partition=part)
    return PwarxModel(a=a, b=b, c=c, partition=part, rho=rho)


# --- JSON serialization -------------------------------------------------------

def _mat(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def system_to_json(sys: PwaStateSpace) -> str:
    """Serialize losslessly (Python float repr round-trips doubles exactly)."""
    doc = {
        "n_x": sys.n_x,
        "n_u": sys.n_u,
        "n_y": sys.n_y,
        "modes": [
            {"A": _mat(m.A), "B": _mat(m.B), "C": _mat(m.C),
             "D": _mat(m.D), "f": _mat(m.f), "g": _mat(m.g)}
            for m in sys.modes
        ],
        "partition": [
            {"coefficients": _mat(p.coefficients),
             "strict": p.strict.tolist() if p.strict is not None else None}
            for p in sys.partition
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def system_from_json(text: str) -> PwaStateSpace:
    doc = json.loads(text)
    modes = tuple(
        AffineMode(A=m["A"], B=m["B"], C=m["C"], D=m["D"], f=m["f"], g=m["g"])
        for m in doc["modes"]
    )
    partition = tuple(
        Polyhedron(p["coefficients"], strict=p.get("strict"))
        for p in doc["partition"]
    )
    return PwaStateSpace(modes=modes, partition=partition)
