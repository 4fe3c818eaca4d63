import json

import numpy as np
import pytest

from pwadeepc.errors import NoRegion
from pwadeepc.pwa_system import (
    AffineMode,
    Polyhedron,
    PwaStateSpace,
    active_mode_ss,
    behavior_basis,
    eq75_pwarx,
    eq75_system,
    matrix_rank,
    pwarx_active_mode,
    pwarx_predict,
    region_memberships,
    simulate_ss,
    step_ss,
    system_from_json,
    system_to_json,
)


@pytest.fixture(scope="module")
def sys75():
    return eq75_system()


class TestActiveMode:
    def test_negative_state_is_mode_one(self, sys75):
        for u in (-3.0, 0.0, 7.5):
            assert active_mode_ss(sys75, -1.0, u) == 0

    def test_boundary_belongs_to_second_region(self, sys75):
        assert active_mode_ss(sys75, 0.0, 0.0) == 1
        assert active_mode_ss(sys75, 0.0, 1.0) == 1

    def test_positive_state_is_mode_two(self, sys75):
        assert active_mode_ss(sys75, 0.5, 0.0) == 1

    def test_no_region_raises(self):
        mode = AffineMode(A=[[1.0]], B=[[1.0]], C=[[1.0]], D=[[0.0]], f=[0.0], g=[0.0])
        gap = Polyhedron([[1.0, 0.0, 1.0]])  # x <= -1 only
        sys = PwaStateSpace(modes=(mode,), partition=(gap,))
        with pytest.raises(NoRegion):
            active_mode_ss(sys, 0.0, 0.0)

    def test_deterministic_tie_break(self, sys75):
        modes = [active_mode_ss(sys75, 0.3, -0.2) for _ in range(10)]
        assert len(set(modes)) == 1

    def test_overlapping_regions_lowest_index(self):
        mode = AffineMode(A=[[1.0]], B=[[1.0]], C=[[1.0]], D=[[0.0]], f=[0.0], g=[0.0])
        everywhere = Polyhedron([[0.0, 0.0, 0.0]])
        sys = PwaStateSpace(modes=(mode, mode), partition=(everywhere, everywhere))
        assert active_mode_ss(sys, 1.0, 1.0) == 0
        assert region_memberships(sys, 1.0, 1.0) == [0, 1]


class TestStep:
    def test_step_from_negative_state(self, sys75):
        x_next, y, mode = step_ss(sys75, -1.0, 0.0)
        assert mode == 0
        assert x_next == pytest.approx(0.3)
        assert y == pytest.approx(-1.0)

    def test_step_from_positive_state(self, sys75):
        x_next, y, mode = step_ss(sys75, 1.0, 0.0)
        assert mode == 1
        assert x_next == pytest.approx(0.9)
        assert y == pytest.approx(1.0)

    def test_step_on_boundary_uses_second_mode(self, sys75):
        x_next, y, mode = step_ss(sys75, 0.0, 1.0)
        assert mode == 1
        assert x_next == pytest.approx(0.15)
        assert y == pytest.approx(0.0)


class TestSimulate:
    def test_zero_fixed_point(self, sys75):
        traj = simulate_ss(sys75, 0.0, np.zeros(10))
        assert np.all(traj.x == 0.0)
        assert np.all(traj.y == 0.0)
        assert np.all(traj.s == 1)

    def test_hand_iteration(self, sys75):
        traj = simulate_ss(sys75, -1.0, np.zeros(4))
        assert traj.x.ravel() == pytest.approx([-1.0, 0.3, 0.27, 0.243])
        assert list(traj.s) == [0, 1, 1, 1]

    def test_length_matches_input(self, sys75):
        traj = simulate_ss(sys75, 0.4, np.linspace(-1, 1, 17))
        assert len(traj) == 17

    def test_recorded_modes_consistent(self, sys75):
        rng = np.random.default_rng(3)
        traj = simulate_ss(sys75, rng.normal(), rng.normal(size=200))
        for t in range(len(traj)):
            assert traj.s[t] == active_mode_ss(sys75, traj.x[t], traj.u[t])


class TestPwarx:
    def test_sign_of_last_output_partition(self):
        model = eq75_pwarx()
        assert pwarx_active_mode(model, [-2.0], [0.0, 0.0]) == 0
        assert pwarx_active_mode(model, [2.0], [0.0, 0.0]) == 1
        # boundary regressor goes to the non-strict region
        assert pwarx_active_mode(model, [0.0], [5.0, -1.0]) == 1

    def test_zero_history_zero_input(self):
        y, s = pwarx_predict(eq75_pwarx(), [0.0], [0.0, 0.0])
        assert y == pytest.approx(0.0)
        assert s == 1

    def test_single_mode_reduces_to_arx(self):
        a = np.array([[[[0.5]]]])
        b = np.array([[[[2.0]], [[0.25]]]])
        c = np.array([[1.0]])
        part = (Polyhedron(np.zeros((1, 4))),)
        model = __import__("pwadeepc.pwa_system", fromlist=["PwarxModel"]).PwarxModel(
            a=a, b=b, c=c, partition=part)
        y, s = pwarx_predict(model, [3.0], [4.0, 5.0])
        # y = -0.5*3 + 0.25*4 + 2*5 + 1
        assert y == pytest.approx(-1.5 + 1.0 + 10.0 + 1.0)
        assert s == 0

    def test_matches_state_space_on_random_rollouts(self, sys75):
        model = eq75_pwarx()
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            u = rng.uniform(-3, 3, size=12)
            traj = simulate_ss(sys75, rng.uniform(-2, 2), u)
            for t in range(1, len(traj)):
                y_hat, s_hat = pwarx_predict(model, traj.y[t - 1], [u[t - 1], u[t]])
                worst = max(worst, abs(float(y_hat[0] - traj.y[t, 0])))
        assert worst < 1e-10


class TestBehaviorBasis:
    def test_rank_for_constant_mode(self, sys75):
        basis = behavior_basis(sys75, [1, 1])
        assert basis.shape == (6, 4)
        assert matrix_rank(basis) == 4

    def test_toeplitz_block_for_lti(self):
        # single-mode LTI with C = I, D = 0: the y-rows of the input columns
        # form the causal Toeplitz of Markov parameters
        A = np.array([[0.5, 0.1], [0.0, 0.2]])
        B = np.array([[1.0], [0.5]])
        mode = AffineMode(A=A, B=B, C=np.eye(2), D=np.zeros((2, 1)),
                          f=np.zeros(2), g=np.zeros(2))
        sys = PwaStateSpace(modes=(mode,), partition=(Polyhedron(np.zeros((1, 4))),))
        L = 3
        basis = behavior_basis(sys, [0] * L)
        T = basis[: 2 * L, 2: 2 + L]
        markov = [np.zeros((2, 1)), B, A @ B]
        expected = np.zeros((2 * L, L))
        for r in range(L):
            for c in range(L):
                if r >= c:
                    expected[2 * r: 2 * r + 2, c] = markov[r - c].ravel()
        assert np.allclose(T, expected)

    def test_span_contains_simulated_trajectories(self, sys75):
        rng = np.random.default_rng(5)
        L = 4
        worst = 0.0
        for _ in range(50):
            u = rng.uniform(-2, 2, size=L)
            traj = simulate_ss(sys75, rng.uniform(-2, 2), u)
            basis = behavior_basis(sys75, traj.s)
            target = np.concatenate([traj.y.ravel(), traj.u.ravel(), np.ones(L)])
            coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
            worst = max(worst, np.linalg.norm(basis @ coef - target))
        assert worst < 1e-9

    def test_rank_with_affine_offsets(self):
        mode1 = AffineMode(A=[[0.4]], B=[[1.0]], C=[[2.0]], D=[[0.3]], f=[0.5], g=[-0.2])
        mode2 = AffineMode(A=[[-0.6]], B=[[0.7]], C=[[1.0]], D=[[0.0]], f=[-1.0], g=[0.4])
        r1 = Polyhedron([[1.0, 0.0, 0.0]], strict=[True])
        r2 = Polyhedron([[-1.0, 0.0, 0.0]])
        sys = PwaStateSpace(modes=(mode1, mode2), partition=(r1, r2))
        for seq in ([0, 1, 0], [1, 1, 0, 0], [0, 1, 1, 0, 1]):
            basis = behavior_basis(sys, seq)
            assert matrix_rank(basis) == 1 + len(seq) + 1


class TestSerialization:
    def test_round_trip_is_lossless(self, sys75):
        text = system_to_json(sys75)
        back = system_from_json(text)
        for m1, m2 in zip(sys75.modes, back.modes):
            for name in ("A", "B", "C", "D", "f", "g"):
                assert np.array_equal(getattr(m1, name), getattr(m2, name))
        for p1, p2 in zip(sys75.partition, back.partition):
            assert np.array_equal(p1.coefficients, p2.coefficients)
        assert system_to_json(back) == text

    def test_round_trip_preserves_full_precision(self):
        val = 1.0 / 3.0 + 1e-16
        mode = AffineMode(A=[[val]], B=[[np.pi]], C=[[1.0]], D=[[0.0]],
                          f=[np.e], g=[0.0])
        sys = PwaStateSpace(modes=(mode,), partition=(Polyhedron(np.zeros((1, 3))),))
        back = system_from_json(system_to_json(sys))
        assert back.modes[0].A[0, 0] == val
        assert back.modes[0].B[0, 0] == np.pi
        assert back.modes[0].f[0] == np.e

    def test_json_is_valid_document(self, sys75):
        doc = json.loads(system_to_json(sys75))
        assert doc["n_x"] == 1 and doc["n_u"] == 1 and doc["n_y"] == 1
        assert len(doc["modes"]) == 2
