"""Shared fixtures: example system, excitation data, and mosaic blocks."""

import numpy as np
import pytest

from pwadeepc.pwa_system import eq75_system, eq75_pwarx, simulate_ss
from pwadeepc.data_pipeline import Dataset, partition_dataset, pwarx_labels
from pwadeepc.behavior_matrices import build_mosaic_blocks


@pytest.fixture(scope="session")
def system():
    return eq75_system()


@pytest.fixture(scope="session")
def pwarx(system):
    return eq75_pwarx()


def random_input_dataset(system, pwarx, n_samples, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-4.0, 4.0, n_samples)
    traj = simulate_ss(system, np.zeros(1), u)
    ds = Dataset(u_d=u.reshape(-1, 1), y_d=traj.y.reshape(-1, 1),
                 s_d=traj.s.copy())
    labels = pwarx_labels(ds, pwarx)
    return ds, labels


@pytest.fixture(scope="session")
def rand_data(system, pwarx):
    """400-sample random-excitation dataset with exact mode labels."""
    ds, labels = random_input_dataset(system, pwarx, 400, seed=7)
    return ds, labels


@pytest.fixture(scope="session")
def rand_locals(rand_data):
    ds, labels = rand_data
    return partition_dataset(ds, labels)


@pytest.fixture(scope="session")
def runny_data(system, pwarx):
    """Dataset with long same-mode runs (piecewise-constant excitation)."""
    rng = np.random.default_rng(21)
    hold = 25
    levels = np.repeat([3.0, -3.0] * 16, hold)
    u = levels + rng.uniform(-0.8, 0.8, levels.size)
    traj = simulate_ss(system, np.zeros(1), u)
    ds = Dataset(u_d=u.reshape(-1, 1), y_d=traj.y.reshape(-1, 1),
                 s_d=traj.s.copy())
    return ds, pwarx_labels(ds, pwarx)


@pytest.fixture(scope="session")
def runny_locals(runny_data):
    ds, labels = runny_data
    return partition_dataset(ds, labels)


@pytest.fixture(scope="session")
def small_mosaic(rand_locals):
    """Small stacked per-mode data blocks (window 4, lag 2)."""
    return build_mosaic_blocks(rand_locals, L=4, rho=2, windows="concat")
