"""Tests for excitation, DP data collection, mode estimation, and CSV I/O."""

import numpy as np
import pytest

from pwadeepc.errors import GridTooCoarse, InsufficientData, TooShort
from pwadeepc.data_pipeline import (
    Dataset,
    triangular_reference,
    oracle_mpc_collect,
    regressor_matrix,
    kmeans_modes,
    pwarx_labels,
    match_clusters_to_modes,
    apply_label_permutation,
    misclassification_rate,
    partition_dataset,
    persistence_check,
    aic_lag_select,
    dataset_to_csv,
    dataset_from_csv,
)
from pwadeepc.pwa_system import simulate_ss


def test_triangular_reference_shape_and_decay():
    r = triangular_reference(10.0, 40, 0.01, 130)
    assert len(r) == 130
    assert r[0] == 0.0
    # first period peaks at +10, dips to -10
    assert np.max(r[:40]) == pytest.approx(10.0)
    assert np.min(r[:40]) == pytest.approx(-10.0)
    # second period peak decays by 1%
    assert np.max(r[40:80]) == pytest.approx(9.9)
    assert np.max(r[80:120]) == pytest.approx(10.0 * 0.99 ** 2)


def test_triangular_reference_odd_symmetry():
    r = triangular_reference(4.0, 20, 0.0, 20)
    # within a period the wave is odd about its midpoint
    np.testing.assert_allclose(r[1:10], -r[19:10:-1], atol=1e-12)


def test_triangular_reference_validates():
    with pytest.raises(ValueError):
        triangular_reference(1.0, 7, 0.0, 10)  # odd period
    with pytest.raises(ValueError):
        triangular_reference(1.0, 8, 0.0, 0)


@pytest.fixture(scope="module")
def small_collection(system):
    ref = triangular_reference(8.0, 20, 0.0, 80)
    return oracle_mpc_collect(system, ref, N=60, horizon=8,
                              state_grid=(-15.0, 15.0, 901),
                              input_grid=(-12.0, 12.0, 301)), ref


def test_oracle_collection_tracks_reference(small_collection):
    ds, ref = small_collection
    # outputs chase the reference with one step of lag
    err = ds.y_d.ravel()[1:] - ref[1:60]
    assert np.sqrt(np.mean(err ** 2)) < 0.5
    assert set(np.unique(ds.s_d)) == {0, 1}


def test_oracle_collection_deterministic(system, small_collection):
    ds, ref = small_collection
    ds2 = oracle_mpc_collect(system, ref, N=60, horizon=8,
                             state_grid=(-15.0, 15.0, 901),
                             input_grid=(-12.0, 12.0, 301))
    np.testing.assert_array_equal(ds.u_d, ds2.u_d)
    np.testing.assert_array_equal(ds.y_d, ds2.y_d)
    np.testing.assert_array_equal(ds.s_d, ds2.s_d)


def test_absurdly_coarse_grid_is_refused(system):
    ref = triangular_reference(8.0, 20, 0.0, 40)
    with pytest.raises(GridTooCoarse):
        oracle_mpc_collect(system, ref, N=10, horizon=8,
                           state_grid=(-15.0, 15.0, 7),
                           input_grid=(-12.0, 12.0, 5))


def test_regressor_matrix_rows():
    ds = Dataset(u_d=np.arange(5.0).reshape(-1, 1),
                 y_d=(10 + np.arange(5.0)).reshape(-1, 1),
                 s_d=np.zeros(5, dtype=int))
    X = regressor_matrix(ds, rho=2)
    assert X.shape == (3, 5)
    np.testing.assert_array_equal(X[0], [10.0, 11.0, 0.0, 1.0, 2.0])
    np.testing.assert_array_equal(X[2], [12.0, 13.0, 2.0, 3.0, 4.0])


def test_kmeans_recovers_modes_on_clustered_data(runny_data):
    # square-wave excitation: per-mode regressors form two separated blobs
    ds, exact = runny_data
    model, s_hat = kmeans_modes(ds, S=2, rho=1, seed=0, restarts=20)
    assert np.all(s_hat[:1] == -1)
    perm = match_clusters_to_modes(s_hat, exact)
    aligned = apply_label_permutation(s_hat, perm)
    assert misclassification_rate(aligned, exact) < 0.25
    assert model.centroids.shape == (2, 3)
    assert model.inertia > 0


def test_kmeans_deterministic(rand_data):
    ds, _ = rand_data
    m1, s1 = kmeans_modes(ds, S=2, rho=1, seed=5, restarts=10)
    m2, s2 = kmeans_modes(ds, S=2, rho=1, seed=5, restarts=10)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(m1.centroids, m2.centroids)


def test_cluster_matching_on_synthetic_labels():
    s_true = np.array([-1, 0, 0, 1, 1, 1, 0])
    s_hat = np.array([-1, 1, 1, 0, 0, 1, 1])  # clusters swapped, one error
    perm = match_clusters_to_modes(s_hat, s_true)
    np.testing.assert_array_equal(perm, [1, 0])
    aligned = apply_label_permutation(s_hat, perm)
    assert aligned[0] == -1
    assert misclassification_rate(aligned, s_true) == pytest.approx(1 / 6)


def test_partition_keeps_order_and_sources(rand_data):
    ds, exact = rand_data
    parts = partition_dataset(ds, exact)
    assert len(parts) == 2
    for part in parts:
        assert np.all(np.diff(part.source_indices) > 0)
        np.testing.assert_array_equal(part.u, ds.u_d[part.source_indices])
        np.testing.assert_array_equal(part.y, ds.y_d[part.source_indices])
        assert np.all(exact[part.source_indices] == part.mode)
    # index 0 has no label and belongs to neither part
    assert sum(p.N_i for p in parts) == ds.N - 1
    with pytest.raises(InsufficientData):
        partition_dataset(ds, exact, min_samples=ds.N)


def test_persistence_check(rand_data):
    ds, _ = rand_data
    full, rank = persistence_check(ds.u_d, 8)
    assert full and rank == 8
    # constant input is never persistently exciting beyond order 1
    full, rank = persistence_check(np.ones((40, 1)), 3)
    assert not full and rank == 1
    with pytest.raises(TooShort):
        persistence_check(np.ones((4, 1)), 5)


def test_lag_selection_on_linear_arx():
    # y_t = 0.4 y_{t-1} - 0.2 y_{t-2} + u_{t-1}: true lag 2
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, 300)
    y = np.zeros(300)
    for t in range(2, 300):
        y[t] = 0.4 * y[t - 1] - 0.2 * y[t - 2] + u[t - 1]
    ds = Dataset(u_d=u.reshape(-1, 1), y_d=y.reshape(-1, 1),
                 s_d=np.zeros(300, dtype=int))
    assert aic_lag_select(ds, max_lag=5) == 2


def test_csv_round_trip_is_lossless(rand_data):
    ds, exact = rand_data
    text = dataset_to_csv(ds)
    assert text.splitlines()[0] == "t,u,y,s_true"
    back = dataset_from_csv(text)
    np.testing.assert_array_equal(back.u_d, ds.u_d)
    np.testing.assert_array_equal(back.y_d, ds.y_d)
    np.testing.assert_array_equal(back.s_d, ds.s_d)
    assert back.s_hat is None
    # with estimated labels attached
    ds2 = Dataset(u_d=ds.u_d, y_d=ds.y_d, s_d=ds.s_d, s_hat=exact)
    text2 = dataset_to_csv(ds2)
    assert text2.splitlines()[0] == "t,u,y,s_true,s_hat"
    back2 = dataset_from_csv(text2)
    np.testing.assert_array_equal(back2.s_hat, exact)
