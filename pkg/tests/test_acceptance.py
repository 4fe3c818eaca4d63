"""Acceptance tests: the headline guarantees of the package on the builtin
two-mode scalar benchmark system.

The expensive shared artifacts (the 1000-sample excitation dataset and the
eight-run closed-loop experiment matrix) are built once per session and
reused across tests.  The dataset is cached on disk because the
dynamic-programming collection oracle takes a couple of minutes.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from pwadeepc import cli, verification
from pwadeepc.pwa_system import (behavior_basis, eq75_pwarx, eq75_system,
                                 matrix_rank)
from pwadeepc.data_pipeline import (apply_label_permutation, dataset_from_csv,
                                    dataset_to_csv, kmeans_modes,
                                    match_clusters_to_modes,
                                    misclassification_rate,
                                    oracle_mpc_collect, partition_dataset,
                                    pwarx_labels, triangular_reference)
from pwadeepc.behavior_matrices import build_mosaic_blocks
from pwadeepc.closed_loop import (case_references,
                                  misclassification_bound_check,
                                  run_receding_horizon, summarize_run)
from pwadeepc.deepc_solver import DeepcConfig

CACHE = Path(__file__).resolve().parents[1] / ".cache_ds1000.csv"

SYS = eq75_system()
PWARX = eq75_pwarx()

CONTROL = DeepcConfig(L=19, rho=25, Q=1.0, R=1.0,
                      lambda1=10.0, lambda2=1e-9, lambda_cap=10.0)
T_RUN = 50
SWITCH = 25
AMPLITUDE = 4.0
KMEANS_LAG = 3
KMEANS_SEED = 0


@pytest.fixture(scope="session")
def big_dataset():
    """1000-sample tracking dataset from the collection oracle (cached)."""
    if CACHE.exists():
        return dataset_from_csv(CACHE.read_text())
    reference = triangular_reference(10.0, 40, 0.01, 1020)
    ds = oracle_mpc_collect(SYS, reference, N=1000)
    CACHE.write_text(dataset_to_csv(ds))
    return ds


@pytest.fixture(scope="session")
def kmeans_result(big_dataset):
    """Matched K-means labels and their misclassification rate."""
    truth = pwarx_labels(big_dataset, PWARX)
    _, raw = kmeans_modes(big_dataset, 2, rho=KMEANS_LAG, seed=KMEANS_SEED)
    s_hat = apply_label_permutation(raw, match_clusters_to_modes(raw, truth))
    return s_hat, misclassification_rate(s_hat, truth), truth


@pytest.fixture(scope="session")
def run_matrix(big_dataset, kmeans_result):
    """Closed-loop runs: 2 schemes x {exact, kmeans} labels x 2 cases."""
    s_hat, _, truth = kmeans_result
    mosaics = {
        "exact": build_mosaic_blocks(partition_dataset(big_dataset, truth),
                                     CONTROL.L, CONTROL.rho),
        "kmeans": build_mosaic_blocks(partition_dataset(big_dataset, s_hat),
                                      CONTROL.L, CONTROL.rho),
    }
    runs = {}
    start = time.perf_counter()
    for case in (1, 2):
        u_ref, y_ref = case_references(SYS, case, T_RUN, CONTROL.L,
                                       switch=SWITCH, amplitude=AMPLITUDE)
        x0 = float(y_ref[0])
        for labeling in ("exact", "kmeans"):
            for scheme in ("elastic", "cap"):
                runs[(case, labeling, scheme)] = run_receding_horizon(
                    SYS, mosaics[labeling], CONTROL, scheme,
                    u_ref, y_ref, T_RUN, x0=x0)
    elapsed = time.perf_counter() - start
    return runs, mosaics, elapsed


def _rmse(runs, case, labeling, scheme):
    report = summarize_run(runs[(case, labeling, scheme)])
    return report.rmse_u, report.rmse_y


def test_fresh_trajectories_lie_in_stored_window_span():
    start = time.perf_counter()
    report = verification.lemma_suite(SYS, PWARX, L=5, trials=100, seed=0,
                                      residual_tol=1e-6)
    elapsed = time.perf_counter() - start
    assert report["passed"]
    assert report["success_rate"] == 1.0
    assert report["max_residual"] < 1e-6
    assert elapsed < 30.0


def test_trajectory_basis_rank_equals_behavior_dimension():
    report = verification.rank_suite(SYS, PWARX, depths=(3, 5, 8),
                                     per_depth=20, seed=0)
    assert report["passed"]
    assert report["checked"] == 60
    assert report["failures"] == []
    # scalar system, depth 5: one state + five inputs + one affine offset
    assert matrix_rank(behavior_basis(SYS, (1,) * 5)) == 7


def test_solvers_match_independent_oracles():
    report = verification.solver_oracle_suite(SYS, PWARX, instances=10,
                                              seed=0, rel_tol=1e-4,
                                              kkt_tol=1e-5)
    assert report["passed"]
    assert len(report["instances"]) == 10
    assert report["max_kkt"] < 1e-5
    for row in report["instances"]:
        assert row["elastic_rel"] < 1e-4
        assert row["cap_rel"] < 1e-4
    tiny = verification.tiny_enumeration_check(SYS, PWARX, seed=0)
    assert tiny["passed"]
    assert tiny["rel_error"] < 1e-6


def test_group_death_bracketed_by_computed_threshold():
    report = verification.threshold_suite(SYS, PWARX, instances=5, seed=0,
                                          margin=0.02, norm_tol=1e-8)
    assert report["passed"]
    assert report["completed"] == 5
    for row in report["instances"]:
        assert row["norm_below"] > 1e-8
        assert row["norm_above"] < 1e-8


def test_kmeans_misclassification_rate_in_expected_band(kmeans_result):
    _, rate, _ = kmeans_result
    assert 0.09 <= rate <= 0.19


def test_all_closed_loop_runs_complete(run_matrix):
    runs, _, _ = run_matrix
    assert len(runs) == 8
    for key, run in runs.items():
        assert run.completed, f"run {key} failed: {run.failure}"
        assert run.T == T_RUN


def test_run_matrix_within_time_budget(run_matrix):
    _, _, elapsed = run_matrix
    assert elapsed < 600.0


def test_group_shrinkage_tracks_output_better_with_exact_labels(run_matrix):
    runs, _, _ = run_matrix
    for case in (1, 2):
        _, y_elastic = _rmse(runs, case, "exact", "elastic")
        _, y_cap = _rmse(runs, case, "exact", "cap")
        assert y_cap < y_elastic, (
            f"case {case}: output RMSE {y_cap} !< {y_elastic}")


def test_entrywise_shrinkage_uses_less_input_with_exact_labels(run_matrix):
    runs, _, _ = run_matrix
    for case in (1, 2):
        u_elastic, _ = _rmse(runs, case, "exact", "elastic")
        u_cap, _ = _rmse(runs, case, "exact", "cap")
        assert u_elastic < u_cap, (
            f"case {case}: input RMSE {u_elastic} !< {u_cap}")


def test_label_noise_degrades_group_shrinkage_input_tracking_more(run_matrix):
    runs, _, _ = run_matrix
    for case in (1, 2):
        u_el_exact, _ = _rmse(runs, case, "exact", "elastic")
        u_el_km, _ = _rmse(runs, case, "kmeans", "elastic")
        u_cap_exact, _ = _rmse(runs, case, "exact", "cap")
        u_cap_km, _ = _rmse(runs, case, "kmeans", "cap")
        assert (u_cap_km - u_cap_exact) > (u_el_km - u_el_exact), (
            f"case {case}: group-shrinkage degradation "
            f"{u_cap_km - u_cap_exact} !> {u_el_km - u_el_exact}")


def test_cost_bound_ledger_holds_at_every_step(run_matrix):
    runs, mosaics, _ = run_matrix
    for case in (1, 2):
        for scheme in ("elastic", "cap"):
            ledger = misclassification_bound_check(
                runs[(case, "exact", scheme)], runs[(case, "kmeans", scheme)],
                mosaics["exact"], mosaics["kmeans"], CONTROL, scheme)
            assert len(ledger) == T_RUN
            for entry in ledger:
                assert entry["rhs"] - entry["lhs"] >= -1e-6, (
                    f"case {case} {scheme} t={entry['t']}: bound violated")
                assert entry["holds"]


def test_cli_reruns_are_byte_identical(tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        "[data]\nN = 120\n"
        "[control]\nL = 4\nrho = 2\n"
        "lambda1 = 1.0\nlambda2 = 1e-6\nlambda_cap = 1.0\n"
        "[run]\nT = 3\ncases = [1]\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        out.mkdir()
        for command in ("collect", "cluster", "run"):
            code = cli.main([command, "--config", str(cfg),
                             "--out", str(out)])
            assert code == 0, f"{command} exited {code}"
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for name in names:
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        assert a == b, f"{name} differs between identical invocations"
