"""Command-line front end: config loading, pipeline orchestration, reports.

Subcommands mirror the pipeline stages: `collect` gathers excitation data
with the dynamic-programming tracking controller, `cluster` estimates mode
labels, `run` executes the closed-loop experiment matrix (schemes x
labelings x cases) with metrics and cost-bound ledgers, and `verify` runs
the self-contained property suites.

All artifacts embed the resolved-config hash and seeds, and writes are
atomic (temp file + rename), so identical configs reproduce byte-identical
outputs.  Exit codes: 0 success, 1 verification failure, 2 data/clustering
failure, 3 solver failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .pwa_system import (eq75_pwarx, eq75_system, system_from_json)
from .data_pipeline import (apply_label_permutation, dataset_from_csv,
                            dataset_to_csv, kmeans_modes,
                            match_clusters_to_modes, misclassification_rate,
                            oracle_mpc_collect, partition_dataset,
                            persistence_check, pwarx_labels,
                            triangular_reference, Dataset)
from .behavior_matrices import build_mosaic_blocks, mosaic_matrix, mosaic_metadata
from .closed_loop import (case_references, misclassification_bound_check,
                          run_receding_horizon, summarize_run)
from .deepc_solver import DeepcConfig
from .errors import (ConfigError, EmptyCluster, GridTooCoarse,
                     InsufficientData, PwaDeepcError, RankDeficient)
from . import verification

DEFAULT_CONFIG = {
    "system": "builtin:eq75",
    "data": {
        "N": 1000,
        "seed": 0,
        "amplitude": 10.0,
        "period": 40,
        "decay": 0.01,
        "horizon": 20,
        "state_grid": [-15.0, 15.0, 3001],
        "input_grid": [-12.0, 12.0, 961],
        "x0": 0.0,
    },
    "clustering": {
        "S": 2,
        "lag": 3,
        "seed": 0,
        "restarts": 50,
        "mode": "kmeans",
    },
    "control": {
        "L": 19,
        "rho": 25,
        "Q": 1.0,
        "R": 1.0,
        "lambda1": 10.0,
        "lambda2": 1e-9,
        "lambda_cap": 10.0,
    },
    "run": {
        "T": 50,
        "cases": [1, 2],
        "amplitude": 4.0,
        "switch": 25,
    },
    "verify": {
        "seed": 0,
    },
}


# --- configuration ---------------------------------------------------------------

def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(spec: str, seed: int | None = None) -> dict:
    """Resolve a config: `builtin:eq75` or a TOML/JSON file merged over it."""
    if spec == "builtin:eq75":
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    elif spec.startswith("builtin:"):
        raise ConfigError(f"unknown builtin config {spec!r}")
    else:
        if not os.path.exists(spec):
            raise ConfigError(f"config file not found: {spec}")
        with open(spec, "rb") as fh:
            raw = fh.read()
        try:
            if spec.endswith(".json"):
                over = json.loads(raw.decode())
            else:
                over = tomllib.loads(raw.decode())
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {spec}: {exc}") from exc
        if not isinstance(over, dict):
            raise ConfigError("config root must be a table/object")
        unknown = set(over) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _deep_merge(DEFAULT_CONFIG, over)
    if seed is not None:
        cfg["data"]["seed"] = int(seed)
        cfg["clustering"]["seed"] = int(seed)
        cfg["verify"]["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _load_system(cfg: dict):
    """Returns (state-space system, regressor model or None)."""
    spec = cfg["system"]
    if spec == "builtin:eq75":
        return eq75_system(), eq75_pwarx()
    if isinstance(spec, dict) and "file" in spec:
        with open(spec["file"]) as fh:
            return system_from_json(fh.read()), None
    raise ConfigError(f"unsupported system spec: {spec!r}")


def _deepc_config(cfg: dict) -> DeepcConfig:
    c = cfg["control"]
    return DeepcConfig(L=int(c["L"]), rho=int(c["rho"]),
                       Q=float(c["Q"]), R=float(c["R"]),
                       lambda1=float(c["lambda1"]),
                       lambda2=float(c["lambda2"]),
                       lambda_cap=float(c["lambda_cap"]))


# --- deterministic output helpers -------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def write_text(path: str, text: str) -> None:
    """Atomic write: the file appears complete or not at all."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    write_text(path, json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _stamp(cfg: dict) -> str:
    return (f"# config_hash={config_hash(cfg)}"
            f" data_seed={cfg['data']['seed']}"
            f" clustering_seed={cfg['clustering']['seed']}\n")


# --- collect ----------------------------------------------------------------------

def cmd_collect(cfg: dict, out: str) -> int:
    sys_, pwarx = _load_system(cfg)
    d = cfg["data"]
    rho = int(cfg["control"]["rho"])
    horizon = int(d["horizon"])
    reference = triangular_reference(float(d["amplitude"]), int(d["period"]),
                                     float(d["decay"]), int(d["N"]) + horizon)
    try:
        ds = oracle_mpc_collect(sys_, reference, N=int(d["N"]),
                                horizon=horizon,
                                state_grid=tuple(d["state_grid"]),
                                input_grid=tuple(d["input_grid"]),
                                x0=float(d["x0"]))
    except GridTooCoarse as exc:
        print(f"data collection failed: {exc}", file=sys.stderr)
        return 2
    os.makedirs(out, exist_ok=True)
    write_text(os.path.join(out, "dataset.csv"), _stamp(cfg) + dataset_to_csv(ds))
    pe_order = int(cfg["control"]["L"]) + sys_.n_x + 1
    pe_report = []
    pe_ok = True
    if pwarx is not None:
        labels = pwarx_labels(ds, pwarx)
        for local in partition_dataset(ds, labels):
            full, rank = persistence_check(local.u, pe_order)
            pe_ok = pe_ok and full
            pe_report.append({"mode": local.mode, "order": pe_order,
                              "rank": rank, "full_row_rank": full,
                              "samples": local.N_i})
    counts = np.bincount(ds.s_d, minlength=sys_.n_modes).tolist()
    write_json(os.path.join(out, "collect.json"), {
        "config": cfg, "config_hash": config_hash(cfg),
        "N": ds.N, "mode_counts": counts,
        "persistence_of_excitation": pe_report,
    })
    if not pe_ok:
        print("persistence of excitation failed; see collect.json",
              file=sys.stderr)
        return 2
    return 0


# --- cluster ----------------------------------------------------------------------

def _confusion(s_hat, s_true, S: int) -> list:
    mask = (np.asarray(s_hat) >= 0) & (np.asarray(s_true) >= 0)
    mat = np.zeros((S, S), dtype=int)
    for a, b in zip(np.asarray(s_true)[mask], np.asarray(s_hat)[mask]):
        mat[a, b] += 1
    return mat.tolist()


def cmd_cluster(cfg: dict, out: str) -> int:
    sys_, pwarx = _load_system(cfg)
    path = os.path.join(out, "dataset.csv")
    if not os.path.exists(path):
        print(f"dataset not found: {path} (run collect first)", file=sys.stderr)
        return 2
    with open(path) as fh:
        ds = dataset_from_csv(fh.read())
    c = cfg["clustering"]
    S = int(c["S"])
    truth = pwarx_labels(ds, pwarx) if pwarx is not None else ds.s_d
    try:
        if c["mode"] == "exact":
            if truth is None:
                raise ConfigError("exact labeling needs true modes")
            s_hat = truth.copy()
        elif c["mode"] == "kmeans":
            _, raw = kmeans_modes(ds, S, rho=int(c["lag"]),
                                  seed=int(c["seed"]),
                                  restarts=int(c["restarts"]))
            if truth is not None:
                s_hat = apply_label_permutation(
                    raw, match_clusters_to_modes(raw, truth))
            else:
                s_hat = raw
        else:
            raise ConfigError(f"unknown clustering mode {c['mode']!r}")
    except (EmptyCluster, ConfigError) as exc:
        print(f"clustering failed: {exc}", file=sys.stderr)
        return 2
    labeled = Dataset(u_d=ds.u_d, y_d=ds.y_d, s_d=ds.s_d, s_hat=s_hat)
    write_text(os.path.join(out, "labels.csv"),
               _stamp(cfg) + dataset_to_csv(labeled))
    report = {
        "config": cfg, "config_hash": config_hash(cfg),
        "mode": c["mode"], "S": S,
    }
    if truth is not None:
        report["misclassification"] = misclassification_rate(s_hat, truth)
        report["confusion"] = _confusion(s_hat, truth, S)
    # mosaic heatmap data for both labelings
    L, rho = int(cfg["control"]["L"]), int(cfg["control"]["rho"])
    try:
        for name, labels in (("exact", truth), ("estimated", s_hat)):
            if labels is None:
                continue
            mb = build_mosaic_blocks(partition_dataset(ds, labels), L, rho)
            mat = mosaic_matrix(mb)
            rows = "\n".join(",".join(f"{v:.17g}" for v in row) for row in mat)
            write_text(os.path.join(out, f"mosaic_{name}.csv"),
                       _stamp(cfg) + rows + "\n")
            report[f"mosaic_{name}"] = mosaic_metadata(mb)
    except (InsufficientData, RankDeficient) as exc:
        print(f"mosaic construction failed: {exc}", file=sys.stderr)
        return 2
    write_json(os.path.join(out, "cluster.json"), report)
    return 0


# --- run --------------------------------------------------------------------------

def _run_timeseries(run, bpi_series) -> str:
    S = bpi_series.shape[1]
    header = "t,u,u_ref,y,y_ref,mode," + ",".join(
        f"BPI_{i + 1}" for i in range(S))
    lines = [header]
    for t in range(run.T):
        row = [str(t), f"{run.u[t, 0]:.17g}", f"{run.u_ref[t, 0]:.17g}",
               f"{run.y[t, 0]:.17g}", f"{run.y_ref[t, 0]:.17g}",
               str(int(run.s[t]))]
        row += [f"{bpi_series[t, i]:.17g}" for i in range(S)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _run_archive(cfg, run, report) -> dict:
    supports = [[np.nonzero(np.abs(Gi) > 1e-6 * max(1.0, float(np.abs(sol.g).max())))[0].tolist()
                 for Gi in sol.G] for sol in run.solutions]
    return {
        "config_hash": config_hash(cfg),
        "scheme": run.scheme,
        "completed": run.completed,
        "failure": run.failure,
        "u": run.u.ravel().tolist(),
        "y": run.y.ravel().tolist(),
        "mode": run.s.tolist(),
        "u_ref": run.u_ref[: run.T].ravel().tolist(),
        "y_ref": run.y_ref[: run.T].ravel().tolist(),
        "rmse_u": report.rmse_u,
        "rmse_y": report.rmse_y,
        "selector_supports": supports,
        "zero_denominators": report.zero_denominators,
    }


def cmd_run(cfg: dict, out: str) -> int:
    sys_, pwarx = _load_system(cfg)
    path = os.path.join(out, "labels.csv")
    if not os.path.exists(path):
        print(f"labels not found: {path} (run cluster first)", file=sys.stderr)
        return 2
    with open(path) as fh:
        ds = dataset_from_csv(fh.read())
    if ds.s_hat is None:
        print("labels.csv carries no estimated labels", file=sys.stderr)
        return 2
    truth = pwarx_labels(ds, pwarx) if pwarx is not None else ds.s_d
    if truth is None:
        print("true labels unavailable; cannot build the exact mosaic",
              file=sys.stderr)
        return 2
    dcfg = _deepc_config(cfg)
    r = cfg["run"]
    T = int(r["T"])
    try:
        mosaics = {
            "exact": build_mosaic_blocks(partition_dataset(ds, truth),
                                         dcfg.L, dcfg.rho),
            "estimated": build_mosaic_blocks(partition_dataset(ds, ds.s_hat),
                                             dcfg.L, dcfg.rho),
        }
    except InsufficientData as exc:
        print(f"mosaic construction failed: {exc}", file=sys.stderr)
        return 2
    runs = {}
    rmse_rows = []
    solver_failed = False
    for case in [int(c) for c in r["cases"]]:
        u_ref, y_ref = case_references(sys_, case, T, dcfg.L,
                                       switch=int(r["switch"]),
                                       amplitude=float(r["amplitude"]))
        x0 = float(y_ref[0])  # start on-reference at the first level
        row = {"case": case}
        for labeling, mb in mosaics.items():
            for scheme in ("elastic", "cap"):
                run = run_receding_horizon(sys_, mb, dcfg, scheme,
                                           u_ref, y_ref, T, x0=x0)
                solver_failed = solver_failed or not run.completed
                report = summarize_run(run)
                runs[(case, labeling, scheme)] = run
                tag = f"case{case}_{labeling}_{scheme}"
                write_json(os.path.join(out, f"run_{tag}.json"),
                           _run_archive(cfg, run, report))
                write_text(os.path.join(out, f"run_{tag}.csv"),
                           _stamp(cfg) + _run_timeseries(run, report.bpi))
                row[f"rmse_u_{labeling}_{scheme}"] = report.rmse_u
                row[f"rmse_y_{labeling}_{scheme}"] = report.rmse_y
        rmse_rows.append(row)
    # RMSE table mirroring the paper's layout: schemes x {exact, estimated}
    cols = ["case"]
    for labeling in ("exact", "estimated"):
        for scheme in ("elastic", "cap"):
            cols += [f"rmse_u_{labeling}_{scheme}", f"rmse_y_{labeling}_{scheme}"]
    lines = [",".join(cols)]
    for row in rmse_rows:
        lines.append(",".join(
            str(row["case"]) if c == "case" else f"{row[c]:.17g}"
            for c in cols))
    write_text(os.path.join(out, "rmse_table.csv"),
               _stamp(cfg) + "\n".join(lines) + "\n")
    # cost-bound ledgers comparing exact-label and estimated-label runs
    for case in [int(c) for c in r["cases"]]:
        for scheme in ("elastic", "cap"):
            exact = runs[(case, "exact", scheme)]
            miss = runs[(case, "estimated", scheme)]
            if not (exact.completed and miss.completed):
                continue
            ledger = misclassification_bound_check(
                exact, miss, mosaics["exact"], mosaics["estimated"],
                dcfg, scheme)
            write_json(os.path.join(out, f"ledger_case{case}_{scheme}.json"),
                       {"config_hash": config_hash(cfg), "case": case,
                        "scheme": scheme, "steps": ledger,
                        "holds_everywhere": all(e["holds"] for e in ledger)})
    if solver_failed:
        print("one or more runs ended early on solver failure; "
              "partial artifacts kept", file=sys.stderr)
        return 3
    return 0


# --- verify -----------------------------------------------------------------------

def cmd_verify(cfg: dict, out: str) -> int:
    sys_, pwarx = _load_system(cfg)
    if pwarx is None:
        print("verify needs the regressor-partition model (builtin system)",
              file=sys.stderr)
        return 2
    report = verification.run_all(sys_, pwarx, seed=int(cfg["verify"]["seed"]))
    report["config_hash"] = config_hash(cfg)
    report["config"] = cfg
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "verify.json"), report)
    if not report["passed"]:
        failed = [k for k, v in report["suites"].items() if not v["passed"]]
        print(f"verification failed: {failed}", file=sys.stderr)
        return 1
    return 0


# --- entry point ------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pwadeepc",
        description="Data-enabled predictive control of piecewise affine "
                    "systems: data collection, mode clustering, closed-loop "
                    "experiments, and property verification.")
    parser.add_argument("command",
                        choices=["collect", "cluster", "run", "verify"])
    parser.add_argument("--config", required=True,
                        help="TOML/JSON config file or 'builtin:eq75'")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override all seeds in the config")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    handler = {"collect": cmd_collect, "cluster": cmd_cluster,
               "run": cmd_run, "verify": cmd_verify}[args.command]
    try:
        return handler(cfg, args.out)
    except PwaDeepcError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 3 if args.command == "run" else 2


if __name__ == "__main__":
    sys.exit(main())
