"""File formats and run manifests.

Numeric payloads go to columnar CSV (full float precision, so round-trips
are exact); provenance goes to JSON sidecars. Ground-truth parameter draws
live in a quarantined truth/ directory that the loading helpers refuse to
touch, keeping generation diagnostics out of every inference path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dynamics import Dataset, Excitation, ShearChainModel
from .gaussian import SampleSet
from .linear import GaussianSummary, LinearSuite
from .two_stage import StageOneResult

SCHEMA_VERSION = 1
TRUTH_DIR = "truth"


class IOError_(RuntimeError):
    pass


def assert_not_truth_path(path: Path) -> None:
    if TRUTH_DIR in Path(path).parts:
        raise IOError_(
            f"refusing to read ground-truth sidecar '{path}' from an inference path"
        )


def write_csv(path: Path, columns: Sequence[str], data: np.ndarray) -> None:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[1] != len(columns):
        raise ValueError("column names do not match data width")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(
        path, data, delimiter=",", header=",".join(columns), comments="", fmt="%.17g"
    )


def read_csv(path: Path, expect_columns: Optional[Sequence[str]] = None) -> np.ndarray:
    assert_not_truth_path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if expect_columns is not None and list(header) != list(expect_columns):
        raise IOError_(
            f"{path}: expected columns {list(expect_columns)}, found {header}"
        )
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: Path) -> dict:
    assert_not_truth_path(path)
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(raw_config: dict) -> str:
    canon = json.dumps(raw_config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# manifests


@dataclass
class PhaseTimer:
    started: float = 0.0

    def __enter__(self) -> "PhaseTimer":
        self.started = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed = time.perf_counter() - self.started


def write_manifest(
    out_dir: Path,
    phase: str,
    raw_config: dict,
    seeds: dict,
    wall_clock_s: float,
    files: Sequence[Path],
    extra: Optional[dict] = None,
) -> Path:
    """Record what a phase produced: config hash, seeds, timing, checksums."""
    inventory = {
        str(Path(f).relative_to(out_dir)): sha256_file(Path(f)) for f in files
    }
    payload = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "phase": phase,
        "config_hash": config_hash(raw_config),
        "config": raw_config,
        "seeds": seeds,
        "wall_clock_s": round(wall_clock_s, 3),
        "files": inventory,
    }
    if extra:
        payload["extra"] = extra
    path = out_dir / f"manifest_{phase}.json"
    write_json(path, payload)
    return path


def load_manifests(out_dir: Path) -> list[dict]:
    return [read_json(p) for p in sorted(Path(out_dir).glob("manifest_*.json"))]


# ---------------------------------------------------------------------------
# datasets


def save_linear_suite(out_dir: Path, suite: LinearSuite) -> list[Path]:
    ds_dir = Path(out_dir) / "datasets"
    files = []
    a_path = ds_dir / "a_matrix.csv"
    k = suite.A.shape[0]
    write_csv(a_path, [f"a{j + 1}" for j in range(k)], suite.A.T)
    files.append(a_path)
    for i in range(suite.ys.shape[0]):
        p = ds_dir / f"ds{i:04d}.csv"
        write_csv(p, ["y"], suite.ys[i][:, None])
        files.append(p)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "linear",
        "seed": suite.seed,
        "noise_frac": suite.noise_frac,
        "n_datasets": int(suite.ys.shape[0]),
        "n_data_points": int(suite.ys.shape[1]),
        "n_params": k,
        "sigmas": [float(s) for s in suite.sigmas],
    }
    meta_path = ds_dir / "datasets.json"
    write_json(meta_path, meta)
    files.append(meta_path)

    truth_path = Path(out_dir) / TRUTH_DIR / "thetas.csv"
    write_csv(
        truth_path,
        ["dataset"] + [f"theta{j + 1}" for j in range(k)],
        np.column_stack([np.arange(suite.ys.shape[0]), suite.thetas_true]),
    )
    return files


def load_linear_suite(out_dir: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Returns (A, ys, sigmas, meta); never touches the truth sidecar."""
    ds_dir = Path(out_dir) / "datasets"
    meta = read_json(ds_dir / "datasets.json")
    if meta.get("kind") != "linear":
        raise IOError_(f"{ds_dir}: expected linear datasets, found {meta.get('kind')}")
    k = meta["n_params"]
    A = read_csv(ds_dir / "a_matrix.csv", [f"a{j + 1}" for j in range(k)]).T
    ys = np.empty((meta["n_datasets"], meta["n_data_points"]))
    for i in range(meta["n_datasets"]):
        ys[i] = read_csv(ds_dir / f"ds{i:04d}.csv", ["y"])[:, 0]
    return A, ys, np.asarray(meta["sigmas"], dtype=float), meta


def save_dynamic_suite(
    out_dir: Path,
    datasets: Sequence[Dataset],
    thetas_true: np.ndarray,
    exc: Excitation,
    model: ShearChainModel,
    seed: int,
    noise_frac: float,
) -> list[Path]:
    ds_dir = Path(out_dir) / "datasets"
    files = []
    exc_path = ds_dir / "excitation.csv"
    write_csv(exc_path, ["phi"], exc.phi[:, None])
    files.append(exc_path)
    d = model.n_dof
    cols = [f"acc{j + 1}" for j in range(d)]
    for ds in datasets:
        p = ds_dir / f"ds{ds.index:04d}.csv"
        write_csv(p, cols, ds.accelerations.T)
        files.append(p)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "dynamic",
        "seed": int(seed),
        "noise_frac": float(noise_frac),
        "n_datasets": len(datasets),
        "n_time_steps": int(exc.n_steps),
        "dt": exc.dt,
        "excitation_scale": exc.scale,
        "applied_dof": exc.applied_dof,
        "model": {"m0": model.m0, "k0": model.k0, "zeta": model.zeta,
                  "n_dof": model.n_dof},
    }
    meta_path = ds_dir / "datasets.json"
    write_json(meta_path, meta)
    files.append(meta_path)

    truth_path = Path(out_dir) / TRUTH_DIR / "thetas.csv"
    write_csv(
        truth_path,
        ["dataset"] + [f"theta{j + 1}" for j in range(d)],
        np.column_stack([np.arange(len(datasets)), thetas_true]),
    )
    return files


def load_dynamic_suite(
    out_dir: Path,
) -> tuple[list[Dataset], Excitation, ShearChainModel, dict]:
    ds_dir = Path(out_dir) / "datasets"
    meta = read_json(ds_dir / "datasets.json")
    if meta.get("kind") != "dynamic":
        raise IOError_(f"{ds_dir}: expected dynamic datasets, found {meta.get('kind')}")
    phi = read_csv(ds_dir / "excitation.csv", ["phi"])[:, 0]
    exc = Excitation(
        phi=phi, dt=meta["dt"], scale=meta["excitation_scale"],
        applied_dof=meta["applied_dof"],
    )
    mm = meta["model"]
    model = ShearChainModel(
        theta=np.ones(mm["n_dof"]), m0=mm["m0"], k0=mm["k0"], zeta=mm["zeta"]
    )
    cols = [f"acc{j + 1}" for j in range(mm["n_dof"])]
    datasets = []
    for i in range(meta["n_datasets"]):
        acc = read_csv(ds_dir / f"ds{i:04d}.csv", cols).T
        datasets.append(Dataset(index=i, accelerations=acc, dt=meta["dt"]))
    return datasets, exc, model, meta


# ---------------------------------------------------------------------------
# sample sets / stage-1 cache


def sample_columns(kind: str, n_params: int) -> list[str]:
    mu = [f"mu_theta{j + 1}" for j in range(n_params)]
    sg = [f"sigma_theta{j + 1}" for j in range(n_params)]
    if kind == "linear":
        return mu + sg
    return mu + sg + ["mu_sigma", "sigma_sigma"]


def save_sample_set(path: Path, columns: Sequence[str], samples: SampleSet) -> None:
    data = np.column_stack([samples.draws, samples.log_likelihoods])
    write_csv(path, list(columns) + ["log_likelihood"], data)


def load_sample_set(
    path: Path, columns: Sequence[str], seed: Optional[int] = None
) -> SampleSet:
    data = read_csv(path, list(columns) + ["log_likelihood"])
    return SampleSet(draws=data[:, :-1], log_likelihoods=data[:, -1], seed=seed)


def stage1_columns(n_dof: int) -> list[str]:
    return [f"theta{j + 1}" for j in range(n_dof)] + ["sigma"]


def save_stage_one(stage_dir: Path, result: StageOneResult, seed: int, n_dof: int) -> Path:
    path = Path(stage_dir) / f"ds{result.dataset_index:04d}.csv"
    save_sample_set(path, stage1_columns(n_dof), result.samples)
    meta_path = Path(stage_dir) / f"ds{result.dataset_index:04d}.json"
    write_json(
        meta_path,
        {
            "schema_version": SCHEMA_VERSION,
            "dataset_index": result.dataset_index,
            "fingerprint": result.fingerprint,
            "seed": int(seed),
            "n_samples": result.samples.n,
            "log_evidence": result.samples.log_evidence,
        },
    )
    return path


def load_stage_one(
    stage_dir: Path, index: int, n_dof: int, expect_fingerprint: str
) -> Optional[StageOneResult]:
    """Load a cached stage-1 result; None when absent or stale."""
    path = Path(stage_dir) / f"ds{index:04d}.csv"
    meta_path = Path(stage_dir) / f"ds{index:04d}.json"
    if not (path.exists() and meta_path.exists()):
        return None
    meta = read_json(meta_path)
    if meta.get("fingerprint") != expect_fingerprint:
        return None
    samples = load_sample_set(path, stage1_columns(n_dof), seed=meta.get("seed"))
    samples.log_evidence = meta.get("log_evidence")
    return StageOneResult(
        samples=samples,
        dataset_index=index,
        fingerprint=meta["fingerprint"],
    )


# ---------------------------------------------------------------------------
# tables and curves


def save_summary_rows(path: Path, rows: Sequence[tuple]) -> None:
    """Rows of (N_D, param, stat, value), the table layout used throughout."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N_D", "param", "stat", "value"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], f"{r[3]:.17g}"])


def load_summary_rows(path: Path) -> list[tuple]:
    assert_not_truth_path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["N_D", "param", "stat", "value"]:
            raise IOError_(f"{path}: unexpected summary header {header}")
        for rec in reader:
            rows.append((int(rec[0]), rec[1], rec[2], float(rec[3])))
    return rows


def save_curve(path: Path, thresholds, p_f, method: str, seed: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "p_f", "method", "seed"])
        for t, p in zip(thresholds, p_f):
            w.writerow([f"{t:.17g}", f"{p:.17g}", method, seed])


def load_curve(path: Path) -> tuple[np.ndarray, np.ndarray, str, int]:
    assert_not_truth_path(path)
    ts, ps, method, seed = [], [], None, None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["threshold", "p_f", "method", "seed"]:
            raise IOError_(f"{path}: unexpected curve header {header}")
        for rec in reader:
            ts.append(float(rec[0]))
            ps.append(float(rec[1]))
            method, seed = rec[2], int(rec[3])
    return np.asarray(ts), np.asarray(ps), method, seed


def save_gaussian_summary(path: Path, summary: GaussianSummary) -> None:
    write_json(
        path,
        {
            "schema_version": SCHEMA_VERSION,
            "theta_star": [float(v) for v in summary.theta_star],
            "sigma_star": [[float(v) for v in row] for row in summary.sigma_star],
        },
    )


def load_gaussian_summary(path: Path) -> GaussianSummary:
    data = read_json(path)
    return GaussianSummary(
        theta_star=np.asarray(data["theta_star"], dtype=float),
        sigma_star=np.asarray(data["sigma_star"], dtype=float),
    )
