"""Batch CLI: generate -> fit -> reliability -> report.

Each subcommand reads one strict JSON config, writes into the run directory
and drops a per-phase manifest with seeds, wall time and file checksums, so
a finished run is fully reproducible from its config alone.
"""

from __future__ import annotations

import argparse
import csv
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig
from .dynamics import Excitation, ShearChainModel, generate_datasets
from .gaussian import HyperParams, SampleSet
from .linear import (
    LinearLimitState,
    LinearModel,
    cbm_posterior,
    default_hyper_prior,
    default_threshold_grid,
    failure_curve_from_summary,
    failure_probability_linear,
    generate_linear_datasets,
    reduce_datasets,
    sample_hyper_posterior,
)
from .reliability import (
    ThetaPushforward,
    UncertainInput,
    default_displacement_grid,
    failure_prob_cbm,
    failure_prob_full_hyper,
    failure_prob_mean_hyper,
    hyper_mean_pushforward,
    predictive_max_displacement,
)
from .samplers import split_stream
from .two_stage import (
    cbm_dynamic,
    default_dynamic_hyper_prior,
    experiment_fingerprint,
    stage_one,
    stage_two,
    verify_stage_one,
)

# Seed strides keep the reliability sub-phases on disjoint seed ranges.
_SEED_MEAN_CURVE = 10_000
_SEED_FULL_CURVE = 20_000
_SEED_CBM_CURVE = 30_000
_SEED_PREDICTIVE = 40_000


def _hyper_stat_rows(nd: int, columns, samples: SampleSet) -> list[tuple]:
    rows = []
    mean = samples.mean()
    sd = samples.std()
    for j, name in enumerate(columns):
        rows.append((nd, name, "mean", float(mean[j])))
        rows.append((nd, name, "sd", float(sd[j])))
    return rows


def cmd_generate(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> Path:
    gen = cfg.generation
    hp = HyperParams(mu=gen.hyper_mean, sigma=gen.hyper_std)
    with io.PhaseTimer() as timer:
        if cfg.kind == "linear":
            suite = generate_linear_datasets(
                hp,
                n_datasets=gen.n_datasets_max,
                n_data=gen.n_data_points,
                noise_frac=gen.noise_frac,
                seed=gen.seed,
                a_low=gen.a_low,
                a_high=gen.a_high,
            )
            files = io.save_linear_suite(out_dir, suite)
        else:
            model = ShearChainModel(
                theta=np.ones(hp.dim), m0=gen.m0, k0=gen.k0, zeta=gen.zeta
            )
            phi = split_stream(gen.seed, 1).standard_normal(gen.n_time_steps)
            exc = Excitation(
                phi=phi, dt=gen.dt, scale=gen.excitation_scale,
                applied_dof=gen.applied_dof,
            )
            datasets, thetas = generate_datasets(
                hp, gen.n_datasets_max, exc, gen.noise_frac, gen.seed, model=model
            )
            files = io.save_dynamic_suite(
                out_dir, datasets, thetas, exc, model, gen.seed, gen.noise_frac
            )
    return io.write_manifest(
        out_dir, "generate", cfg.raw, {"generation": gen.seed}, timer.elapsed, files
    )


def _fit_linear(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[Path], dict]:
    A, ys, sigmas, _meta = io.load_linear_suite(out_dir)
    k = A.shape[0]
    summaries = reduce_datasets(A, ys, sigmas)
    prior = default_hyper_prior(k)
    columns = io.sample_columns("linear", k)
    fit_dir = out_dir / "fit"
    files: list[Path] = []
    rows: list[tuple] = []
    seeds: dict = {}
    evidences: dict = {}
    for i, nd in enumerate(cfg.generation.n_datasets_list):
        seed = cfg.sampler.seed + i
        hyper = sample_hyper_posterior(summaries[:nd], prior, cfg.sampler.tmcmc, seed)
        path = fit_dir / f"hyper_nd{nd:04d}.csv"
        io.save_sample_set(path, columns, hyper)
        files.append(path)
        rows.extend(_hyper_stat_rows(nd, columns, hyper))
        seeds[f"hyper_nd{nd}"] = seed
        evidences[f"hyper_nd{nd}"] = hyper.log_evidence
    if cfg.with_cbm:
        model = LinearModel(A, float(np.mean(sigmas)))
        summary = cbm_posterior(model, ys, sigmas)
        path = fit_dir / "cbm_posterior.json"
        io.save_gaussian_summary(path, summary)
        files.append(path)
        nd = cfg.generation.n_datasets_max
        for j in range(k):
            rows.append((nd, f"cbm_theta{j + 1}", "mean", float(summary.theta_star[j])))
            rows.append(
                (nd, f"cbm_theta{j + 1}", "sd", float(np.sqrt(summary.sigma_star[j, j])))
            )
    summary_path = fit_dir / "summary.csv"
    io.save_summary_rows(summary_path, rows)
    files.append(summary_path)
    io.write_json(
        fit_dir / "fit.json",
        {
            "schema_version": io.SCHEMA_VERSION,
            "kind": "linear",
            "columns": columns,
            "seeds": seeds,
            "log_evidence": evidences,
        },
    )
    files.append(fit_dir / "fit.json")
    return files, seeds


def _stage_one_task(args):
    dataset, model, exc, tmcmc_cfg, seed = args
    return stage_one(dataset, model, exc, tmcmc_cfg, seed)


def _fit_dynamic(cfg: ExperimentConfig, out_dir: Path, threads: int) -> tuple[list[Path], dict]:
    datasets, exc, model, _meta = io.load_dynamic_suite(out_dir)
    n_use = cfg.generation.n_datasets_max
    datasets = datasets[:n_use]
    stage_dir = out_dir / "stage1"
    stage_dir.mkdir(parents=True, exist_ok=True)
    seeds: dict = {}

    # Stage 1, cached: rerun only datasets with a missing or stale cache.
    results = {}
    pending = []
    for ds in datasets:
        fp = experiment_fingerprint(model, exc, ds)
        seed = cfg.stage1.seed + ds.index
        seeds[f"stage1_ds{ds.index}"] = seed
        cached = io.load_stage_one(stage_dir, ds.index, model.n_dof, fp)
        if cached is not None:
            verify_stage_one(cached, ds, model, exc)
            results[ds.index] = cached
        else:
            pending.append((ds, model, exc, cfg.stage1.tmcmc, seed))
    if pending:
        if threads > 1:
            # spawn: forking is unsafe once the numba threading layer is live
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
                fresh = list(pool.map(_stage_one_task, pending))
        else:
            fresh = [_stage_one_task(t) for t in pending]
        for (ds, *_), res in zip(pending, fresh):
            io.save_stage_one(stage_dir, res, seeds[f"stage1_ds{ds.index}"], model.n_dof)
            results[ds.index] = res
    stage1_results = [results[ds.index] for ds in datasets]

    prior = default_dynamic_hyper_prior(model.n_dof)
    columns = io.sample_columns("dynamic", model.n_dof)
    fit_dir = out_dir / "fit"
    files: list[Path] = []
    rows: list[tuple] = []
    evidences: dict = {}
    for i, nd in enumerate(cfg.generation.n_datasets_list):
        seed = cfg.sampler.seed + i
        hyper = stage_two(
            stage1_results[:nd], prior, cfg.sampler.tmcmc, seed, thin=cfg.atom_thin
        )
        path = fit_dir / f"hyper_nd{nd:04d}.csv"
        io.save_sample_set(path, columns, hyper)
        files.append(path)
        rows.extend(_hyper_stat_rows(nd, columns, hyper))
        seeds[f"hyper_nd{nd}"] = seed
        evidences[f"hyper_nd{nd}"] = hyper.log_evidence
    if cfg.with_cbm:
        seed = cfg.sampler.seed + len(cfg.generation.n_datasets_list)
        cbm = cbm_dynamic(datasets, model, exc, cfg.sampler.tmcmc, seed)
        path = fit_dir / "cbm_samples.csv"
        io.save_sample_set(path, io.stage1_columns(model.n_dof), cbm)
        files.append(path)
        seeds["cbm"] = seed
        nd = cfg.generation.n_datasets_max
        mean = cbm.mean()
        sd = cbm.std()
        for j, name in enumerate(io.stage1_columns(model.n_dof)):
            rows.append((nd, f"cbm_{name}", "mean", float(mean[j])))
            rows.append((nd, f"cbm_{name}", "sd", float(sd[j])))
    summary_path = fit_dir / "summary.csv"
    io.save_summary_rows(summary_path, rows)
    files.append(summary_path)
    io.write_json(
        fit_dir / "fit.json",
        {
            "schema_version": io.SCHEMA_VERSION,
            "kind": "dynamic",
            "columns": columns,
            "seeds": seeds,
            "log_evidence": evidences,
            "atom_thin": cfg.atom_thin,
            "stage1_n_samples": cfg.stage1.tmcmc.n_samples,
        },
    )
    files.append(fit_dir / "fit.json")
    return files, seeds


def cmd_fit(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> Path:
    with io.PhaseTimer() as timer:
        if cfg.kind == "linear":
            files, seeds = _fit_linear(cfg, out_dir)
        else:
            files, seeds = _fit_dynamic(cfg, out_dir, threads)
    return io.write_manifest(
        out_dir, "fit", cfg.raw, seeds, timer.elapsed, files
    )


def _reliability_linear(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[Path], dict, dict]:
    rel = cfg.reliability
    A, ys, sigmas, _meta = io.load_linear_suite(out_dir)
    k = A.shape[0]
    model = LinearModel(A, float(np.mean(sigmas)))
    c = np.ones(A.shape[1]) if rel.limit_state.c == "ones" else np.asarray(
        rel.limit_state.c, dtype=float
    )
    ls = LinearLimitState(b=rel.limit_state.b, c=c)
    nd = cfg.generation.n_datasets_max
    columns = io.sample_columns("linear", k)
    hyper = io.load_sample_set(out_dir / "fit" / f"hyper_nd{nd:04d}.csv", columns)

    a = model.A @ ls.c
    proj_mean = float(hyper.draws[:, :k].mean(axis=0) @ a)
    proj_std = float(np.mean(np.sqrt((hyper.draws[:, k:] ** 2) @ (a**2))))
    thresholds = default_threshold_grid(proj_mean, proj_std, n=rel.n_thresholds)

    rel_dir = out_dir / "reliability"
    files = []
    hbm = failure_probability_linear(hyper, ls, model, thresholds)
    p = rel_dir / "curve_hbm.csv"
    io.save_curve(p, hbm.thresholds, hbm.p_f, "hbm", rel.seed)
    files.append(p)
    extra = {"p_f_at_b": {"hbm": hbm.p_f_at_b}, "threshold_b": ls.b}
    if cfg.with_cbm:
        summary = io.load_gaussian_summary(out_dir / "fit" / "cbm_posterior.json")
        cbm = failure_curve_from_summary(summary, ls, model, thresholds)
        p = rel_dir / "curve_cbm.csv"
        io.save_curve(p, cbm.thresholds, cbm.p_f, "cbm", rel.seed)
        files.append(p)
        extra["p_f_at_b"]["cbm"] = cbm.p_f_at_b
    return files, {"reliability": rel.seed}, extra


def _reliability_dynamic(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[Path], dict, dict]:
    rel = cfg.reliability
    _datasets, exc, model, meta = io.load_dynamic_suite(out_dir)
    uin = UncertainInput(
        n_inputs=meta["n_time_steps"], dt=exc.dt, scale=exc.scale,
        applied_dof=exc.applied_dof,
    )
    nd = cfg.generation.n_datasets_max
    columns = io.sample_columns("dynamic", model.n_dof)
    hyper = io.load_sample_set(out_dir / "fit" / f"hyper_nd{nd:04d}.csv", columns)

    thresholds = default_displacement_grid(
        hyper, model, uin, seed=rel.seed, n_thresholds=rel.n_thresholds,
        dof_select=rel.dof_select,
    )
    rel_dir = out_dir / "reliability"
    files = []
    extra: dict = {"censored": {}}

    mean_curve = failure_prob_mean_hyper(
        hyper, thresholds, model, uin, rel.subset,
        seed=rel.seed + _SEED_MEAN_CURVE, dof_select=rel.dof_select,
    )
    p = rel_dir / "curve_hbm_mean.csv"
    io.save_curve(p, mean_curve.thresholds, mean_curve.p_f, "hbm_mean", rel.seed)
    files.append(p)
    extra["censored"]["hbm_mean"] = [bool(v) for v in mean_curve.censored]

    full_curve = failure_prob_full_hyper(
        hyper, rel.hyper_subsample, thresholds, model, uin, rel.subset,
        seed=rel.seed + _SEED_FULL_CURVE, dof_select=rel.dof_select,
    )
    p = rel_dir / "curve_hbm_full.csv"
    io.save_curve(p, full_curve.thresholds, full_curve.p_f, "hbm_full", rel.seed)
    files.append(p)
    extra["censored"]["hbm_full"] = [bool(v) for v in full_curve.censored]
    extra["hyper_subsample"] = rel.hyper_subsample

    pushes = {"hbm_mean": hyper_mean_pushforward(hyper, model.n_dof)}
    hyper_sets = {"hbm_full": hyper}
    if cfg.with_cbm:
        cbm_samples = io.load_sample_set(
            out_dir / "fit" / "cbm_samples.csv", io.stage1_columns(model.n_dof)
        )
        cbm_curve = failure_prob_cbm(
            cbm_samples, thresholds, model, uin, rel.subset,
            seed=rel.seed + _SEED_CBM_CURVE, dof_select=rel.dof_select,
        )
        p = rel_dir / "curve_cbm.csv"
        io.save_curve(p, cbm_curve.thresholds, cbm_curve.p_f, "cbm", rel.seed)
        files.append(p)
        extra["censored"]["cbm"] = [bool(v) for v in cbm_curve.censored]
        pushes["cbm"] = ThetaPushforward.from_sample_moments(
            cbm_samples.draws[:, : model.n_dof]
        )
    pushes["hbm_full"] = pushes["hbm_mean"]  # placeholder; resampled per draw below

    predictive = predictive_max_displacement(
        pushes, model, uin, rel.predictive_draws,
        seed=rel.seed + _SEED_PREDICTIVE, hyper_samples=hyper_sets,
        dof_select=rel.dof_select,
    )
    pred_path = rel_dir / "predictive_max_disp.csv"
    pred_path.parent.mkdir(parents=True, exist_ok=True)
    with open(pred_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "value"])
        for method, vals in sorted(predictive.items()):
            for v in vals:
                w.writerow([method, f"{v:.17g}"])
    files.append(pred_path)
    return files, {"reliability": rel.seed}, extra


def cmd_reliability(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> Path:
    if cfg.reliability is None:
        raise ConfigError("config has no 'reliability' block")
    with io.PhaseTimer() as timer:
        if cfg.kind == "linear":
            files, seeds, extra = _reliability_linear(cfg, out_dir)
        else:
            files, seeds, extra = _reliability_dynamic(cfg, out_dir)
    return io.write_manifest(
        out_dir, "reliability", cfg.raw, seeds, timer.elapsed, files, extra=extra
    )


def cmd_report(out_dir: Path) -> Path:
    manifests = io.load_manifests(out_dir)
    manifests = [m for m in manifests if m.get("phase") != "report"]
    if not manifests:
        raise RuntimeError(f"no completed phases found in {out_dir}")
    hashes = {m["config_hash"] for m in manifests}
    if len(hashes) > 1:
        detail = ", ".join(
            f"{m['phase']}={m['config_hash'][:12]}" for m in manifests
        )
        raise RuntimeError(f"conflicting config hashes across phases: {detail}")

    report: dict = {
        "schema_version": io.SCHEMA_VERSION,
        "tool_version": manifests[0]["tool_version"],
        "config_hash": manifests[0]["config_hash"],
        "phases": {
            m["phase"]: {
                "seeds": m["seeds"],
                "wall_clock_s": m["wall_clock_s"],
                "n_files": len(m["files"]),
            }
            for m in manifests
        },
    }
    summary_path = out_dir / "fit" / "summary.csv"
    if summary_path.exists():
        rows = io.load_summary_rows(summary_path)
        tables: dict = {}
        for nd, param, stat, value in rows:
            tables.setdefault(str(nd), {}).setdefault(param, {})[stat] = value
        report["hyper_summary"] = tables
    curve_files = sorted((out_dir / "reliability").glob("curve_*.csv")) if (
        out_dir / "reliability"
    ).exists() else []
    if curve_files:
        report["curves"] = {}
        for p in curve_files:
            ts, ps, method, seed = io.load_curve(p)
            report["curves"][method] = {
                "file": str(p.relative_to(out_dir)),
                "seed": seed,
                "n_points": len(ts),
            }
    rel_manifest = [m for m in manifests if m["phase"] == "reliability"]
    if rel_manifest and "extra" in rel_manifest[0]:
        report["reliability_extra"] = rel_manifest[0]["extra"]
    path = out_dir / "report.json"
    io.write_json(path, report)
    return path


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes for stage-1 fits")
    common.add_argument("--seed", type=int, default=None,
                        help="override every config seed from this base")
    parser = argparse.ArgumentParser(
        prog="hbmrel",
        description="Hierarchical Bayesian model updating and reliability runs",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "fit", "reliability", "report"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="override config output_dir")
    args = parser.parse_args(argv)

    try:
        cfg = ExperimentConfig.from_file(args.config)
        if args.seed is not None:
            cfg.override_seeds(args.seed)
        out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            manifest = cmd_generate(cfg, out_dir, threads=args.threads)
        elif args.command == "fit":
            manifest = cmd_fit(cfg, out_dir, threads=args.threads)
        elif args.command == "reliability":
            manifest = cmd_reliability(cfg, out_dir, threads=args.threads)
        else:
            manifest = cmd_report(out_dir)
    except (ConfigError, RuntimeError, OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
