"""Experiment configuration: strict JSON parsing with no silent defaulting.

Every key is either required or has a documented default below; unknown
keys are rejected with the offending name. All random seeds must be spelled
out in the file (or overridden explicitly on the command line).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .samplers import TmcmcConfig
from .reliability import SubsetSimConfig


class ConfigError(ValueError):
    """Raised for unknown, missing, or malformed configuration entries."""


class _Block:
    """Dict wrapper that tracks consumed keys and rejects leftovers."""

    def __init__(self, name: str, data: Any):
        if not isinstance(data, dict):
            raise ConfigError(f"config block '{name}' must be an object")
        self.name = name
        self.data = dict(data)

    def require(self, key: str):
        if key not in self.data:
            raise ConfigError(f"missing required key '{self.name}.{key}'")
        return self.data.pop(key)

    def optional(self, key: str, default):
        return self.data.pop(key, default)

    def finish(self) -> None:
        if self.data:
            extra = ", ".join(sorted(self.data))
            raise ConfigError(f"unknown key(s) in '{self.name}': {extra}")


def _floats(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ConfigError(f"'{name}' must be a non-empty list of numbers")
    return arr


@dataclass
class GenerationConfig:
    hyper_mean: np.ndarray
    hyper_std: np.ndarray
    n_datasets_list: list[int]
    noise_frac: float
    seed: int
    # linear
    n_data_points: int = 0
    a_low: float = 1.0
    a_high: float = 5.0
    # dynamic
    n_time_steps: int = 0
    dt: float = 0.0
    excitation_scale: float = 1.0
    applied_dof: int = 2
    m0: float = 1.0
    k0: float = 1800.0
    zeta: float = 0.02

    @property
    def n_datasets_max(self) -> int:
        return max(self.n_datasets_list)


@dataclass
class SamplerConfig:
    tmcmc: TmcmcConfig
    seed: int


@dataclass
class LimitStateConfig:
    b: float
    c: Any  # "ones" or list of weights


@dataclass
class ReliabilityConfig:
    seed: int
    limit_state: Optional[LimitStateConfig] = None  # linear only
    n_thresholds: int = 20
    subset: SubsetSimConfig = field(default_factory=SubsetSimConfig)
    hyper_subsample: int = 100
    predictive_draws: int = 10000
    dof_select: int = -1


@dataclass
class ExperimentConfig:
    kind: str
    generation: GenerationConfig
    sampler: SamplerConfig
    output_dir: str
    raw: dict
    stage1: Optional[SamplerConfig] = None
    reliability: Optional[ReliabilityConfig] = None
    atom_thin: int = 1
    with_cbm: bool = True

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        raw = json.loads(json.dumps(data))  # defensive deep copy
        top = _Block("<top>", data)
        kind = top.require("kind")
        if kind not in ("linear", "dynamic"):
            raise ConfigError(f"kind must be 'linear' or 'dynamic', got '{kind}'")
        output_dir = str(top.require("output_dir"))

        gen = _parse_generation(kind, _Block("generation", top.require("generation")))
        sampler = _parse_sampler("sampler", _Block("sampler", top.require("sampler")))

        stage1 = None
        atom_thin = 1
        if kind == "dynamic":
            stage1 = _parse_sampler("stage1", _Block("stage1", top.require("stage1")))
            atom_thin = int(top.optional("atom_thin", 1))
            if atom_thin < 1:
                raise ConfigError("atom_thin must be >= 1")

        with_cbm = bool(top.optional("cbm", True))

        reliability = None
        if "reliability" in top.data:
            reliability = _parse_reliability(
                kind, _Block("reliability", top.optional("reliability", None))
            )
        top.finish()

        return cls(
            kind=kind,
            generation=gen,
            sampler=sampler,
            stage1=stage1,
            reliability=reliability,
            atom_thin=atom_thin,
            with_cbm=with_cbm,
            output_dir=output_dir,
            raw=raw,
        )

    def override_seeds(self, base: int) -> None:
        """Replace every block seed deterministically from one base seed."""
        self.generation.seed = int(base)
        self.sampler.seed = int(base) + 1
        if self.stage1 is not None:
            self.stage1.seed = int(base) + 2
        if self.reliability is not None:
            self.reliability.seed = int(base) + 3


def _parse_generation(kind: str, blk: _Block) -> GenerationConfig:
    hyper_mean = _floats("generation.hyper_mean", blk.require("hyper_mean"))
    hyper_std = _floats("generation.hyper_std", blk.require("hyper_std"))
    if hyper_mean.shape != hyper_std.shape:
        raise ConfigError("hyper_mean and hyper_std must have equal length")
    nd_list = [int(v) for v in blk.require("n_datasets_list")]
    if not nd_list or any(v < 1 for v in nd_list):
        raise ConfigError("n_datasets_list must be a non-empty list of positive ints")
    noise_frac = float(blk.require("noise_frac"))
    seed = int(blk.require("seed"))

    kwargs: dict[str, Any] = {}
    if kind == "linear":
        kwargs["n_data_points"] = int(blk.require("n_data_points"))
        kwargs["a_low"] = float(blk.optional("a_low", 1.0))
        kwargs["a_high"] = float(blk.optional("a_high", 5.0))
    else:
        kwargs["n_time_steps"] = int(blk.require("n_time_steps"))
        kwargs["dt"] = float(blk.require("dt"))
        kwargs["excitation_scale"] = float(blk.optional("excitation_scale", 1.0))
        kwargs["applied_dof"] = int(blk.optional("applied_dof", 2))
        kwargs["m0"] = float(blk.optional("m0", 1.0))
        kwargs["k0"] = float(blk.optional("k0", 1800.0))
        kwargs["zeta"] = float(blk.optional("zeta", 0.02))
    blk.finish()
    return GenerationConfig(
        hyper_mean=hyper_mean,
        hyper_std=hyper_std,
        n_datasets_list=nd_list,
        noise_frac=noise_frac,
        seed=seed,
        **kwargs,
    )


def _parse_sampler(name: str, blk: _Block) -> SamplerConfig:
    n_samples = int(blk.require("n_samples"))
    seed = int(blk.require("seed"))
    cfg = TmcmcConfig(
        n_samples=n_samples,
        proposal_scale=float(blk.optional("proposal_scale", 0.2)),
        target_cov_of_weights=float(blk.optional("target_cov_of_weights", 1.0)),
        max_stages=int(blk.optional("max_stages", 100)),
        chain_length_per_sample=int(blk.optional("chain_length_per_sample", 1)),
    )
    blk.finish()
    return SamplerConfig(tmcmc=cfg, seed=seed)


def _parse_reliability(kind: str, blk: _Block) -> ReliabilityConfig:
    seed = int(blk.require("seed"))
    limit_state = None
    if kind == "linear":
        ls_blk = _Block("reliability.limit_state", blk.require("limit_state"))
        b = float(ls_blk.require("b"))
        c = ls_blk.require("c")
        if not (c == "ones" or isinstance(c, list)):
            raise ConfigError("limit_state.c must be 'ones' or a list of weights")
        ls_blk.finish()
        limit_state = LimitStateConfig(b=b, c=c)
        n_thresholds = int(blk.optional("n_thresholds", 50))
        subset = SubsetSimConfig()
        hyper_subsample = 0
        predictive_draws = 0
        dof_select = -1
    else:
        sub = _Block("reliability.subset", blk.optional("subset", {}))
        subset = SubsetSimConfig(
            n_per_level=int(sub.optional("n_per_level", 1000)),
            p0=float(sub.optional("p0", 0.1)),
            max_levels=int(sub.optional("max_levels", 12)),
            proposal_std=float(sub.optional("proposal_std", 1.0)),
        )
        sub.finish()
        n_thresholds = int(blk.optional("n_thresholds", 20))
        hyper_subsample = int(blk.optional("hyper_subsample", 100))
        predictive_draws = int(blk.optional("predictive_draws", 10000))
        dof_select = int(blk.optional("dof_select", -1))
    blk.finish()
    return ReliabilityConfig(
        seed=seed,
        limit_state=limit_state,
        n_thresholds=n_thresholds,
        subset=subset,
        hyper_subsample=hyper_subsample,
        predictive_draws=predictive_draws,
        dof_select=dof_select,
    )
