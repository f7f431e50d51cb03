"""Two-stage hierarchical inference for the dynamic model.

Stage 1 samples each dataset's likelihood (the expensive part, one forward
integration per evaluation). Stage 2 samples the hyper posterior using only
the cached stage-1 draws: each dataset's marginal likelihood is the average
population density over its stored atoms, so no model runs occur.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit, prange

from .dynamics import (
    Dataset,
    Excitation,
    ShearChainModel,
    _chain_stiffness,
    _modal_damping,
    _newmark_core,
    _response_batch,
)
from .gaussian import SampleSet
from .samplers import BoxPrior, TargetDensity, TmcmcConfig, tmcmc

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DynamicParams:
    """Stiffness multipliers plus the relative prediction-error std."""

    theta: np.ndarray
    sigma_pred: float

    def __post_init__(self) -> None:
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if np.any(self.theta <= 0.0):
            raise ValueError("theta components must be > 0")
        if self.sigma_pred <= 0.0:
            raise ValueError("sigma_pred must be > 0")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, [self.sigma_pred]])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "DynamicParams":
        x = np.asarray(x, dtype=float)
        return cls(theta=x[:-1], sigma_pred=float(x[-1]))


@dataclass
class DynamicHyperParams:
    """Population parameters of (theta, sigma): independent Gaussian components."""

    mu_theta: np.ndarray
    sigma_theta: np.ndarray
    mu_sigma: float
    sigma_sigma: float

    def __post_init__(self) -> None:
        self.mu_theta = np.atleast_1d(np.asarray(self.mu_theta, dtype=float))
        self.sigma_theta = np.atleast_1d(np.asarray(self.sigma_theta, dtype=float))
        if self.mu_theta.shape != self.sigma_theta.shape:
            raise ValueError("mu_theta and sigma_theta must have equal length")
        if np.any(self.sigma_theta <= 0.0) or self.sigma_sigma <= 0.0:
            raise ValueError("all population stds must be > 0")
        if self.mu_sigma <= 0.0:
            raise ValueError("mu_sigma must be > 0")

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.mu_theta, self.sigma_theta, [self.mu_sigma, self.sigma_sigma]]
        )

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "DynamicHyperParams":
        x = np.asarray(x, dtype=float)
        d = (x.shape[0] - 2) // 2
        return cls(
            mu_theta=x[:d],
            sigma_theta=x[d : 2 * d],
            mu_sigma=float(x[2 * d]),
            sigma_sigma=float(x[2 * d + 1]),
        )


@dataclass
class StageOneResult:
    """Cached per-dataset likelihood samples over (theta, sigma)."""

    samples: SampleSet
    dataset_index: int
    fingerprint: str


def default_stage1_prior(n_dof: int = 3) -> BoxPrior:
    """Broad uniform sampling prior: theta in [0.5, 1.5], sigma in (1e-4, 0.1]."""
    lows = np.concatenate([np.full(n_dof, 0.5), [1e-4]])
    highs = np.concatenate([np.full(n_dof, 1.5), [0.1]])
    return BoxPrior(lows, highs)


def default_dynamic_hyper_prior(n_dof: int = 3) -> BoxPrior:
    """Uniform box over (mu_theta, sigma_theta, mu_sigma, sigma_sigma)."""
    lows = np.concatenate([np.full(n_dof, 0.5), np.full(n_dof, 1e-4), [1e-4, 1e-6]])
    highs = np.concatenate([np.full(n_dof, 1.5), np.full(n_dof, 0.3), [0.1, 0.05]])
    return BoxPrior(lows, highs)


def default_cbm_prior(n_dof: int = 3) -> BoxPrior:
    """Pooled-fit prior: theta as in stage 1, sigma up to 1.

    Pooling datasets that were generated at different thetas turns the
    between-dataset variability into prediction error, so the pooled sigma
    needs far more headroom than any single-dataset fit.
    """
    lows = np.concatenate([np.full(n_dof, 0.5), [1e-4]])
    highs = np.concatenate([np.full(n_dof, 1.5), [1.0]])
    return BoxPrior(lows, highs)


def experiment_fingerprint(
    model: ShearChainModel, exc: Excitation, dataset: Dataset
) -> str:
    """Hash of everything a stage-1 run conditions on."""
    h = hashlib.sha256()
    for arr in (
        model.theta, np.array([model.m0, model.k0, model.zeta]),
        exc.phi, np.array([exc.dt, exc.scale, float(exc.applied_dof)]),
        dataset.accelerations, np.array([dataset.dt, float(dataset.index)]),
    ):
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    return h.hexdigest()[:16]


@njit(cache=True, parallel=True)
def _dynamic_loglik_batch(params, y, phi, dt, m0, k0, zeta, scale, dof):
    """Gaussian prediction-error log likelihood for a batch of (theta, sigma) rows.

    Error std per channel is sigma * RMS of that channel's predicted
    response; one forward integration per row.
    """
    n = params.shape[0]
    d = y.shape[0]
    nt = y.shape[1]
    out = np.empty(n)
    for i in prange(n):
        K = _chain_stiffness(params[i, :d], k0)
        C = _modal_damping(K, m0, zeta)
        forces = np.zeros((d, nt))
        for t in range(nt):
            forces[dof, t] = scale * phi[t]
        x0 = np.zeros(d)
        v0 = np.zeros(d)
        _, _, acc = _newmark_core(m0, C, K, forces, dt, x0, v0)
        sig = params[i, d]
        total = 0.0
        for c in range(d):
            ms = 0.0
            rss = 0.0
            for t in range(nt):
                ms += acc[c, t] * acc[c, t]
                r = y[c, t] - acc[c, t]
                rss += r * r
            rms = np.sqrt(ms / nt)
            s = sig * rms
            total += -0.5 * nt * _LOG_2PI - nt * np.log(s) - 0.5 * rss / (s * s)
        out[i] = total
    return out


def dynamic_loglik_batch(
    params: np.ndarray, dataset: Dataset, model: ShearChainModel, exc: Excitation
) -> np.ndarray:
    params = np.ascontiguousarray(np.atleast_2d(np.asarray(params, dtype=float)))
    y = np.ascontiguousarray(dataset.accelerations)
    if y.shape[0] != model.n_dof:
        raise ValueError("dataset channel count must match the model DOF count")
    if params.shape[1] != model.n_dof + 1:
        raise ValueError("parameter rows must be (theta_1..d, sigma)")
    return _dynamic_loglik_batch(
        params, y, np.ascontiguousarray(exc.phi), exc.dt, model.m0, model.k0,
        model.zeta, exc.scale, exc.applied_dof,
    )


def log_likelihood_dynamic(
    params: DynamicParams, dataset: Dataset, model: ShearChainModel, exc: Excitation
) -> float:
    """Log likelihood of one dataset at one parameter point."""
    return float(dynamic_loglik_batch(params.as_vector()[None, :], dataset, model, exc)[0])


def stage_one(
    dataset: Dataset,
    model: ShearChainModel,
    exc: Excitation,
    cfg: TmcmcConfig,
    seed: int,
    prior: Optional[BoxPrior] = None,
) -> StageOneResult:
    """Sample one dataset's likelihood over (theta, sigma) with TMCMC."""
    if prior is None:
        prior = default_stage1_prior(model.n_dof)

    def loglike(x: np.ndarray) -> np.ndarray:
        return dynamic_loglik_batch(x, dataset, model, exc)

    target = TargetDensity.from_box_prior(prior, loglike)
    samples = tmcmc(target, cfg, seed)
    return StageOneResult(
        samples=samples,
        dataset_index=dataset.index,
        fingerprint=experiment_fingerprint(model, exc, dataset),
    )


def verify_stage_one(
    result: StageOneResult,
    dataset: Dataset,
    model: ShearChainModel,
    exc: Excitation,
    n_rows: int = 10,
) -> None:
    """Spot-check that stored log-likelihoods reproduce from the stored draws."""
    if result.samples.log_likelihoods is None:
        raise ValueError("stage-1 result carries no log-likelihoods")
    idx = np.linspace(0, result.samples.n - 1, min(n_rows, result.samples.n)).astype(int)
    recomputed = dynamic_loglik_batch(result.samples.draws[idx], dataset, model, exc)
    stored = result.samples.log_likelihoods[idx]
    if not np.allclose(recomputed, stored, rtol=1e-9, atol=1e-6):
        worst = int(np.argmax(np.abs(recomputed - stored)))
        raise ValueError(
            f"stage-1 cache for dataset {result.dataset_index} is stale: stored "
            f"log-likelihood {stored[worst]:.6f} != recomputed {recomputed[worst]:.6f}"
        )


def _atoms_array(stage1: Sequence[StageOneResult]) -> np.ndarray:
    if len(stage1) < 1:
        raise ValueError("need at least one stage-1 result")
    sizes = {r.samples.n for r in stage1}
    if len(sizes) != 1:
        raise ValueError("stage-1 results must all have the same sample count")
    return np.ascontiguousarray(np.stack([r.samples.draws for r in stage1]))


@njit(cache=True, parallel=True)
def _mixture_loglik_batch(x, atoms, thin):
    """Sum over datasets of log mean_l N(atom_l | population), batched over x rows.

    The population factorizes into independent normals on each of the p
    parameter components; the inner log-sum-exp runs in a fixed atom order.
    """
    n = x.shape[0]
    n_d, n_s, p = atoms.shape
    d = p - 1
    out = np.empty(n)
    for j in prange(n):
        m = np.empty(p)
        s = np.empty(p)
        for k in range(d):
            m[k] = x[j, k]
            s[k] = x[j, d + k]
        m[d] = x[j, 2 * d]
        s[d] = x[j, 2 * d + 1]
        const = -0.5 * p * _LOG_2PI
        for k in range(p):
            const -= np.log(s[k])
        total = 0.0
        for i in range(n_d):
            run_max = -np.inf
            run_sum = 0.0
            count = 0
            for l in range(0, n_s, thin):
                q = 0.0
                for k in range(p):
                    z = (atoms[i, l, k] - m[k]) / s[k]
                    q += z * z
                val = -0.5 * q
                if val > run_max:
                    run_sum = run_sum * np.exp(run_max - val) + 1.0
                    run_max = val
                else:
                    run_sum += np.exp(val - run_max)
                count += 1
            total += const + run_max + np.log(run_sum) - np.log(count)
        out[j] = total
    return out


def hyper_log_posterior_mc(
    hp: DynamicHyperParams,
    stage1: Sequence[StageOneResult],
    prior: BoxPrior,
    thin: int = 1,
) -> float:
    """Monte-Carlo marginal hyper posterior from cached stage-1 atoms.

    Evaluates log p(hp) plus, per dataset, the log of the average population
    density over that dataset's atoms. Never touches the forward model.
    """
    atoms = _atoms_array(stage1)
    x = hp.as_vector()[None, :]
    lp = float(prior.logpdf(x)[0])
    if not np.isfinite(lp):
        return -np.inf
    return lp + float(_mixture_loglik_batch(x, atoms, int(thin))[0])


def stage_two(
    stage1: Sequence[StageOneResult],
    prior: BoxPrior,
    cfg: TmcmcConfig,
    seed: int,
    thin: int = 1,
) -> SampleSet:
    """TMCMC over the hyper space using only stage-1 atoms.

    `thin` uses every thin-th atom in the per-dataset averages; anything but
    1 trades accuracy for speed and must be reported with results.
    """
    if len(stage1) < 2:
        raise ValueError("stage_two needs at least two datasets")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    atoms = _atoms_array(stage1)

    def loglike(x: np.ndarray) -> np.ndarray:
        return _mixture_loglik_batch(
            np.ascontiguousarray(np.atleast_2d(x)), atoms, int(thin)
        )

    target = TargetDensity.from_box_prior(prior, loglike)
    return tmcmc(target, cfg, seed)


def cbm_dynamic(
    datasets: Sequence[Dataset],
    model: ShearChainModel,
    exc: Excitation,
    cfg: TmcmcConfig,
    seed: int,
    prior: Optional[BoxPrior] = None,
) -> SampleSet:
    """Pooled single-level posterior over (theta, sigma): all datasets combined.

    The pooled Gaussian likelihood only needs the per-channel sum and
    sum-of-squares of the data, so each evaluation still costs one forward
    integration regardless of the dataset count.
    """
    if len(datasets) < 1:
        raise ValueError("need at least one dataset")
    if prior is None:
        prior = default_cbm_prior(model.n_dof)
    y_sum = np.zeros_like(datasets[0].accelerations)
    y_sq = np.zeros(model.n_dof)
    for ds in datasets:
        if ds.accelerations.shape != y_sum.shape:
            raise ValueError("datasets must share a common shape")
        y_sum += ds.accelerations
        y_sq += np.sum(ds.accelerations**2, axis=1)
    n_sets = len(datasets)
    nt = y_sum.shape[1]
    d = model.n_dof
    phi = np.ascontiguousarray(exc.phi)

    def loglike(x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(x))
        thetas = np.ascontiguousarray(x[:, :d])
        sig = x[:, d]
        _, acc = _response_batch(
            thetas, phi, exc.dt, model.m0, model.k0, model.zeta,
            exc.scale, exc.applied_dof,
        )
        rms = np.sqrt(np.mean(acc**2, axis=2))  # (n, d)
        s = sig[:, None] * rms
        # sum_i sum_t (y_it - yhat_t)^2, expanded through the pooled statistics
        cross = np.einsum("kct,ct->kc", acc, y_sum)
        self_sq = np.sum(acc**2, axis=2)
        rss = y_sq[None, :] - 2.0 * cross + n_sets * self_sq
        per_channel = (
            -0.5 * n_sets * nt * _LOG_2PI
            - n_sets * nt * np.log(s)
            - 0.5 * rss / s**2
        )
        return np.sum(per_channel, axis=1)

    target = TargetDensity.from_box_prior(prior, loglike)
    return tmcmc(target, cfg, seed)
