"""Analytical hierarchical inference and reliability for the linear map model.

The observation model is y = A^T theta + noise with known noise level, so
each dataset collapses to a Gaussian over theta and the population posterior
over (mu, sigma) is available in closed form up to the prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .gaussian import (
    GaussianNd,
    HyperParams,
    SampleSet,
    convolve_marginal,
    std_normal_cdf,
    std_normal_quantile,
)
from .samplers import BoxPrior, TargetDensity, TmcmcConfig, split_stream, tmcmc

_LOG_2PI = float(np.log(2.0 * np.pi))


class LinearModel:
    """Known system matrix A (n_params x n_data) and measurement-noise std."""

    def __init__(self, A: np.ndarray, sigma_noise: float):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if sigma_noise <= 0.0:
            raise ValueError("sigma_noise must be > 0")
        self.A = A
        self.sigma_noise = float(sigma_noise)
        gram = A @ A.T
        try:
            self._gram_cho = cho_factor(gram)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                f"A A^T is rank deficient (shape {A.shape}); datasets cannot "
                "identify all parameters"
            ) from exc

    @property
    def n_params(self) -> int:
        return self.A.shape[0]

    @property
    def n_data(self) -> int:
        return self.A.shape[1]

    def predict(self, theta: np.ndarray) -> np.ndarray:
        return self.A.T @ np.asarray(theta, dtype=float)


@dataclass
class GaussianSummary:
    """Per-dataset Gaussian reduction: posterior mean and covariance of theta."""

    theta_star: np.ndarray
    sigma_star: np.ndarray

    def __post_init__(self) -> None:
        self.theta_star = np.atleast_1d(np.asarray(self.theta_star, dtype=float))
        self.sigma_star = np.atleast_2d(np.asarray(self.sigma_star, dtype=float))
        k = self.theta_star.shape[0]
        if self.sigma_star.shape != (k, k):
            raise ValueError("sigma_star shape inconsistent with theta_star")


@dataclass
class LinearLimitState:
    """Exceedance limit state G(theta) = b - (A c)^T theta."""

    b: float
    c: np.ndarray

    def __post_init__(self) -> None:
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if not np.any(self.c != 0.0):
            raise ValueError("weighting vector c must not be all zero")


def reduce_dataset(model: LinearModel, y: np.ndarray) -> GaussianSummary:
    """Collapse one dataset to its Gaussian posterior over theta.

    theta* solves the normal equations (the least-squares fit of y), and
    sigma* = sigma_noise^2 (A A^T)^{-1}.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (model.n_data,):
        raise ValueError(f"expected {model.n_data} data points, got {y.shape}")
    theta_star = cho_solve(model._gram_cho, model.A @ y)
    sigma_star = model.sigma_noise**2 * cho_solve(
        model._gram_cho, np.eye(model.n_params)
    )
    sigma_star = 0.5 * (sigma_star + sigma_star.T)
    return GaussianSummary(theta_star, sigma_star)


def reduce_datasets(
    A: np.ndarray, ys: np.ndarray, sigmas: np.ndarray
) -> list[GaussianSummary]:
    """Gaussian reductions for many datasets sharing one A (one factorization)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if ys.shape[0] != sigmas.shape[0]:
        raise ValueError("one sigma per dataset required")
    try:
        cho = cho_factor(A @ A.T)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"A A^T is rank deficient (shape {A.shape})") from exc
    theta_stars = cho_solve(cho, A @ ys.T).T
    base = cho_solve(cho, np.eye(A.shape[0]))
    base = 0.5 * (base + base.T)
    return [
        GaussianSummary(theta_stars[i], sigmas[i] ** 2 * base)
        for i in range(ys.shape[0])
    ]


def default_hyper_prior(n_params: int) -> BoxPrior:
    """Uniform box over (mu_1..k, sigma_1..k): mu in [0.5, 1.5], sigma in (1e-4, 0.5]."""
    lows = np.concatenate([np.full(n_params, 0.5), np.full(n_params, 1e-4)])
    highs = np.concatenate([np.full(n_params, 1.5), np.full(n_params, 0.5)])
    return BoxPrior(lows, highs)


def _summary_arrays(summaries: Sequence[GaussianSummary]) -> tuple[np.ndarray, np.ndarray]:
    t_stars = np.stack([s.theta_star for s in summaries])
    s_stars = np.stack([s.sigma_star for s in summaries])
    return t_stars, s_stars


def _hyper_log_likelihood_batch(
    x: np.ndarray, t_stars: np.ndarray, s_stars: np.ndarray, block: int = 256
) -> np.ndarray:
    """Sum over datasets of log N(mu | theta*_i, diag(sigma^2) + Sigma*_i).

    x has rows (mu_1..k, sigma_1..k); evaluation is batched over rows and
    datasets with stacked Cholesky factorizations.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n_d, k = t_stars.shape
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], block):
        xx = x[start : start + block]
        b = xx.shape[0]
        mu, sig = xx[:, :k], xx[:, k:]
        cov = np.broadcast_to(s_stars, (b, n_d, k, k)).copy()
        cov[:, :, np.arange(k), np.arange(k)] += (sig**2)[:, None, :]
        chol = np.linalg.cholesky(cov)
        diff = mu[:, None, :] - t_stars[None, :, :]
        ysol = np.linalg.solve(chol, diff[..., None])[..., 0]
        quad = np.sum(ysol**2, axis=-1)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        out[start : start + block] = np.sum(
            -0.5 * (k * _LOG_2PI + logdet + quad), axis=-1
        )
    return out


def hyper_log_posterior(
    hp: HyperParams, summaries: Sequence[GaussianSummary], prior: BoxPrior
) -> float:
    """Log posterior density of the hyper parameters given dataset summaries.

    Exact up to the evidence constant: log prior plus, for each dataset, the
    log of the Gaussian obtained by marginalizing theta out of the
    population-prior / dataset-posterior product. No model runs involved.
    """
    if len(summaries) < 1:
        raise ValueError("need at least one dataset summary")
    x = np.concatenate([hp.mu, hp.sigma])
    lp = float(prior.logpdf(x)[0])
    if not np.isfinite(lp):
        return -np.inf
    pop = hp.to_gaussian()
    total = lp
    for s in summaries:
        marg = convolve_marginal(pop, GaussianNd(s.theta_star, s.sigma_star))
        total += marg.logpdf(hp.mu)
    return float(total)


def sample_hyper_posterior(
    summaries: Sequence[GaussianSummary],
    prior: BoxPrior,
    cfg: TmcmcConfig,
    seed: int,
) -> SampleSet:
    """TMCMC draws of (mu_1..k, sigma_1..k) from the analytical hyper posterior."""
    t_stars, s_stars = _summary_arrays(summaries)

    def loglike(x: np.ndarray) -> np.ndarray:
        return _hyper_log_likelihood_batch(x, t_stars, s_stars)

    target = TargetDensity.from_box_prior(prior, loglike)
    return tmcmc(target, cfg, seed)


def cbm_posterior(
    model: LinearModel,
    ys: np.ndarray,
    sigmas: Optional[np.ndarray] = None,
) -> GaussianSummary:
    """Classical (pooled) Bayesian posterior: all datasets stacked into one.

    Each dataset reuses the same A block; `sigmas` supplies per-dataset noise
    stds when they differ (defaults to the model's). The covariance shrinks
    like 1/(total data), which is exactly the underestimation the
    hierarchical treatment avoids.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n_sets = ys.shape[0]
    if ys.shape[1] != model.n_data:
        raise ValueError("each dataset must have n_data points")
    if sigmas is None:
        sigmas = np.full(n_sets, model.sigma_noise)
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.shape != (n_sets,):
        raise ValueError("sigmas must have one entry per dataset")

    gram = model.A @ model.A.T
    precision = np.sum(1.0 / sigmas**2) * gram
    rhs = model.A @ np.sum(ys / sigmas[:, None] ** 2, axis=0)
    try:
        cho = cho_factor(precision)
    except np.linalg.LinAlgError as exc:
        raise ValueError("stacked A A^T is rank deficient") from exc
    theta_star = cho_solve(cho, rhs)
    sigma_star = cho_solve(cho, np.eye(model.n_params))
    sigma_star = 0.5 * (sigma_star + sigma_star.T)
    return GaussianSummary(theta_star, sigma_star)


def reliability_index(
    mu: np.ndarray, cov: np.ndarray, ls: LinearLimitState, model: LinearModel
) -> float:
    """Distance to failure for the linear limit state under N(mu, cov).

    beta = (b - (A c)^T mu) / sqrt((A c)^T cov (A c)); the conditional
    failure probability is the standard normal CDF at -beta.
    """
    a = model.A @ ls.c
    mu = np.asarray(mu, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    denom_sq = float(a @ cov @ a)
    if denom_sq <= 0.0:
        raise ValueError("covariance is singular along the limit-state direction")
    return float((ls.b - a @ mu) / np.sqrt(denom_sq))


@dataclass
class LinearReliabilityCurve:
    thresholds: np.ndarray
    p_f: np.ndarray
    p_f_at_b: float


def _curve_from_moments(
    proj_mean: np.ndarray, proj_std: np.ndarray, thresholds: np.ndarray
) -> np.ndarray:
    """Average of Phi(-beta_m(b)) over samples m, for each threshold b."""
    betas = (thresholds[None, :] - proj_mean[:, None]) / proj_std[:, None]
    return np.asarray(std_normal_cdf(-betas)).mean(axis=0)


def default_threshold_grid(
    proj_mean: float, proj_std: float, n: int = 50, p_min: float = 1e-6
) -> np.ndarray:
    """Thresholds spanning conditional failure probabilities ~0.5 down to p_min."""
    levels = np.logspace(np.log10(0.5), np.log10(p_min), int(n))
    return proj_mean + proj_std * np.asarray(std_normal_quantile(1.0 - levels))


def failure_probability_linear(
    hyper_samples: SampleSet,
    ls: LinearLimitState,
    model: LinearModel,
    thresholds: Optional[np.ndarray] = None,
) -> LinearReliabilityCurve:
    """Hyper-sample-averaged failure probability and its threshold curve.

    Every hyper draw (mu, sigma) contributes Phi(-beta) with
    beta = (b - (Ac)^T mu) / sqrt(sum_k (Ac)_k^2 sigma_k^2); the result is
    the plain average over draws, evaluated at ls.b and across the grid.
    """
    if hyper_samples.n < 1:
        raise ValueError("need at least one hyper sample")
    a = model.A @ ls.c
    k = model.n_params
    mu = hyper_samples.draws[:, :k]
    sig = hyper_samples.draws[:, k:]
    if sig.shape[1] != k:
        raise ValueError("hyper draws must have columns (mu_1..k, sigma_1..k)")
    proj_mean = mu @ a
    proj_std = np.sqrt((sig**2) @ (a**2))
    if np.any(proj_std <= 0.0):
        raise ValueError("degenerate hyper draw: zero variance along limit state")
    if thresholds is None:
        thresholds = default_threshold_grid(
            float(proj_mean.mean()), float(proj_std.mean())
        )
    thresholds = np.asarray(thresholds, dtype=float)
    curve = _curve_from_moments(proj_mean, proj_std, thresholds)
    p_at_b = _curve_from_moments(
        proj_mean, proj_std, np.array([ls.b], dtype=float)
    )[0]
    return LinearReliabilityCurve(thresholds=thresholds, p_f=curve, p_f_at_b=float(p_at_b))


def failure_curve_from_summary(
    summary: GaussianSummary,
    ls: LinearLimitState,
    model: LinearModel,
    thresholds: np.ndarray,
) -> LinearReliabilityCurve:
    """Failure curve for a single Gaussian over theta (the CBM comparison)."""
    a = model.A @ ls.c
    proj_mean = np.array([float(a @ summary.theta_star)])
    proj_std = np.array([float(np.sqrt(a @ summary.sigma_star @ a))])
    thresholds = np.asarray(thresholds, dtype=float)
    curve = _curve_from_moments(proj_mean, proj_std, thresholds)
    p_at_b = _curve_from_moments(proj_mean, proj_std, np.array([ls.b]))[0]
    return LinearReliabilityCurve(thresholds=thresholds, p_f=curve, p_f_at_b=float(p_at_b))


@dataclass
class LinearSuite:
    """Synthetic multi-dataset experiment for the linear model."""

    A: np.ndarray
    ys: np.ndarray  # (n_datasets, n_data)
    sigmas: np.ndarray  # per-dataset known noise std
    thetas_true: np.ndarray  # (n_datasets, n_params); diagnostics only
    seed: int
    noise_frac: float


def generate_linear_datasets(
    generation_hp: HyperParams,
    n_datasets: int,
    n_data: int,
    noise_frac: float,
    seed: int,
    a_low: float = 1.0,
    a_high: float = 5.0,
) -> LinearSuite:
    """Simulate datasets from the two-level linear model.

    A single system matrix with entries uniform on [a_low, a_high] is shared
    by all datasets; each dataset draws its own theta from the generating
    population and is contaminated with Gaussian noise whose std is
    noise_frac times the RMS of that dataset's noise-free prediction.
    """
    if n_datasets < 1 or n_data < 1:
        raise ValueError("n_datasets and n_data must be >= 1")
    if noise_frac < 0.0:
        raise ValueError("noise_frac must be >= 0")
    k = generation_hp.dim
    rng_a = split_stream(seed, 0)
    A = rng_a.uniform(a_low, a_high, size=(k, n_data))

    rng_theta = split_stream(seed, 1)
    thetas = generation_hp.mu + generation_hp.sigma * rng_theta.standard_normal(
        size=(n_datasets, k)
    )

    ys = np.empty((n_datasets, n_data))
    sigmas = np.empty(n_datasets)
    for i in range(n_datasets):
        clean = A.T @ thetas[i]
        rms = float(np.sqrt(np.mean(clean**2)))
        sigma_i = noise_frac * rms
        sigmas[i] = sigma_i
        noise_rng = split_stream(seed, 2 + i)
        ys[i] = clean + sigma_i * noise_rng.standard_normal(n_data)
    return LinearSuite(
        A=A, ys=ys, sigmas=sigmas, thetas_true=thetas, seed=int(seed),
        noise_frac=float(noise_frac),
    )
