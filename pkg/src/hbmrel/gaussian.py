"""Multivariate Gaussian primitives shared by the rest of the package.

Everything here operates in log space: products of hundreds of dataset
densities underflow linear-space arithmetic long before they stop being
informative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr, ndtri

_LOG_2PI = float(np.log(2.0 * np.pi))

RngLike = Union[int, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(int(rng))


def cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retried once with a small diagonal jitter.

    Sample covariances coming out of the samplers can be marginally
    non-positive-definite; a single jitter of 1e-10 * trace/d on the
    diagonal is allowed before giving up.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        d = cov.shape[0]
        jitter = 1e-10 * np.trace(cov) / d
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"covariance not positive definite (even with jitter {jitter:.3e})"
            ) from exc


@dataclass
class SampleSet:
    """A matrix of parameter draws plus the provenance needed to reuse them.

    Attributes
    ----------
    draws : (n, d) array
    log_likelihoods : (n,) array or None
        Log-likelihood of each draw under the target that produced it.
    seed : int or None
        Root seed of the stream that generated the draws.
    log_evidence : float or None
        Model-evidence estimate (TMCMC by-product).
    """

    draws: np.ndarray
    log_likelihoods: Optional[np.ndarray] = None
    seed: Optional[int] = None
    log_evidence: Optional[float] = None

    def __post_init__(self) -> None:
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[0] < 1:
            raise ValueError("SampleSet needs at least one draw")
        if self.log_likelihoods is not None:
            self.log_likelihoods = np.asarray(self.log_likelihoods, dtype=float)
            if self.log_likelihoods.shape != (self.draws.shape[0],):
                raise ValueError("log_likelihoods length must match number of draws")

    @property
    def n(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def cov(self) -> np.ndarray:
        return np.cov(self.draws, rowvar=False).reshape(self.dim, self.dim)


class GaussianNd:
    """Multivariate normal with a cached Cholesky factor.

    The covariance must be symmetric (relative tolerance 1e-10) and
    positive definite; construction fails otherwise.
    """

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {cov.shape}")
        scale = max(np.abs(cov).max(), 1.0)
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * scale):
            raise ValueError("cov must be symmetric")
        self.mean = mean
        self.cov = cov
        self.chol = cholesky_with_jitter(cov)
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x: np.ndarray) -> Union[float, np.ndarray]:
        """Log density at x; accepts a single point (d,) or a batch (n, d)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {pts.shape[1]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("logpdf called with non-finite input")
        diff = pts - self.mean
        # Mahalanobis term through the cached factor: solve L y = diff^T
        y = np.linalg.solve(self.chol, diff.T)
        quad = np.sum(y * y, axis=0)
        out = -0.5 * (self.dim * _LOG_2PI + self._log_det + quad)
        return float(out[0]) if single else out


def logpdf(g: GaussianNd, x: np.ndarray) -> Union[float, np.ndarray]:
    return g.logpdf(x)


def sample(g: GaussianNd, rng: RngLike, n: int) -> SampleSet:
    """Draw n i.i.d. samples from g, deterministic given the seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = int(rng) if not isinstance(rng, np.random.Generator) else None
    gen = as_generator(rng)
    z = gen.standard_normal(size=(int(n), g.dim))
    draws = g.mean + z @ g.chol.T
    return SampleSet(draws=draws, seed=seed)


@dataclass
class HyperParams:
    """Population mean and per-component standard deviations.

    The population covariance is restricted to diag(sigma**2); both worked
    examples use a diagonal hyper covariance and report only per-parameter
    standard deviations.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have equal length")
        if np.any(self.sigma <= 0.0):
            raise ValueError("all sigma components must be > 0")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def covariance(self) -> np.ndarray:
        return np.diag(self.sigma**2)

    def to_gaussian(self) -> GaussianNd:
        return GaussianNd(self.mu, self.covariance())


def convolve_marginal(prior: GaussianNd, likelihood: GaussianNd) -> GaussianNd:
    """Marginalize the latent parameter out of a Gaussian prior-likelihood pair.

    For N(theta | mu, S_prior) * N(theta | t_star, S_like), integrating over
    theta leaves N(mu | t_star, S_prior + S_like); the result is returned as
    a Gaussian in mu.
    """
    if prior.dim != likelihood.dim:
        raise ValueError("prior and likelihood dimensions differ")
    return GaussianNd(likelihood.mean, prior.cov + likelihood.cov)


def std_normal_cdf(x) -> Union[float, np.ndarray]:
    """Standard normal CDF (erfc-backed, accurate into the far tails)."""
    out = ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(x) == 0 else out


def std_normal_quantile(p) -> Union[float, np.ndarray]:
    """Inverse standard normal CDF; p must lie strictly inside (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("quantile requires p in (0, 1)")
    out = ndtri(arr)
    return float(out) if np.ndim(p) == 0 else out
