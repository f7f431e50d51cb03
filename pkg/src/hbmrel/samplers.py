"""Transitional MCMC and the conditional-sampling kernel for subset simulation.

Targets are expressed as batched callables: log_prior and log_likelihood
take an (n, d) array and return an (n,) array. This keeps the Python-level
loop count at one call per tempering stage, which is what makes the
expensive forward-model targets affordable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .gaussian import SampleSet, cholesky_with_jitter


def split_stream(root_seed: int, index: int) -> np.random.Generator:
    """Independent, reproducible sub-stream number `index` of a root seed."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(int(index),))
    return np.random.default_rng(ss)


@dataclass
class BoxPrior:
    """Independent uniform prior on an axis-aligned box."""

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self) -> None:
        self.lows = np.atleast_1d(np.asarray(self.lows, dtype=float))
        self.highs = np.atleast_1d(np.asarray(self.highs, dtype=float))
        if self.lows.shape != self.highs.shape:
            raise ValueError("lows and highs must have equal length")
        if np.any(self.highs <= self.lows):
            raise ValueError("box must have positive volume")
        self._log_vol = float(np.sum(np.log(self.highs - self.lows)))

    @property
    def dim(self) -> int:
        return self.lows.shape[0]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        inside = np.all((x >= self.lows) & (x <= self.highs), axis=1)
        out = np.where(inside, -self._log_vol, -np.inf)
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lows, self.highs, size=(int(n), self.dim))

    def bounds(self) -> np.ndarray:
        return np.column_stack([self.lows, self.highs])


@dataclass
class TargetDensity:
    """Log-prior / log-likelihood pair over a rectangular support.

    Both callables must be deterministic and accept an (n, dim) batch.
    `sample_prior` draws exact prior samples for the first TMCMC stage; when
    omitted the support box must be finite and the prior uniform on it.
    """

    dim: int
    log_prior: Callable[[np.ndarray], np.ndarray]
    log_likelihood: Callable[[np.ndarray], np.ndarray]
    support: np.ndarray  # (dim, 2), possibly infinite
    sample_prior: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None

    def __post_init__(self) -> None:
        self.support = np.asarray(self.support, dtype=float).reshape(self.dim, 2)

    @classmethod
    def from_box_prior(
        cls, box: BoxPrior, log_likelihood: Callable[[np.ndarray], np.ndarray]
    ) -> "TargetDensity":
        return cls(
            dim=box.dim,
            log_prior=box.logpdf,
            log_likelihood=log_likelihood,
            support=box.bounds(),
            sample_prior=box.sample,
        )


@dataclass
class TmcmcConfig:
    n_samples: int = 5000
    proposal_scale: float = 0.2
    target_cov_of_weights: float = 1.0
    max_stages: int = 100
    chain_length_per_sample: int = 1

    def __post_init__(self) -> None:
        if self.n_samples < 100:
            raise ValueError("n_samples must be >= 100")
        if not 0.0 < self.proposal_scale <= 1.0:
            raise ValueError("proposal_scale must be in (0, 1]")
        if self.target_cov_of_weights <= 0.0:
            raise ValueError("target_cov_of_weights must be > 0")
        if self.max_stages < 1 or self.chain_length_per_sample < 1:
            raise ValueError("max_stages and chain_length_per_sample must be >= 1")


def _check_finite(logl: np.ndarray, draws: np.ndarray) -> None:
    bad = np.isnan(logl)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"log-likelihood returned NaN at draw {draws[i].tolist()}")


def _weight_cov(dbeta: float, logl: np.ndarray) -> float:
    # COV of w = exp(dbeta * logl); invariant to rescaling, so shift by max.
    w = np.exp(dbeta * (logl - logl.max()))
    return float(np.std(w) / np.mean(w))


def _next_beta(beta: float, logl: np.ndarray, target_cov: float) -> float:
    remaining = 1.0 - beta
    if _weight_cov(remaining, logl) <= target_cov:
        return 1.0
    # COV is 0 at dbeta=0 and > target at dbeta=remaining: bisect the gap.
    dbeta = brentq(
        lambda d: _weight_cov(d, logl) - target_cov, 1e-12, remaining, xtol=1e-10
    )
    return beta + float(dbeta)


def tmcmc(target: TargetDensity, cfg: TmcmcConfig, seed: int) -> SampleSet:
    """Sample from prior * likelihood via transitional MCMC.

    Tempering exponents grow from 0 to exactly 1, each increment chosen by
    bisection so the coefficient of variation of the incremental weights hits
    `cfg.target_cov_of_weights`. Each stage does multinomial resampling
    followed by Metropolis-Hastings moves with a Gaussian proposal whose
    covariance is proposal_scale**2 times the weighted sample covariance.
    The running sum of log mean incremental weights estimates the log
    evidence.
    """
    rng = split_stream(seed, 0)
    n = cfg.n_samples

    if target.sample_prior is not None:
        draws = np.asarray(target.sample_prior(rng, n), dtype=float)
    else:
        lo, hi = target.support[:, 0], target.support[:, 1]
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("target without sample_prior needs a finite support box")
        draws = rng.uniform(lo, hi, size=(n, target.dim))
    if draws.shape != (n, target.dim):
        raise ValueError("sample_prior returned wrong shape")

    logp = np.asarray(target.log_prior(draws), dtype=float)
    logl = np.asarray(target.log_likelihood(draws), dtype=float)
    _check_finite(logl, draws)

    beta = 0.0
    log_evidence = 0.0
    stages = 0
    while beta < 1.0:
        stages += 1
        if stages > cfg.max_stages:
            raise RuntimeError(f"TMCMC exceeded max_stages={cfg.max_stages} at beta={beta:.4f}")

        new_beta = _next_beta(beta, logl, cfg.target_cov_of_weights)
        dbeta = new_beta - beta
        log_evidence += float(logsumexp(dbeta * logl) - np.log(n))

        logw = dbeta * logl
        w = np.exp(logw - logw.max())
        w /= w.sum()

        prop_cov = cfg.proposal_scale**2 * np.atleast_2d(
            np.cov(draws, rowvar=False, aweights=w)
        )
        chol = cholesky_with_jitter(prop_cov)

        # Multinomial resampling assigns each leader a chain length equal to
        # its count; every emitted sample is the chain state after one (or
        # chain_length_per_sample) fresh MH moves, so duplicated leaders
        # spread out along their chain instead of staying identical copies.
        counts = rng.multinomial(n, w)
        alive = np.flatnonzero(counts)
        cur = draws[alive].copy()
        cur_logp = logp[alive].copy()
        cur_logl = logl[alive].copy()
        remaining = counts[alive].copy()
        offsets = np.concatenate([[0], np.cumsum(remaining)[:-1]])
        emitted = np.zeros(alive.shape[0], dtype=np.int64)

        draws = np.empty_like(draws)
        logp = np.empty(n)
        logl = np.empty(n)
        while np.any(emitted < remaining):
            active = np.flatnonzero(emitted < remaining)
            na = active.shape[0]
            for _ in range(cfg.chain_length_per_sample):
                z = rng.standard_normal(size=(na, target.dim))
                proposed = cur[active] + z @ chol.T
                logp_new = np.asarray(target.log_prior(proposed), dtype=float)
                inside = logp_new > -np.inf
                logl_new = np.full(na, -np.inf)
                if np.any(inside):
                    logl_new[inside] = np.asarray(
                        target.log_likelihood(proposed[inside]), dtype=float
                    )
                    _check_finite(logl_new[inside], proposed[inside])
                log_ratio = (
                    new_beta * (logl_new - cur_logl[active])
                    + (logp_new - cur_logp[active])
                )
                accept = np.log(rng.uniform(size=na)) < log_ratio
                upd = active[accept]
                cur[upd] = proposed[accept]
                cur_logp[upd] = logp_new[accept]
                cur_logl[upd] = logl_new[accept]
            slots = offsets[active] + emitted[active]
            draws[slots] = cur[active]
            logp[slots] = cur_logp[active]
            logl[slots] = cur_logl[active]
            emitted[active] += 1

        beta = new_beta

    return SampleSet(
        draws=draws, log_likelihoods=logl, seed=int(seed), log_evidence=log_evidence
    )


def modified_metropolis_step(
    current: np.ndarray, rng: np.random.Generator, proposal_std: float
) -> np.ndarray:
    """One componentwise Metropolis step that preserves the standard normal.

    Each component independently proposes x + proposal_std * z and accepts
    with probability min(1, phi(candidate)/phi(current)). Accepts a single
    state (d,) or a batch of chains (n, d); the caller applies any
    limit-state filtering to the returned candidate.
    """
    x = np.asarray(current, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    z = rng.standard_normal(size=x2.shape)
    xi = x2 + proposal_std * z
    # log phi(xi) - log phi(x), componentwise
    log_ratio = 0.5 * (x2**2 - xi**2)
    accept = np.log(rng.uniform(size=x2.shape)) < log_ratio
    out = np.where(accept, xi, x2)
    return out[0] if single else out
