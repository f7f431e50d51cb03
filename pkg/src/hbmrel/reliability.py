"""Rare-event failure probabilities for the dynamic model via subset simulation.

All uncertain quantities live in an underlying standard-normal space: the
stiffness multipliers enter through a linear Gaussian push-forward and the
load history is the standard-normal input sequence itself, so one
componentwise Metropolis kernel serves every variable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import Excitation, ShearChainModel, max_displacement_batch
from .gaussian import SampleSet, cholesky_with_jitter
from .samplers import modified_metropolis_step, split_stream

THETA_CLAMP = 1e-3  # floor for non-physical theta <= 0 push-forward excursions


@dataclass
class DisplacementLimitState:
    """Failure when peak |displacement| exceeds d0; dof_select=-1 scans all DOFs."""

    d0: float
    dof_select: int = -1

    def __post_init__(self) -> None:
        if self.d0 <= 0.0:
            raise ValueError("d0 must be > 0")


@dataclass
class SubsetSimConfig:
    n_per_level: int = 1000
    p0: float = 0.1
    max_levels: int = 12
    proposal_std: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.p0 <= 0.5:
            raise ValueError("p0 must lie in (0, 0.5]")
        n_seeds = self.n_per_level * self.p0
        if abs(n_seeds - round(n_seeds)) > 1e-9 or round(n_seeds) < 10:
            raise ValueError("n_per_level * p0 must be an integer >= 10")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        if self.proposal_std <= 0.0:
            raise ValueError("proposal_std must be > 0")


@dataclass
class UncertainInput:
    """Standard-normal input sequence and its deterministic mapping to a force."""

    n_inputs: int = 1000
    dt: float = 0.005
    scale: float = 1.0
    applied_dof: int = 2

    def to_excitation(self, phi: np.ndarray) -> Excitation:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.n_inputs,):
            raise ValueError(f"phi must have shape ({self.n_inputs},)")
        return Excitation(phi=phi, dt=self.dt, scale=self.scale,
                          applied_dof=self.applied_dof)


@dataclass
class LevelDiagnostics:
    threshold: float
    acceptance_rate: float


@dataclass
class SubsetSimResult:
    p_f: float
    levels: list[LevelDiagnostics]
    censored: bool
    n_evals: int


def subset_simulation(
    perf: Callable[[np.ndarray], np.ndarray],
    dim: int,
    cfg: SubsetSimConfig,
    seed: int,
) -> SubsetSimResult:
    """Estimate P[perf(U) <= 0] for U ~ N(0, I_dim).

    Level thresholds sit at the p0-quantile of the current G values; the
    samples below each threshold seed componentwise-Metropolis chains whose
    candidates are rejected whenever they leave the current intermediate
    failure domain. The estimate is p0^levels times the final failure
    fraction. `perf` takes an (n, dim) batch and returns (n,) values.
    """
    rng = split_stream(seed, 0)
    n = cfg.n_per_level
    n_seeds = int(round(n * cfg.p0))
    steps = n // n_seeds - 1  # chain states after the seed

    u = rng.standard_normal(size=(n, dim))
    g = np.asarray(perf(u), dtype=float)
    if g.shape != (n,):
        raise ValueError("perf must return one value per input row")
    n_evals = n

    p_levels = 1.0
    diagnostics: list[LevelDiagnostics] = []
    for _ in range(cfg.max_levels):
        order = np.argsort(g, kind="stable")
        b = float(g[order[n_seeds - 1]])
        if b <= 0.0:
            return SubsetSimResult(
                p_f=p_levels * float(np.mean(g <= 0.0)),
                levels=diagnostics,
                censored=False,
                n_evals=n_evals,
            )
        p_levels *= cfg.p0

        cur_u = u[order[:n_seeds]].copy()
        cur_g = g[order[:n_seeds]].copy()
        u = np.empty_like(u)
        g = np.empty(n)
        u[:n_seeds] = cur_u
        g[:n_seeds] = cur_g
        pos = n_seeds
        accepted = 0
        for _step in range(steps):
            cand = modified_metropolis_step(cur_u, rng, cfg.proposal_std)
            moved = np.any(cand != cur_u, axis=1)
            cand_g = cur_g.copy()
            if np.any(moved):
                cand_g[moved] = np.asarray(perf(cand[moved]), dtype=float)
                n_evals += int(np.count_nonzero(moved))
            ok = moved & (cand_g <= b)
            cur_u = np.where(ok[:, None], cand, cur_u)
            cur_g = np.where(ok, cand_g, cur_g)
            accepted += int(np.count_nonzero(ok))
            u[pos : pos + n_seeds] = cur_u
            g[pos : pos + n_seeds] = cur_g
            pos += n_seeds
        diagnostics.append(
            LevelDiagnostics(
                threshold=b,
                acceptance_rate=accepted / max(steps * n_seeds, 1),
            )
        )

    # Ran out of levels: report what the deepest population gives, flagged.
    return SubsetSimResult(
        p_f=p_levels * float(np.mean(g <= 0.0)),
        levels=diagnostics,
        censored=True,
        n_evals=n_evals,
    )


class ThetaPushforward:
    """Maps standard-normal (u_theta, u_phi) rows to (theta, phi) pairs.

    theta = mean + L u_theta, clamped to a small positive floor; the clamp
    count is tracked because clamped excursions signal the Gaussian
    population reaching non-physical stiffness.
    """

    def __init__(self, mean: np.ndarray, chol: np.ndarray):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.chol = np.atleast_2d(np.asarray(chol, dtype=float))
        self.n_clamped = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def __call__(self, u_theta: np.ndarray) -> np.ndarray:
        theta = self.mean + u_theta @ self.chol.T
        low = theta < THETA_CLAMP
        if np.any(low):
            self.n_clamped += int(np.count_nonzero(np.any(low, axis=1)))
            theta = np.maximum(theta, THETA_CLAMP)
        return theta

    @classmethod
    def from_std(cls, mean: np.ndarray, std: np.ndarray) -> "ThetaPushforward":
        return cls(mean, np.diag(np.asarray(std, dtype=float)))

    @classmethod
    def from_sample_moments(cls, draws: np.ndarray) -> "ThetaPushforward":
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        cov = np.atleast_2d(np.cov(draws, rowvar=False))
        return cls(draws.mean(axis=0), cholesky_with_jitter(cov))


def make_displacement_perf(
    model: ShearChainModel,
    uin: UncertainInput,
    push: ThetaPushforward,
    ls: DisplacementLimitState,
) -> Callable[[np.ndarray], np.ndarray]:
    """Performance function G(u) = d0 - peak displacement, batched over rows."""
    d = push.dim

    def perf(u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        theta = push(u[:, :d])
        phis = u[:, d:]
        md = max_displacement_batch(
            model, theta, phis, uin.dt, uin.scale, uin.applied_dof, ls.dof_select
        )
        return ls.d0 - md

    return perf


@dataclass
class ReliabilityCurve:
    thresholds: np.ndarray
    p_f: np.ndarray
    method: str
    censored: np.ndarray  # bool per threshold
    n_clamped: int = 0
    seed: Optional[int] = None


def hyper_mean_pushforward(hyper_samples: SampleSet, n_dof: int) -> ThetaPushforward:
    """Population at the hyper-posterior mean: mean mu, RMS-averaged sigma."""
    mu = hyper_samples.draws[:, :n_dof].mean(axis=0)
    sig = np.sqrt(np.mean(hyper_samples.draws[:, n_dof : 2 * n_dof] ** 2, axis=0))
    return ThetaPushforward.from_std(mu, sig)


def failure_prob_mean_hyper(
    hyper_samples: SampleSet,
    thresholds: np.ndarray,
    model: ShearChainModel,
    uin: UncertainInput,
    cfg: SubsetSimConfig,
    seed: int,
    dof_select: int = -1,
) -> ReliabilityCurve:
    """Failure curve using only the hyper-posterior means (one run per threshold)."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
    push = hyper_mean_pushforward(hyper_samples, model.n_dof)
    dim = model.n_dof + uin.n_inputs
    p_f = np.empty(thresholds.shape[0])
    censored = np.zeros(thresholds.shape[0], dtype=bool)
    for t, d0 in enumerate(thresholds):
        ls = DisplacementLimitState(d0=float(d0), dof_select=dof_select)
        perf = make_displacement_perf(model, uin, push, ls)
        res = subset_simulation(perf, dim, cfg, seed=int(seed) + t)
        p_f[t] = res.p_f
        censored[t] = res.censored
    return ReliabilityCurve(
        thresholds=thresholds, p_f=p_f, method="hbm_mean",
        censored=censored, n_clamped=push.n_clamped, seed=int(seed),
    )


def failure_prob_full_hyper(
    hyper_samples: SampleSet,
    m_subsample: int,
    thresholds: np.ndarray,
    model: ShearChainModel,
    uin: UncertainInput,
    cfg: SubsetSimConfig,
    seed: int,
    dof_select: int = -1,
) -> ReliabilityCurve:
    """Failure curve averaged over a without-replacement hyper-sample subset.

    Each retained hyper draw gets its own subset-simulation run per
    threshold; the curve is the arithmetic mean of the conditional
    probabilities. Censored runs are flagged through to the output.
    """
    if m_subsample > hyper_samples.n:
        raise ValueError("m_subsample cannot exceed the hyper sample count")
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
    d = model.n_dof
    pick_rng = split_stream(seed, 0)
    picks = pick_rng.choice(hyper_samples.n, size=int(m_subsample), replace=False)
    dim = d + uin.n_inputs
    p_f = np.zeros(thresholds.shape[0])
    censored = np.zeros(thresholds.shape[0], dtype=bool)
    n_clamped = 0
    for m, idx in enumerate(picks):
        row = hyper_samples.draws[idx]
        push = ThetaPushforward.from_std(row[:d], row[d : 2 * d])
        for t, d0 in enumerate(thresholds):
            ls = DisplacementLimitState(d0=float(d0), dof_select=dof_select)
            perf = make_displacement_perf(model, uin, push, ls)
            res = subset_simulation(
                perf, dim, cfg, seed=int(seed) + 1 + m * thresholds.shape[0] + t
            )
            p_f[t] += res.p_f
            censored[t] |= res.censored
        n_clamped += push.n_clamped
    p_f /= m_subsample
    return ReliabilityCurve(
        thresholds=thresholds, p_f=p_f, method="hbm_full",
        censored=censored, n_clamped=n_clamped, seed=int(seed),
    )


def failure_prob_cbm(
    cbm_samples: SampleSet,
    thresholds: np.ndarray,
    model: ShearChainModel,
    uin: UncertainInput,
    cfg: SubsetSimConfig,
    seed: int,
    dof_select: int = -1,
) -> ReliabilityCurve:
    """Failure curve with theta uncertainty moment-matched to the pooled posterior."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
    push = ThetaPushforward.from_sample_moments(cbm_samples.draws[:, : model.n_dof])
    dim = model.n_dof + uin.n_inputs
    p_f = np.empty(thresholds.shape[0])
    censored = np.zeros(thresholds.shape[0], dtype=bool)
    for t, d0 in enumerate(thresholds):
        ls = DisplacementLimitState(d0=float(d0), dof_select=dof_select)
        perf = make_displacement_perf(model, uin, push, ls)
        res = subset_simulation(perf, dim, cfg, seed=int(seed) + t)
        p_f[t] = res.p_f
        censored[t] = res.censored
    return ReliabilityCurve(
        thresholds=thresholds, p_f=p_f, method="cbm",
        censored=censored, n_clamped=push.n_clamped, seed=int(seed),
    )


def crude_mc_max_displacement(
    push: ThetaPushforward,
    model: ShearChainModel,
    uin: UncertainInput,
    n: int,
    seed: int,
    dof_select: int = -1,
) -> np.ndarray:
    """Plain Monte Carlo draws of the peak displacement (oracle / grid helper)."""
    rng = split_stream(seed, 0)
    u_theta = rng.standard_normal(size=(int(n), push.dim))
    phis = rng.standard_normal(size=(int(n), uin.n_inputs))
    theta = push(u_theta)
    return max_displacement_batch(
        model, theta, phis, uin.dt, uin.scale, uin.applied_dof, dof_select
    )


def default_displacement_grid(
    hyper_samples: SampleSet,
    model: ShearChainModel,
    uin: UncertainInput,
    seed: int,
    n_thresholds: int = 20,
    n_mc: int = 1000,
    p_floor: float = 1e-5,
    dof_select: int = -1,
) -> np.ndarray:
    """Threshold grid from the crude-MC median out to the ~p_floor tail.

    The upper end extrapolates a lognormal fit of the crude-MC peak
    displacements, which is crude but only needs to bracket the curve.
    """
    push = hyper_mean_pushforward(hyper_samples, model.n_dof)
    draws = crude_mc_max_displacement(push, model, uin, n_mc, seed, dof_select)
    logs = np.log(draws)
    from .gaussian import std_normal_quantile

    lo = float(np.median(draws))
    hi = float(np.exp(logs.mean() + std_normal_quantile(1.0 - p_floor) * logs.std()))
    return np.geomspace(lo, hi, int(n_thresholds))


def predictive_max_displacement(
    pushes: dict[str, ThetaPushforward],
    model: ShearChainModel,
    uin: UncertainInput,
    n_draws: int,
    seed: int,
    hyper_samples: Optional[dict[str, SampleSet]] = None,
    dof_select: int = -1,
) -> dict[str, np.ndarray]:
    """Posterior-predictive peak-displacement draws per method.

    All methods share the same input realizations (common random numbers),
    so differences between the returned draw sets reflect only the theta
    uncertainty each method carries. Methods listed in `hyper_samples`
    resample a hyper draw per predictive draw instead of using a fixed
    push-forward.
    """
    rng = split_stream(seed, 0)
    phis = rng.standard_normal(size=(int(n_draws), uin.n_inputs))
    u_theta = rng.standard_normal(size=(int(n_draws), model.n_dof))
    out: dict[str, np.ndarray] = {}
    hyper_samples = hyper_samples or {}
    for method, push in pushes.items():
        if method in hyper_samples:
            hs = hyper_samples[method]
            pick = split_stream(seed, 1 + len(out)).choice(hs.n, size=int(n_draws))
            rows = hs.draws[pick]
            d = model.n_dof
            theta = rows[:, :d] + rows[:, d : 2 * d] * u_theta
            theta = np.maximum(theta, THETA_CLAMP)
        else:
            theta = push(u_theta)
        out[method] = max_displacement_batch(
            model, theta, phis, uin.dt, uin.scale, uin.applied_dof, dof_select
        )
    return out
