"""Shear-chain forward model: assembly, modal analysis, Newmark time stepping.

The chain is fixed at one end with lumped masses; story stiffnesses are
k0 * theta_i. Time integration is Newmark average acceleration (gamma=1/2,
beta=1/4, unconditionally stable). The per-sample kernels are numba-compiled
because the samplers evaluate the forward map tens of thousands of times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from numba import njit, prange

from .gaussian import HyperParams
from .samplers import split_stream

NEWMARK_GAMMA = 0.5
NEWMARK_BETA = 0.25


@dataclass
class ShearChainModel:
    """Fixed-base lumped-mass shear chain (the worked example uses 3 DOFs).

    Story stiffnesses are k0 * theta_i; damping is modal with ratio zeta in
    every mode, rebuilt whenever theta changes.
    """

    theta: np.ndarray = field(default_factory=lambda: np.ones(3))
    m0: float = 1.0
    k0: float = 1800.0
    zeta: float = 0.02

    def __post_init__(self) -> None:
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if np.any(self.theta <= 0.0):
            raise ValueError("all stiffness multipliers must be > 0")
        if not 0.0 <= self.zeta < 1.0:
            raise ValueError("zeta must lie in [0, 1)")
        if self.m0 <= 0.0 or self.k0 <= 0.0:
            raise ValueError("m0 and k0 must be > 0")

    @property
    def n_dof(self) -> int:
        return self.theta.shape[0]

    def mass_matrix(self) -> np.ndarray:
        return self.m0 * np.eye(self.n_dof)

    def stiffness_matrix(self) -> np.ndarray:
        return _chain_stiffness(self.theta, self.k0)

    def with_theta(self, theta: np.ndarray) -> "ShearChainModel":
        return ShearChainModel(theta=np.asarray(theta, dtype=float),
                               m0=self.m0, k0=self.k0, zeta=self.zeta)


@dataclass
class Excitation:
    """Point-force history f(t) = scale * phi[t] at one DOF, zero-order hold."""

    phi: np.ndarray
    dt: float
    scale: float = 1.0
    applied_dof: int = 2

    def __post_init__(self) -> None:
        self.phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if self.phi.shape[0] < 1:
            raise ValueError("excitation must have at least one sample")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("excitation contains non-finite values")
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")

    @property
    def n_steps(self) -> int:
        return self.phi.shape[0]

    def force_history(self, n_dof: int) -> np.ndarray:
        if not 0 <= self.applied_dof < n_dof:
            raise ValueError(f"applied_dof {self.applied_dof} out of range for {n_dof} DOFs")
        f = np.zeros((n_dof, self.n_steps))
        f[self.applied_dof] = self.scale * self.phi
        return f


@dataclass
class ResponseHistory:
    accelerations: np.ndarray  # (n_dof, n_steps)
    displacements: np.ndarray  # (n_dof, n_steps)
    dt: float


@dataclass
class Dataset:
    """One measured (noisy) acceleration record."""

    index: int
    accelerations: np.ndarray  # (n_dof, n_steps)
    dt: float


@njit(cache=True)
def _chain_stiffness(theta, k0):
    d = theta.shape[0]
    K = np.zeros((d, d))
    for i in range(d):
        K[i, i] = theta[i]
        if i + 1 < d:
            K[i, i] += theta[i + 1]
            K[i, i + 1] = -theta[i + 1]
            K[i + 1, i] = -theta[i + 1]
    return k0 * K


@njit(cache=True)
def _modal_damping(K, m0, zeta):
    # M = m0*I, so the mass-normalized modes are V/sqrt(m0) with V orthonormal
    # and C = M Phi diag(2 zeta w) Phi^T M = m0 * V diag(2 zeta w) V^T.
    lam, V = np.linalg.eigh(K)
    d = K.shape[0]
    C = np.zeros((d, d))
    for j in range(d):
        wj = np.sqrt(lam[j] / m0)
        cj = 2.0 * zeta * wj * m0
        for a in range(d):
            for b in range(d):
                C[a, b] += cj * V[a, j] * V[b, j]
    return C


@njit(cache=True)
def _newmark_core(m0, C, K, forces, dt, x0, v0):
    # Small-d matvecs are hand-rolled: BLAS dispatch per 3x3 product costs
    # more than the arithmetic at this size.
    d, nt = forces.shape
    a0 = 1.0 / (NEWMARK_BETA * dt * dt)
    a1 = NEWMARK_GAMMA / (NEWMARK_BETA * dt)
    a2 = 1.0 / (NEWMARK_BETA * dt)
    a3 = 1.0 / (2.0 * NEWMARK_BETA) - 1.0
    a4 = NEWMARK_GAMMA / NEWMARK_BETA - 1.0
    a5 = 0.5 * dt * (NEWMARK_GAMMA / NEWMARK_BETA - 2.0)
    a6 = dt * (1.0 - NEWMARK_GAMMA)
    a7 = dt * NEWMARK_GAMMA

    keff = K + a1 * C
    for i in range(d):
        keff[i, i] += a0 * m0
    keff_inv = np.linalg.inv(keff)

    disp = np.empty((d, nt))
    vel = np.empty((d, nt))
    acc = np.empty((d, nt))
    x = x0.copy()
    v = v0.copy()
    a = np.empty(d)
    for i in range(d):
        s = forces[i, 0]
        for b in range(d):
            s -= C[i, b] * v[b] + K[i, b] * x[b]
        a[i] = s / m0
        disp[i, 0] = x[i]
        vel[i, 0] = v[i]
        acc[i, 0] = a[i]

    tmp = np.empty(d)
    feff = np.empty(d)
    xn = np.empty(d)
    for j in range(1, nt):
        for b in range(d):
            tmp[b] = a1 * x[b] + a4 * v[b] + a5 * a[b]
        for i in range(d):
            s = forces[i, j] + m0 * (a0 * x[i] + a2 * v[i] + a3 * a[i])
            for b in range(d):
                s += C[i, b] * tmp[b]
            feff[i] = s
        for i in range(d):
            s = 0.0
            for b in range(d):
                s += keff_inv[i, b] * feff[b]
            xn[i] = s
        for i in range(d):
            an = a0 * (xn[i] - x[i]) - a2 * v[i] - a3 * a[i]
            vn = v[i] + a6 * a[i] + a7 * an
            x[i] = xn[i]
            v[i] = vn
            a[i] = an
            disp[i, j] = x[i]
            vel[i, j] = v[i]
            acc[i, j] = a[i]
    return disp, vel, acc


@njit(cache=True, parallel=True)
def _response_batch(thetas, phi, dt, m0, k0, zeta, scale, dof):
    """Displacement and acceleration histories for a batch of thetas, shared input."""
    n = thetas.shape[0]
    d = thetas.shape[1]
    nt = phi.shape[0]
    disp = np.empty((n, d, nt))
    acc = np.empty((n, d, nt))
    for i in prange(n):
        K = _chain_stiffness(thetas[i], k0)
        C = _modal_damping(K, m0, zeta)
        forces = np.zeros((d, nt))
        for t in range(nt):
            forces[dof, t] = scale * phi[t]
        x0 = np.zeros(d)
        v0 = np.zeros(d)
        di, _, ai = _newmark_core(m0, C, K, forces, dt, x0, v0)
        disp[i] = di
        acc[i] = ai
    return disp, acc


@njit(cache=True, parallel=True)
def _max_disp_batch(thetas, phis, dt, m0, k0, zeta, scale, dof, select):
    """Peak |displacement| per (theta, input) pair; select=-1 takes all DOFs."""
    n = thetas.shape[0]
    d = thetas.shape[1]
    nt = phis.shape[1]
    out = np.empty(n)
    for i in prange(n):
        K = _chain_stiffness(thetas[i], k0)
        C = _modal_damping(K, m0, zeta)
        forces = np.zeros((d, nt))
        for t in range(nt):
            forces[dof, t] = scale * phis[i, t]
        x0 = np.zeros(d)
        v0 = np.zeros(d)
        di, _, _ = _newmark_core(m0, C, K, forces, dt, x0, v0)
        m = 0.0
        if select < 0:
            for a in range(d):
                for t in range(nt):
                    va = abs(di[a, t])
                    if va > m:
                        m = va
        else:
            for t in range(nt):
                va = abs(di[select, t])
                if va > m:
                    m = va
        out[i] = m
    return out


def modal_analysis(model: ShearChainModel) -> tuple[np.ndarray, np.ndarray]:
    """Natural frequencies (rad/s, ascending) and mass-normalized mode shapes."""
    K = model.stiffness_matrix()
    M = model.mass_matrix()
    lam, phi = scipy.linalg.eigh(K, M)
    if np.any(lam <= 0.0):
        raise ValueError("stiffness matrix is not positive definite")
    return np.sqrt(lam), phi


def damping_matrix(model: ShearChainModel) -> np.ndarray:
    """Damping matrix giving modal ratio zeta in every mode of (M, K)."""
    return _modal_damping(model.stiffness_matrix(), model.m0, model.zeta)


def newmark_response(
    M_diag: float,
    C: np.ndarray,
    K: np.ndarray,
    forces: np.ndarray,
    dt: float,
    x0: Optional[np.ndarray] = None,
    v0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """General Newmark average-acceleration run; returns (disp, vel, acc)."""
    forces = np.ascontiguousarray(np.asarray(forces, dtype=float))
    d = forces.shape[0]
    if x0 is None:
        x0 = np.zeros(d)
    if v0 is None:
        v0 = np.zeros(d)
    return _newmark_core(
        float(M_diag),
        np.ascontiguousarray(np.asarray(C, dtype=float)),
        np.ascontiguousarray(np.asarray(K, dtype=float)),
        forces,
        float(dt),
        np.asarray(x0, dtype=float),
        np.asarray(v0, dtype=float),
    )


def integrate(model: ShearChainModel, exc: Excitation) -> ResponseHistory:
    """Response to the excitation from rest (zero initial conditions)."""
    forces = exc.force_history(model.n_dof)
    C = damping_matrix(model)
    disp, _, acc = newmark_response(
        model.m0, C, model.stiffness_matrix(), forces, exc.dt
    )
    return ResponseHistory(accelerations=acc, displacements=disp, dt=exc.dt)


def response_batch(
    model: ShearChainModel, thetas: np.ndarray, exc: Excitation
) -> tuple[np.ndarray, np.ndarray]:
    """(disp, acc) histories for many stiffness draws under one excitation."""
    thetas = np.ascontiguousarray(np.atleast_2d(np.asarray(thetas, dtype=float)))
    if thetas.shape[1] != model.n_dof:
        raise ValueError("theta rows must match the model DOF count")
    exc.force_history(model.n_dof)  # validates applied_dof
    return _response_batch(
        thetas, np.ascontiguousarray(exc.phi), exc.dt, model.m0, model.k0,
        model.zeta, exc.scale, exc.applied_dof,
    )


def max_displacement_batch(
    model: ShearChainModel,
    thetas: np.ndarray,
    phis: np.ndarray,
    dt: float,
    scale: float,
    applied_dof: int,
    dof_select: int = -1,
) -> np.ndarray:
    """Peak |displacement| for paired (theta, input) rows; -1 selects all DOFs."""
    thetas = np.ascontiguousarray(np.atleast_2d(np.asarray(thetas, dtype=float)))
    phis = np.ascontiguousarray(np.atleast_2d(np.asarray(phis, dtype=float)))
    if thetas.shape[0] != phis.shape[0]:
        raise ValueError("thetas and phis must have the same number of rows")
    return _max_disp_batch(
        thetas, phis, float(dt), model.m0, model.k0, model.zeta,
        float(scale), int(applied_dof), int(dof_select),
    )


def generate_datasets(
    generation_hp: HyperParams,
    n_datasets: int,
    exc: Excitation,
    noise_frac: float,
    seed: int,
    model: Optional[ShearChainModel] = None,
) -> tuple[list[Dataset], np.ndarray]:
    """Simulate noisy acceleration datasets from the two-level chain model.

    Each dataset draws theta_i from the generating population (rejecting
    non-positive draws), runs the shared excitation through the chain and
    adds per-channel Gaussian noise with std noise_frac * RMS of that
    channel's clean response. Returns the datasets and the generating
    thetas; the latter are diagnostics only and must never feed inference.
    """
    if noise_frac < 0.0:
        raise ValueError("noise_frac must be >= 0")
    if n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    if model is None:
        model = ShearChainModel(theta=np.ones(generation_hp.dim))
    d = model.n_dof
    if generation_hp.dim != d:
        raise ValueError("generation hyper parameters must match the DOF count")

    rng_theta = split_stream(seed, 0)
    thetas = np.empty((n_datasets, d))
    tries = 0
    pending = np.arange(n_datasets)
    while pending.size:
        tries += pending.size
        if tries > 10**6:
            raise RuntimeError("theta truncation rejected 1e6 draws; hyper parameters pathological")
        draw = generation_hp.mu + generation_hp.sigma * rng_theta.standard_normal(
            size=(pending.size, d)
        )
        ok = np.all(draw > 0.0, axis=1)
        thetas[pending[ok]] = draw[ok]
        pending = pending[~ok]

    _, acc = response_batch(model, thetas, exc)
    datasets = []
    for i in range(n_datasets):
        rms = np.sqrt(np.mean(acc[i] ** 2, axis=1))
        noise_rng = split_stream(seed, 2 + i)
        noisy = acc[i] + noise_frac * rms[:, None] * noise_rng.standard_normal(acc[i].shape)
        datasets.append(Dataset(index=i, accelerations=noisy, dt=exc.dt))
    return datasets, thetas
