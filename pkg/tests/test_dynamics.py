import math

import numpy as np
import pytest

import hbmrel as hb
from hbmrel.dynamics import (
    max_displacement_batch,
    newmark_response,
    response_batch,
)


class TestModelAssembly:
    def test_stiffness_matrix_pattern(self):
        m = hb.ShearChainModel(theta=np.array([1.0, 2.0, 3.0]), k0=10.0)
        expected = 10.0 * np.array([[3.0, -2.0, 0.0], [-2.0, 5.0, -3.0], [0.0, -3.0, 3.0]])
        np.testing.assert_allclose(m.stiffness_matrix(), expected)

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            hb.ShearChainModel(theta=np.array([1.0, -1.0, 1.0]))
        with pytest.raises(ValueError):
            hb.ShearChainModel(zeta=1.0)


class TestModalAnalysis:
    def test_uniform_chain_closed_form(self, nominal_model):
        omegas, _ = hb.modal_analysis(nominal_model)
        j = np.arange(1, 4)
        expected = np.sqrt(1800.0 * (2.0 - 2.0 * np.cos((2 * j - 1) * np.pi / 7.0)))
        np.testing.assert_allclose(omegas, expected, rtol=1e-8)

    def test_uniform_scaling_scales_frequencies(self, nominal_model):
        w0, _ = hb.modal_analysis(nominal_model)
        c = 1.3
        w1, _ = hb.modal_analysis(hb.ShearChainModel(theta=c * np.ones(3)))
        np.testing.assert_allclose(w1, math.sqrt(c) * w0, rtol=1e-10)

    def test_mass_orthonormality(self, nominal_model):
        _, phi = hb.modal_analysis(nominal_model)
        gram = phi.T @ nominal_model.mass_matrix() @ phi
        np.testing.assert_allclose(gram, np.eye(3), atol=1e-10)

    def test_stiffness_reconstruction(self, nominal_model):
        omegas, phi = hb.modal_analysis(nominal_model)
        m = nominal_model.mass_matrix()
        k_rec = m @ phi @ np.diag(omegas**2) @ phi.T @ m
        k_true = nominal_model.stiffness_matrix()
        np.testing.assert_allclose(
            k_rec, k_true, rtol=1e-8, atol=1e-8 * nominal_model.k0
        )


class TestDampingMatrix:
    def test_zero_ratio_gives_zero(self):
        m = hb.ShearChainModel(zeta=0.0)
        np.testing.assert_allclose(hb.damping_matrix(m), np.zeros((3, 3)))

    def test_modal_ratios_round_trip(self, nominal_model):
        omegas, phi = hb.modal_analysis(nominal_model)
        c = hb.damping_matrix(nominal_model)
        ratios = np.diag(phi.T @ c @ phi) / (2.0 * omegas)
        np.testing.assert_allclose(ratios, 0.02, atol=1e-8)

    def test_symmetry(self, nominal_model):
        c = hb.damping_matrix(nominal_model)
        np.testing.assert_allclose(c, c.T, atol=1e-12)

    def test_rebuilt_when_theta_changes(self, nominal_model):
        other = nominal_model.with_theta([1.2, 0.8, 1.1])
        omegas, phi = hb.modal_analysis(other)
        ratios = np.diag(phi.T @ hb.damping_matrix(other) @ phi) / (2.0 * omegas)
        np.testing.assert_allclose(ratios, 0.02, atol=1e-8)


class TestIntegrate:
    def test_zero_excitation_zero_response(self, nominal_model):
        exc = hb.Excitation(phi=np.zeros(200), dt=0.005)
        resp = hb.integrate(nominal_model, exc)
        assert np.all(resp.displacements == 0.0)
        assert np.all(resp.accelerations == 0.0)

    def test_sdof_free_vibration_matches_cosine(self):
        # undamped single mass-spring released from x0=1
        k, m0 = 1800.0, 1.0
        omega = math.sqrt(k / m0)
        period = 2 * math.pi / omega
        dt = period / 200.0
        n = 300  # 1.5 periods; period-elongation error grows per cycle
        disp, _, _ = newmark_response(
            m0, np.zeros((1, 1)), np.array([[k]]), np.zeros((1, n)), dt,
            x0=np.array([1.0]),
        )
        t = np.arange(n) * dt
        err = np.max(np.abs(disp[0] - np.cos(omega * t)))
        assert err <= 1e-3

    def test_static_limit(self, nominal_model):
        exc = hb.Excitation(phi=np.ones(4000), dt=0.01, scale=5.0, applied_dof=2)
        resp = hb.integrate(nominal_model, exc)
        x_static = np.linalg.solve(
            nominal_model.stiffness_matrix(), np.array([0.0, 0.0, 5.0])
        )
        np.testing.assert_allclose(resp.displacements[:, -1], x_static, rtol=1e-3)

    def test_non_finite_excitation_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            hb.Excitation(phi=np.array([1.0, np.inf]), dt=0.01)

    def test_newmark_second_order_convergence(self, nominal_model):
        # fixed random band-limited force, sampled on each grid: measuring the
        # integrator's order needs a forcing that is smooth across resolutions
        rng = np.random.default_rng(4)
        amps = rng.standard_normal(6)
        freqs = rng.uniform(0.5, 4.0, size=6) * 2 * math.pi
        phases = rng.uniform(0, 2 * math.pi, size=6)
        c = hb.damping_matrix(nominal_model)
        k = nominal_model.stiffness_matrix()

        def run(refine):
            n = 125 * refine
            dt = 0.04 / refine
            t = np.arange(n) * dt
            f = np.zeros((3, n))
            f[2] = np.sum(
                amps[:, None] * np.sin(freqs[:, None] * t + phases[:, None]), axis=0
            )
            disp, _, _ = newmark_response(1.0, c, k, f, dt)
            return disp[:, ::refine]

        ref = run(8)
        e1 = np.max(np.abs(run(1) - ref))
        e2 = np.max(np.abs(run(2) - ref))
        assert 2.8 < e1 / e2 < 5.5

    def test_energy_dissipates_after_load_stops(self, nominal_model):
        rng = np.random.default_rng(9)
        phi = np.concatenate([rng.standard_normal(300), np.zeros(700)])
        exc = hb.Excitation(phi=phi, dt=0.005, scale=1.0, applied_dof=2)
        c = hb.damping_matrix(nominal_model)
        k = nominal_model.stiffness_matrix()
        disp, vel, _ = newmark_response(1.0, c, k, exc.force_history(3), exc.dt)
        kinetic = 0.5 * np.sum(vel**2, axis=0)
        strain = 0.5 * np.einsum("it,ij,jt->t", disp, k, disp)
        energy = (kinetic + strain)[300:]
        assert np.all(np.diff(energy) <= 1e-12)

    def test_uniform_stiffening_reduces_static_displacement(self):
        exc = hb.Excitation(phi=np.ones(3000), dt=0.01, scale=2.0, applied_dof=2)
        soft = hb.integrate(hb.ShearChainModel(theta=0.8 * np.ones(3)), exc)
        stiff = hb.integrate(hb.ShearChainModel(theta=1.2 * np.ones(3)), exc)
        assert np.all(
            np.abs(stiff.displacements[:, -1]) < np.abs(soft.displacements[:, -1])
        )


class TestBatchKernels:
    def test_response_batch_matches_integrate(self, nominal_model, white_noise_excitation):
        thetas = np.array([[1.0, 1.0, 1.0], [1.1, 0.9, 1.05]])
        disp, acc = response_batch(nominal_model, thetas, white_noise_excitation)
        for i in range(2):
            single = hb.integrate(
                nominal_model.with_theta(thetas[i]), white_noise_excitation
            )
            np.testing.assert_allclose(disp[i], single.displacements, atol=1e-14)
            np.testing.assert_allclose(acc[i], single.accelerations, atol=1e-14)

    def test_max_disp_batch_matches_integrate(self, nominal_model, white_noise_excitation):
        thetas = np.array([[1.0, 1.0, 1.0], [0.9, 1.1, 1.0]])
        phis = np.vstack([white_noise_excitation.phi] * 2)
        md = max_displacement_batch(
            nominal_model, thetas, phis, white_noise_excitation.dt,
            white_noise_excitation.scale, white_noise_excitation.applied_dof,
        )
        for i in range(2):
            single = hb.integrate(
                nominal_model.with_theta(thetas[i]), white_noise_excitation
            )
            assert md[i] == pytest.approx(np.abs(single.displacements).max(), rel=1e-12)

    def test_dof_selector(self, nominal_model, white_noise_excitation):
        thetas = np.ones((1, 3))
        phis = white_noise_excitation.phi[None, :]
        md0 = max_displacement_batch(
            nominal_model, thetas, phis, white_noise_excitation.dt, 1.0, 2, 0
        )
        single = hb.integrate(nominal_model, white_noise_excitation)
        assert md0[0] == pytest.approx(np.abs(single.displacements[0]).max(), rel=1e-12)


class TestGenerateDatasets:
    def test_zero_noise_equals_clean_response(self, nominal_model, white_noise_excitation):
        hp = hb.HyperParams(mu=[1.0, 1.0, 1.0], sigma=[0.05] * 3)
        datasets, thetas = hb.generate_datasets(
            hp, 3, white_noise_excitation, 0.0, seed=77
        )
        for ds, th in zip(datasets, thetas):
            clean = hb.integrate(nominal_model.with_theta(th), white_noise_excitation)
            np.testing.assert_array_equal(ds.accelerations, clean.accelerations)

    def test_noise_fraction_statistics(self, nominal_model, white_noise_excitation):
        hp = hb.HyperParams(mu=[1.0, 1.0, 1.0], sigma=[0.05] * 3)
        datasets, thetas = hb.generate_datasets(
            hp, 1, white_noise_excitation, 0.02, seed=78
        )
        clean = hb.integrate(
            nominal_model.with_theta(thetas[0]), white_noise_excitation
        ).accelerations
        rms = np.sqrt(np.mean(clean**2, axis=1))
        rel = (datasets[0].accelerations - clean).std(axis=1) / rms
        assert np.all(rel > 0.0187) and np.all(rel < 0.0213)

    def test_deterministic(self, white_noise_excitation):
        hp = hb.HyperParams(mu=[1.0, 1.0, 1.0], sigma=[0.05] * 3)
        a, ta = hb.generate_datasets(hp, 4, white_noise_excitation, 0.02, seed=5)
        b, tb = hb.generate_datasets(hp, 4, white_noise_excitation, 0.02, seed=5)
        np.testing.assert_array_equal(ta, tb)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.accelerations, y.accelerations)

    def test_all_thetas_positive(self, white_noise_excitation):
        hp = hb.HyperParams(mu=[0.2, 0.2, 0.2], sigma=[0.15] * 3)
        _, thetas = hb.generate_datasets(hp, 50, white_noise_excitation, 0.0, seed=6)
        assert np.all(thetas > 0)

    def test_pathological_population_rejected(self, white_noise_excitation):
        hp = hb.HyperParams(mu=[-5.0, -5.0, -5.0], sigma=[0.01] * 3)
        with pytest.raises(RuntimeError, match="1e6"):
            hb.generate_datasets(hp, 100, white_noise_excitation, 0.0, seed=7)
