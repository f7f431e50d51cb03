import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

import hbmrel as hb
import hbmrel.dynamics as dynamics
from hbmrel.gaussian import SampleSet
from hbmrel.two_stage import (
    _atoms_array,
    _mixture_loglik_batch,
    dynamic_loglik_batch,
    experiment_fingerprint,
)

LOG_2PI = math.log(2 * math.pi)


def make_zero_noise_dataset(model, exc, theta=(1.0, 1.0, 1.0)):
    clean = hb.integrate(model.with_theta(np.asarray(theta)), exc)
    return hb.Dataset(index=0, accelerations=clean.accelerations, dt=exc.dt)


class TestLogLikelihoodDynamic:
    def test_zero_residual_closed_form(self, nominal_model, white_noise_excitation):
        ds = make_zero_noise_dataset(nominal_model, white_noise_excitation)
        sigma = 0.03
        params = hb.DynamicParams(theta=np.ones(3), sigma_pred=sigma)
        got = hb.log_likelihood_dynamic(params, ds, nominal_model, white_noise_excitation)
        nt = white_noise_excitation.n_steps
        rms = np.sqrt(np.mean(ds.accelerations**2, axis=1))
        expected = sum(
            -0.5 * nt * LOG_2PI - nt * math.log(sigma * r) for r in rms
        )
        assert got == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_theta_perturbation_decreases_loglik(
        self, k, nominal_model, white_noise_excitation
    ):
        ds = make_zero_noise_dataset(nominal_model, white_noise_excitation)
        base = hb.log_likelihood_dynamic(
            hb.DynamicParams(np.ones(3), 0.02), ds, nominal_model, white_noise_excitation
        )
        theta = np.ones(3)
        theta[k] *= 1.1
        bumped = hb.log_likelihood_dynamic(
            hb.DynamicParams(theta, 0.02), ds, nominal_model, white_noise_excitation
        )
        assert bumped < base

    def test_ml_sigma_near_noise_level(
        self, small_dynamic_suite, nominal_model, white_noise_excitation
    ):
        ds = small_dynamic_suite["datasets"][0]
        theta = small_dynamic_suite["thetas"][0]
        pred = hb.integrate(
            nominal_model.with_theta(theta), white_noise_excitation
        ).accelerations
        rms = np.sqrt(np.mean(pred**2, axis=1))
        rel_resid = (ds.accelerations - pred) / rms[:, None]
        sigma_hat = math.sqrt(float(np.mean(rel_resid**2)))
        assert 0.018 < sigma_hat < 0.022

    def test_batch_matches_scalar(self, small_dynamic_suite, nominal_model, white_noise_excitation):
        ds = small_dynamic_suite["datasets"][1]
        params = np.array([[1.0, 1.0, 1.0, 0.02], [1.05, 0.95, 1.0, 0.03]])
        batch = dynamic_loglik_batch(params, ds, nominal_model, white_noise_excitation)
        for row, val in zip(params, batch):
            single = hb.log_likelihood_dynamic(
                hb.DynamicParams(row[:3], row[3]), ds, nominal_model,
                white_noise_excitation,
            )
            assert val == pytest.approx(single, rel=1e-12)


class TestStageOne:
    def test_zero_noise_concentrates_at_truth(self, nominal_model, white_noise_excitation):
        # sigma collapses against its lower bound: give the chains room to follow
        ds = make_zero_noise_dataset(nominal_model, white_noise_excitation)
        out = hb.stage_one(
            ds, nominal_model, white_noise_excitation,
            hb.TmcmcConfig(n_samples=500, chain_length_per_sample=3), seed=1,
        )
        mean = out.samples.mean()
        assert np.all(np.abs(mean[:3] - 1.0) < 0.005)
        assert mean[3] < 0.005

    def test_zero_noise_grid_scan_confirms_peak(self, nominal_model, white_noise_excitation):
        ds = make_zero_noise_dataset(nominal_model, white_noise_excitation)
        grid = np.linspace(0.99, 1.01, 41)
        params = np.column_stack(
            [grid, np.ones_like(grid), np.ones_like(grid), np.full_like(grid, 0.01)]
        )
        vals = dynamic_loglik_batch(params, ds, nominal_model, white_noise_excitation)
        assert grid[int(np.argmax(vals))] == pytest.approx(1.0, abs=5e-4)

    def test_noisy_sigma_posterior_in_range(self, small_dynamic_suite):
        for r in small_dynamic_suite["stage1"]:
            assert 0.018 < r.samples.mean()[3] < 0.022

    def test_posterior_tracks_generating_theta(self, small_dynamic_suite):
        for r, theta in zip(small_dynamic_suite["stage1"], small_dynamic_suite["thetas"]):
            np.testing.assert_allclose(r.samples.mean()[:3], theta, atol=0.02)

    def test_deterministic(self, nominal_model, white_noise_excitation, small_dynamic_suite):
        ds = small_dynamic_suite["datasets"][0]
        cfg = hb.TmcmcConfig(n_samples=200)
        a = hb.stage_one(ds, nominal_model, white_noise_excitation, cfg, seed=3)
        b = hb.stage_one(ds, nominal_model, white_noise_excitation, cfg, seed=3)
        np.testing.assert_array_equal(a.samples.draws, b.samples.draws)
        assert a.fingerprint == b.fingerprint

    def test_verify_detects_tampering(
        self, small_dynamic_suite, nominal_model, white_noise_excitation
    ):
        r = small_dynamic_suite["stage1"][0]
        ds = small_dynamic_suite["datasets"][0]
        hb.verify_stage_one(r, ds, nominal_model, white_noise_excitation)
        tampered = hb.StageOneResult(
            samples=SampleSet(
                draws=r.samples.draws,
                log_likelihoods=r.samples.log_likelihoods + 1.0,
            ),
            dataset_index=r.dataset_index,
            fingerprint=r.fingerprint,
        )
        with pytest.raises(ValueError, match="stale"):
            hb.verify_stage_one(tampered, ds, nominal_model, white_noise_excitation)

    def test_fingerprint_sensitive_to_data(
        self, small_dynamic_suite, nominal_model, white_noise_excitation
    ):
        ds = small_dynamic_suite["datasets"][0]
        fp = experiment_fingerprint(nominal_model, white_noise_excitation, ds)
        other = hb.Dataset(
            index=ds.index, accelerations=ds.accelerations + 1e-9, dt=ds.dt
        )
        assert experiment_fingerprint(nominal_model, white_noise_excitation, other) != fp


def synthetic_stage1(mu, sig, n_atoms, n_sets, seed):
    """Stage-1 stand-ins whose atoms come straight from a known population."""
    rng = hb.split_stream(seed, 0)
    results = []
    for i in range(n_sets):
        draws = mu + sig * rng.standard_normal((n_atoms, len(mu)))
        draws[:, -1] = np.abs(draws[:, -1]) + 1e-4
        results.append(
            hb.StageOneResult(
                samples=SampleSet(draws=draws, log_likelihoods=np.zeros(n_atoms)),
                dataset_index=i,
                fingerprint=f"synthetic-{i}",
            )
        )
    return results


class TestHyperLogPosteriorMc:
    def test_single_atom_reduces_to_plain_gaussian(self):
        atoms = np.array([[1.01, 0.99, 1.02, 0.021]])
        results = [
            hb.StageOneResult(
                samples=SampleSet(draws=atoms, log_likelihoods=np.zeros(1)),
                dataset_index=0,
                fingerprint="x",
            )
        ]
        hp = hb.DynamicHyperParams(
            mu_theta=[1.0, 1.0, 1.0], sigma_theta=[0.05, 0.05, 0.05],
            mu_sigma=0.02, sigma_sigma=0.001,
        )
        prior = hb.default_dynamic_hyper_prior(3)
        got = hb.hyper_log_posterior_mc(hp, results, prior)
        expected = float(prior.logpdf(hp.as_vector()[None])[0]) + float(
            norm.logpdf(
                atoms[0],
                np.concatenate([hp.mu_theta, [hp.mu_sigma]]),
                np.concatenate([hp.sigma_theta, [hp.sigma_sigma]]),
            ).sum()
        )
        assert got == pytest.approx(expected, rel=1e-12)

    def test_matches_scipy_logsumexp_oracle(self, small_dynamic_suite):
        stage1 = small_dynamic_suite["stage1"]
        atoms = _atoms_array(stage1)
        hp = hb.DynamicHyperParams(
            mu_theta=[1.0, 1.0, 1.0], sigma_theta=[0.06, 0.05, 0.04],
            mu_sigma=0.02, sigma_sigma=0.0005,
        )
        prior = hb.default_dynamic_hyper_prior(3)
        got = hb.hyper_log_posterior_mc(hp, stage1, prior)
        m = np.concatenate([hp.mu_theta, [hp.mu_sigma]])
        s = np.concatenate([hp.sigma_theta, [hp.sigma_sigma]])
        ref = float(prior.logpdf(hp.as_vector()[None])[0])
        for i in range(atoms.shape[0]):
            lp = norm.logpdf(atoms[i], m, s).sum(axis=1)
            ref += float(logsumexp(lp) - math.log(len(lp)))
        assert got == pytest.approx(ref, rel=1e-12)

    def test_permutation_invariance(self, small_dynamic_suite):
        stage1 = small_dynamic_suite["stage1"]
        hp = hb.DynamicHyperParams(
            mu_theta=[1.0, 1.0, 1.0], sigma_theta=[0.05, 0.05, 0.05],
            mu_sigma=0.02, sigma_sigma=0.001,
        )
        prior = hb.default_dynamic_hyper_prior(3)
        base = hb.hyper_log_posterior_mc(hp, stage1, prior)
        # dataset order
        assert hb.hyper_log_posterior_mc(hp, stage1[::-1], prior) == pytest.approx(
            base, rel=1e-12
        )
        # atom order within each dataset
        rng = np.random.default_rng(0)
        shuffled = []
        for r in stage1:
            p = rng.permutation(r.samples.n)
            shuffled.append(
                hb.StageOneResult(
                    samples=SampleSet(
                        draws=r.samples.draws[p],
                        log_likelihoods=r.samples.log_likelihoods[p],
                    ),
                    dataset_index=r.dataset_index,
                    fingerprint=r.fingerprint,
                )
            )
        assert hb.hyper_log_posterior_mc(hp, shuffled, prior) == pytest.approx(
            base, rel=1e-10
        )

    def test_synthetic_atoms_grid_argmax_mu(self):
        # shared atom clouds identify the population mean
        mu0 = np.array([1.0, 1.0, 1.0, 0.02])
        sig0 = np.array([0.05, 0.05, 0.05, 0.002])
        results = synthetic_stage1(mu0, sig0, n_atoms=10_000, n_sets=3, seed=44)
        atoms = _atoms_array(results)
        mus = np.linspace(0.9, 1.1, 21)
        vals = np.empty(21)
        for a, mu in enumerate(mus):
            x = np.array([[mu, 1.0, 1.0, 0.05, 0.05, 0.05, 0.02, 0.002]])
            vals[a] = _mixture_loglik_batch(np.ascontiguousarray(x), atoms, 1)[0]
        assert mus[int(np.argmax(vals))] == pytest.approx(1.0, abs=0.011)

    def test_synthetic_point_atoms_grid_argmax_mu_and_sigma(self):
        # identifying the population spread needs per-dataset point clouds at
        # distinct population draws; a cloud shared across datasets always
        # prefers a degenerate population sigma
        rng = hb.split_stream(123, 0)
        n_sets = 200
        centers = 1.0 + 0.05 * rng.standard_normal(n_sets)
        results = []
        for i, c0 in enumerate(centers):
            draws = np.column_stack(
                [
                    c0 + 1e-5 * rng.standard_normal(200),
                    np.ones(200),
                    np.ones(200),
                    np.full(200, 0.02),
                ]
            )
            results.append(
                hb.StageOneResult(
                    samples=SampleSet(draws=draws, log_likelihoods=np.zeros(200)),
                    dataset_index=i,
                    fingerprint=f"p{i}",
                )
            )
        atoms = _atoms_array(results)
        mus = np.linspace(0.97, 1.03, 13)
        sigs = np.linspace(0.03, 0.08, 11)
        vals = np.empty((13, 11))
        for a, mu in enumerate(mus):
            for b, sg in enumerate(sigs):
                x = np.array([[mu, 1.0, 1.0, sg, 1e-4, 1e-4, 0.02, 1e-4]])
                vals[a, b] = _mixture_loglik_batch(np.ascontiguousarray(x), atoms, 1)[0]
        am = np.unravel_index(np.argmax(vals), vals.shape)
        assert mus[am[0]] == pytest.approx(float(centers.mean()), abs=0.006)
        assert sigs[am[1]] == pytest.approx(float(centers.std()), abs=0.006)

    def test_thinning_uses_subset(self, small_dynamic_suite):
        stage1 = small_dynamic_suite["stage1"]
        hp = hb.DynamicHyperParams(
            mu_theta=[1.0, 1.0, 1.0], sigma_theta=[0.05, 0.05, 0.05],
            mu_sigma=0.02, sigma_sigma=0.001,
        )
        prior = hb.default_dynamic_hyper_prior(3)
        thinned_sets = []
        for r in stage1:
            thinned_sets.append(
                hb.StageOneResult(
                    samples=SampleSet(
                        draws=r.samples.draws[::5],
                        log_likelihoods=r.samples.log_likelihoods[::5],
                    ),
                    dataset_index=r.dataset_index,
                    fingerprint=r.fingerprint,
                )
            )
        assert hb.hyper_log_posterior_mc(hp, stage1, prior, thin=5) == pytest.approx(
            hb.hyper_log_posterior_mc(hp, thinned_sets, prior), rel=1e-12
        )


class TestStageTwo:
    def test_requires_two_datasets(self, small_dynamic_suite):
        with pytest.raises(ValueError, match="two datasets"):
            hb.stage_two(
                small_dynamic_suite["stage1"][:1],
                hb.default_dynamic_hyper_prior(3),
                hb.TmcmcConfig(n_samples=200),
                seed=0,
            )

    def test_point_mass_stage1_collapses_population_density(self):
        # identical narrow stage-1 posteriors: the marginal density must fall
        # monotonically in each population sigma (all mass near the bound)
        mu0 = np.array([0.95, 1.05, 1.0, 0.02])
        results = synthetic_stage1(mu0, np.array([0.01, 0.01, 0.01, 0.001]), 200,
                                   n_sets=4, seed=9)
        prior = hb.default_dynamic_hyper_prior(3)
        for k in range(3):
            vals = []
            for sg in (0.005, 0.05, 0.2):
                sigma_theta = np.full(3, 0.005)
                sigma_theta[k] = sg
                hp = hb.DynamicHyperParams(
                    mu_theta=mu0[:3], sigma_theta=sigma_theta,
                    mu_sigma=0.02, sigma_sigma=0.002,
                )
                vals.append(hb.hyper_log_posterior_mc(hp, results, prior))
            assert vals[0] > vals[1] > vals[2]

    def test_point_mass_stage1_collapses_population_sampler(self):
        # the sampled posterior should land on the common center with the
        # population spread well below the prior average of 0.15
        mu0 = np.array([0.95, 1.05, 1.0, 0.02])
        results = synthetic_stage1(mu0, np.array([0.01, 0.01, 0.01, 0.001]), 200,
                                   n_sets=4, seed=9)
        out = hb.stage_two(
            results, hb.default_dynamic_hyper_prior(3),
            hb.TmcmcConfig(n_samples=1000, chain_length_per_sample=5), seed=2,
        )
        mean = out.mean()
        np.testing.assert_allclose(mean[:3], mu0[:3], atol=0.05)
        assert mean[3:6].mean() < 0.075

    def test_never_touches_forward_model(self, small_dynamic_suite, monkeypatch):
        def boom(*args, **kwargs):
            raise AssertionError("stage 2 must not run the forward model")

        monkeypatch.setattr(dynamics, "_newmark_core", boom)
        out = hb.stage_two(
            small_dynamic_suite["stage1"],
            hb.default_dynamic_hyper_prior(3),
            hb.TmcmcConfig(n_samples=200, chain_length_per_sample=2),
            seed=5,
        )
        assert out.n == 200

    def test_deterministic(self, small_dynamic_suite):
        cfg = hb.TmcmcConfig(n_samples=200, chain_length_per_sample=2)
        prior = hb.default_dynamic_hyper_prior(3)
        a = hb.stage_two(small_dynamic_suite["stage1"], prior, cfg, seed=8)
        b = hb.stage_two(small_dynamic_suite["stage1"], prior, cfg, seed=8)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_recovers_population_at_small_scale(self, small_dynamic_suite):
        out = hb.stage_two(
            small_dynamic_suite["stage1"],
            hb.default_dynamic_hyper_prior(3),
            hb.TmcmcConfig(n_samples=1000, chain_length_per_sample=5),
            seed=21,
        )
        mean = out.mean()
        # only 5 datasets: generous bands around the generating values
        assert np.all(np.abs(mean[:3] - 1.0) < 0.08)
        assert 0.018 < mean[6] < 0.022


class TestCbmDynamic:
    def test_single_dataset_matches_stage_one_location(
        self, small_dynamic_suite, nominal_model, white_noise_excitation
    ):
        ds = small_dynamic_suite["datasets"][0]
        stage = small_dynamic_suite["stage1"][0]
        pooled = hb.cbm_dynamic(
            [ds], nominal_model, white_noise_excitation,
            hb.TmcmcConfig(n_samples=500), seed=4,
            prior=hb.default_stage1_prior(3),
        )
        np.testing.assert_allclose(
            pooled.mean()[:3], stage.samples.mean()[:3], atol=0.003
        )

    def test_pooled_fit_contracts_and_centers(
        self, small_dynamic_suite, nominal_model, white_noise_excitation
    ):
        out = hb.cbm_dynamic(
            small_dynamic_suite["datasets"], nominal_model, white_noise_excitation,
            hb.TmcmcConfig(n_samples=500), seed=6,
        )
        mean = out.mean()
        std = out.std()
        pop_mean = small_dynamic_suite["thetas"].mean(axis=0)
        assert np.all(np.abs(mean[:3] - pop_mean) < 0.05)
        assert np.all(std[:3] < 0.01)

    def test_pooled_likelihood_matches_direct_sum(
        self, small_dynamic_suite, nominal_model, white_noise_excitation, monkeypatch
    ):
        datasets = small_dynamic_suite["datasets"]
        captured = {}

        def fake_tmcmc(target, cfg, seed):
            captured["target"] = target
            return SampleSet(draws=np.ones((1, 4)), log_likelihoods=np.zeros(1))

        import hbmrel.two_stage as ts

        monkeypatch.setattr(ts, "tmcmc", fake_tmcmc)
        hb.cbm_dynamic(
            datasets, nominal_model, white_noise_excitation,
            hb.TmcmcConfig(n_samples=200), seed=0,
        )
        params = np.array([[1.0, 1.0, 1.0, 0.3], [1.02, 0.98, 1.01, 0.25]])
        pooled = captured["target"].log_likelihood(params)
        direct = np.zeros(2)
        for ds in datasets:
            direct += dynamic_loglik_batch(
                params, ds, nominal_model, white_noise_excitation
            )
        np.testing.assert_allclose(pooled, direct, rtol=1e-9)
