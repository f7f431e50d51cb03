import pytest

import hbmrel as hb


@pytest.fixture(scope="session")
def nominal_model():
    return hb.ShearChainModel()


@pytest.fixture(scope="session")
def white_noise_excitation():
    phi = hb.split_stream(20240101, 1).standard_normal(1000)
    return hb.Excitation(phi=phi, dt=0.005, scale=1.0, applied_dof=2)


@pytest.fixture(scope="session")
def small_dynamic_suite(nominal_model, white_noise_excitation):
    """Five noisy datasets plus their stage-1 fits; shared across test modules."""
    hp = hb.HyperParams(mu=[1.0, 1.0, 1.0], sigma=[0.05, 0.05, 0.05])
    datasets, thetas = hb.generate_datasets(
        hp, 5, white_noise_excitation, 0.02, seed=515
    )
    cfg = hb.TmcmcConfig(n_samples=1000, chain_length_per_sample=2)
    stage1 = [
        hb.stage_one(ds, nominal_model, white_noise_excitation, cfg, seed=9000 + i)
        for i, ds in enumerate(datasets)
    ]
    return {
        "datasets": datasets,
        "thetas": thetas,
        "stage1": stage1,
        "hp": hp,
    }
