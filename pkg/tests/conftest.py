import numpy as np
import pytest

import rng as seeding
from models import IdmParams, LogDensity
from trajectory_data import default_leader_profiles, generate_synthetic


@pytest.fixture(scope="session")
def literature():
    return IdmParams.literature()


@pytest.fixture(scope="session")
def two_driver_truth():
    return {
        "d1": IdmParams(v0=7.0, T=1.4, a=0.8, b=1.5, delta=4.0, s0=2.2, s1=0.2),
        "d2": IdmParams(v0=6.0, T=1.8, a=0.65, b=1.8, delta=4.0, s0=1.8, s1=0.1),
    }


@pytest.fixture(scope="session")
def leaders():
    return default_leader_profiles(4, 150, 0.1, seeding.spawn(3, seeding.SYNTH, 0))


@pytest.fixture(scope="session")
def clean_data(two_driver_truth, leaders):
    """Two drivers, two noise-free instances each."""
    return generate_synthetic(two_driver_truth, leaders, noise_std=0.0, n_instances_per_driver=2)


@pytest.fixture(scope="session")
def noisy_data(two_driver_truth, leaders):
    return generate_synthetic(
        two_driver_truth, leaders, noise_std=0.05, n_instances_per_driver=2, seed=11
    )


@pytest.fixture
def standard_normal():
    """Log density and gradient of a standard normal, in the sampler's target form."""
    def target(x):
        x = np.asarray(x, dtype=float)
        return LogDensity(value=-0.5 * float(x @ x), gradient=-x)

    return target
