"""Shared fixtures: calibrated baseline parameters and small cached runs."""

import numpy as np
import pytest

from nlflow.baselines import car_following_params
from nlflow.macrorecon import reconstruct
from nlflow.microsim import (
    FleetSpec,
    Perturbation,
    RingConfig,
    simulate,
)


@pytest.fixture(scope="session")
def cf_params():
    return car_following_params()


@pytest.fixture(scope="session")
def small_ring(cf_params):
    """A short perturbed ring run reused by reconstruction tests."""
    cfg = RingConfig(
        L=130.0, N=8, dt=0.05, T=40.0,
        perturbation=Perturbation(magnitude=0.3, duration=2.0),
    )
    return cfg, simulate(cfg, FleetSpec.homogeneous(cf_params))


@pytest.fixture(scope="session")
def small_field(small_ring):
    _, traj = small_ring
    return reconstruct(traj, h=6.0, dx=1.0, dt_grid=1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260816)
