import numpy as np
import pytest

from fedwls import DataGenConfig, generate_problem, optimal_wls, precompute_all

RHO = 1.0


@pytest.fixture(scope="session")
def small_problem():
    """Fast-mixing six-client desk used across the algorithm tests."""
    cfg = DataGenConfig(
        num_clients=6,
        model_dim=6,
        rows_range=(10, 20),
        obs_noise_variances=1.0,
        seed=3,
    )
    return generate_problem(cfg)


@pytest.fixture(scope="session")
def small_wstar(small_problem):
    return optimal_wls(small_problem)


@pytest.fixture(scope="session")
def small_precomputes(small_problem):
    return precompute_all(small_problem, RHO)
