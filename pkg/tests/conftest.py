"""Shared fixtures and helpers for the cassikit test suite."""

import numpy as np
import pytest

from cassikit.cassi import SensingOperator, random_binary_mask


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def tiny_operator() -> SensingOperator:
    """4x5 scene, 3 bands, step 2: small enough for dense oracles."""
    return SensingOperator.from_mask(random_binary_mask(4, 5, 3), 3, 2)


@pytest.fixture
def square_operator() -> SensingOperator:
    """16x16 scene, 8 bands, step 2: the adjointness workhorse."""
    return SensingOperator.from_mask(random_binary_mask(16, 16, 0), 8, 2)
