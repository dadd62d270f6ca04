import numpy as np
import pytest

from bitsnap import faults


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clear_fault_hooks():
    yield
    faults.clear()
