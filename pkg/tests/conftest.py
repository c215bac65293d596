import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seeded_torch():
    torch.manual_seed(1234)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
