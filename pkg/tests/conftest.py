import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_displacements(rng, n, rho=32.0):
    return torch.from_numpy(rng.uniform(-rho, rho, size=(n, 4, 2)))
