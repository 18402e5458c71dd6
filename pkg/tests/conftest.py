import numpy as np
import pytest
from hypothesis import settings

from fedstale import Dataset, ModelArch, init_params, make_blobs

settings.register_profile("suite", max_examples=25, deadline=None)
settings.load_profile("suite")


@pytest.fixture
def tiny_arch():
    return ModelArch((2, 4, 3))


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (12, 2))
    y = rng.integers(0, 3, 12)
    return Dataset(X, y, 3)


@pytest.fixture
def blob_world():
    """Small separable world shared by the slower integration tests."""
    data = make_blobs(num_classes=4, dim=6, samples_per_class=25, spread=0.08, seed=3)
    arch = ModelArch((6, 12, 4))
    return data, arch, init_params(arch, 7)
