import numpy as np
import pytest

from advda.data import synth_dataset
from advda.models import build_model, preset


@pytest.fixture(scope="session")
def blob_train():
    return synth_dataset(seed=7, n=600, k=3, d=16, split="train")


@pytest.fixture(scope="session")
def blob_test():
    return synth_dataset(seed=7, n=300, k=3, d=16, split="test")


@pytest.fixture(scope="session")
def small_model(blob_train):
    arch = preset("small", k=3, input_shape=(1, 4, 4))
    return build_model(arch, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def small_batch(rng, n=4, shape=(1, 4, 4), k=3):
    x = rng.random((n, *shape))
    y = rng.integers(0, k, size=n).astype(np.int64)
    return x, y
