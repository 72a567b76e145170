import numpy as np
import pytest

from clipvid import autodiff as ad


@pytest.fixture(autouse=True)
def _default_precision():
    ad.set_precision(64)
    yield
    ad.set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
