import numpy as np
import pytest

from quadrbm.rbm import PartitionLayout, QuadState, random_rbm


@pytest.fixture
def rand_state():
    def make(layout_or_rbm, seed=0):
        layout = getattr(layout_or_rbm, "layout", layout_or_rbm)
        rng = np.random.default_rng(seed)
        return QuadState(*(rng.integers(0, 2, layout.size_of(p)) for p in ("v", "h", "s", "t")))

    return make


@pytest.fixture
def small_rbm():
    return random_rbm((3, 2, 3, 2), sigma=0.8, seed=11)


@pytest.fixture
def tiny_layout():
    return PartitionLayout((1, 1, 1, 1))
