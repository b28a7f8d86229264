import numpy as np
import pytest


def rel_err(a, b, floor=1e-8):
    """Infinity-norm relative error with an absolute floor for tiny references."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
