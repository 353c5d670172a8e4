import numpy as np
import pytest

from irmarl.ir_core import BaseDistribution, dense_table


def dense_weights(base: BaseDistribution) -> np.ndarray:
    """Joint probability tensor ``p(x) prod_j p_j(y_j | x)`` built by brute force."""
    w = base.x_dist.copy()
    for p in base.y_dists:
        w = w[..., None] * p.reshape((p.shape[0],) + (1,) * (w.ndim - 1) + (p.shape[1],))
    return w


def dense_mse(f, g, base) -> float:
    return float((dense_weights(base) * (dense_table(f) - dense_table(g)) ** 2).sum())


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
