from __future__ import annotations

import numpy as np
import pytest

from enct5 import tensor as T
from enct5.model import ModelConfig


def central_difference(f, arrays: list[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Numerical gradient of scalar ``f(*arrays)`` by central differences."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(auto: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(auto - fd) / (np.abs(fd) + 1e-8)))


@pytest.fixture(autouse=True)
def _float64_default():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(d_model=16, d_ff=24, num_heads=2, d_kv=8, num_encoder_layers=2, num_decoder_layers=2,
                       vocab_size=40, rel_buckets=8, rel_max_distance=16)
