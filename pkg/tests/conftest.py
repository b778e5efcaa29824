import numpy as np
import pytest
import torch

from deepstamp.dataio import ImageBatch, Watermark, default_watermark

torch.set_num_threads(1)


def random_batch(n=4, seed=0, hw=(32, 32)):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.random((n, 3, *hw), dtype=np.float32), rng.integers(0, 10, n))


def random_watermark(seed=0, hw=(32, 32)):
    rng = np.random.default_rng(seed)
    return Watermark(rng.random((3, *hw), dtype=np.float32), rng.random((1, *hw), dtype=np.float32))


@pytest.fixture
def batch():
    return random_batch()


@pytest.fixture
def watermark():
    return default_watermark()
