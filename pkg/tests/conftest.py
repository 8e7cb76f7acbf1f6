import numpy as np
import pytest

from tvseg.synth_data import generate_cells, write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture(scope='session')
def tiny_cells():
    return generate_cells(count=6, size=32, seed=3)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_cells):
    path = tmp_path / 'dataset'
    write_dataset(str(path), tiny_cells, {'train': [0, 1, 2, 3], 'test': [4, 5]}, {'seed': 3, 'size': 32})
    return str(path)
