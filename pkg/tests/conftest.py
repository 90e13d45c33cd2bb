import numpy as np
import pytest
import torch

from priornet.data import Dataset, SyntheticSpec, synthesize

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_dataset(num_volumes=6, test=2, k=2, shape=(16, 16, 16), seed=3, dimensionality=3):
    spec = SyntheticSpec(num_volumes=num_volumes, shape=shape, num_classes=k,
                         radius_range=(2.0, 3.0), center_jitter=1.0, seed=seed)
    pairs = synthesize(spec)
    splits = ["train"] * (num_volumes - test) + ["test"] * test
    return Dataset([p[0] for p in pairs], [p[1] for p in pairs], splits, k, dimensionality)


@pytest.fixture
def tiny_data():
    return small_dataset()


def onehot_tensor(labels, k):
    """(N, *S) integer labels -> (N, K+1, *S) float64 one-hot, via np.eye."""
    return torch.from_numpy(np.moveaxis(np.eye(k + 1)[labels], -1, 1).copy())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
