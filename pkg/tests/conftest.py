import numpy as np
import pytest

from mmfusion.data import DatasetSpec, generate
from mmfusion.tensor import Rng
from mmfusion.training import TrainConfig, split_dataset


@pytest.fixture(scope="session")
def default_samples():
    return generate(DatasetSpec())


@pytest.fixture(scope="session")
def default_splits(default_samples):
    return split_dataset(default_samples, TrainConfig(), Rng(0))


@pytest.fixture(scope="session")
def small_splits():
    samples = generate(DatasetSpec(n_samples=120, seed=7))
    return split_dataset(samples, TrainConfig(), Rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the acceptance summary."""
    table = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_CRITERIA, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
