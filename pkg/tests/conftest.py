import numpy as np
import pytest
import torch

from voxelage.phantom import PhantomSpec, generate_cohort, generate_phantom

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(size=32, seed=3)


@pytest.fixture(scope="session")
def small_cohort(small_spec):
    return generate_cohort(small_spec, 8)


@pytest.fixture
def phantom(small_spec):
    return generate_phantom(small_spec, 55.0, "sub-test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
