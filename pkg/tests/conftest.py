import numpy as np
import pytest

from netvlad.geodata import WorldConfig, generate_world, split_geographic

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def standard_world():
    return generate_world(WorldConfig())


@pytest.fixture(scope="session")
def standard_splits(standard_world):
    return split_geographic(standard_world)


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_places=24, n_descriptors=16, dim=8, prototypes_per_place=8, n_landmarks=8,
                      n_transients=2, n_distractors=6, distractor_pool=32, landmark_dims=4, transient_dims=2)
    return generate_world(cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
