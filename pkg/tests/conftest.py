import numpy as np
import pytest

from physmv.model import DenoiserConfig, prepare_videosyn, train_phys4view, videosyn_train
from physmv.simulator.dataset import load_dataset, make_dataset

# three shapes, short and small: fast enough for per-module tests
SMALL_CONFIG = {"shape": "sphere box composite", "frames": 8, "image_size": 32, "radius": 0.09}
# the eight-scene toy set used by the training criteria (64 x 64, T = 16)
TOY_CONFIG = {"shape": "sphere box", "E": "2e4 2e5", "vy": "0 1"}
TOY_SEED = 7

ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    make_dataset(SMALL_CONFIG, root, seed=3)
    return root


@pytest.fixture(scope="session")
def small_records(small_dataset):
    return load_dataset(small_dataset)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_dataset(TOY_CONFIG, root, seed=TOY_SEED)
    return root


@pytest.fixture(scope="session")
def toy_records(toy_dataset):
    return load_dataset(toy_dataset)


@pytest.fixture(scope="session")
def trained_phys4view(toy_records):
    cfg = DenoiserConfig(steps=500, seed=0)
    return train_phys4view(toy_records, cfg)


@pytest.fixture(scope="session")
def trained_videosyn(toy_records):
    cfg = DenoiserConfig(steps=300, seed=0)
    data = prepare_videosyn(toy_records, cfg)
    model, trace = videosyn_train(data, cfg)
    return model, data, trace


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
