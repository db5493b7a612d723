import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsdfcodec import pca, synth
from tsdfcodec.shapes import DatasetSpec, generate_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(DatasetSpec(600, rng_seed=11))


@pytest.fixture(scope="session")
def pca32(small_dataset):
    return pca.fit(small_dataset.blocks, 31)


@pytest.fixture(scope="session")
def pca64(small_dataset):
    return pca.fit(small_dataset.blocks, 63)


@pytest.fixture(scope="session")
def room_scene():
    return synth.cluttered_room(0)


@pytest.fixture(scope="session")
def room_vol(room_scene):
    return synth.room_volume(room_scene)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
