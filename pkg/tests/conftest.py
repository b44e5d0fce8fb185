import numpy as np
import pytest
from hypothesis import settings

from rlpipe import sac, sysid
from rlpipe.dynamics import EnvConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def truth_model():
    return sysid.default_truth_model()


@pytest.fixture
def identity_model():
    return sysid.VelocityModel.identity()


@pytest.fixture
def env_config():
    return EnvConfig()


@pytest.fixture
def small_hyper():
    return sac.SacHyper(batch_size=32, critic_hidden=(16, 16), learning_starts=0)


@pytest.fixture
def model_file(tmp_path, truth_model):
    path = tmp_path / "model.json"
    truth_model.save(path)
    return path


# first calls into numba kernels compile; wall-clock deadlines would be noise
settings.register_profile("default", deadline=None)
settings.load_profile("default")


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""

    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
