import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynaloc import channel_sim as cs
from dynaloc import da_pipeline as dp

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def env_t1():
    return cs.generate_environment(7, 20, time_label="t1")


@pytest.fixture(scope="session")
def env_t2(env_t1):
    return cs.derive_environment(env_t1, "t2", remove=[0, 1, 2])


@pytest.fixture(scope="session")
def small_data(env_t1, env_t2):
    """(D_S, D-bar_T, test_S, test_T) with a few hundred samples."""
    return dp.build_datasets(env_t1, env_t2, 300, 300, 100, 5)


@pytest.fixture(scope="session")
def tiny_arch():
    return dp.Architecture.for_dims(16, 32, n_filters=4)


@pytest.fixture(scope="session")
def trained_baseline(env_t1, tiny_arch):
    d_s = dp.synthesize_dataset(env_t1, 1000, 21)
    cfg = dp.TrainConfig("baseline", lr=1e-2, epochs=15, batch_size=100, seed=0)
    return dp.train("baseline", d_s, None, cfg, tiny_arch)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Records one summary line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        _ACCEPTANCE[number] = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'}" + (
            f"  ({detail})" if detail else "")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
