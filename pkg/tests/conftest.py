"""Shared fixtures, oracles and hypothesis profiles."""

import pytest
from hypothesis import HealthCheck, settings

from nprepmet.embed_net import EmbedConfig
from nprepmet.synth_world import WorldConfig, build_dataset

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_world():
    return WorldConfig(n_base_classes=6, n_novel_classes=5, train_scenes_per_class=3, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    return build_dataset(tiny_world)


@pytest.fixture(scope="session")
def tiny_embed():
    return EmbedConfig(input_dim=64, trunk_dims=(16,), embed_dim=8)



_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Record ``(criterion, passed, detail)`` for the acceptance summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def _record(number: int, passed: bool, detail: str) -> None:
        store[number] = (passed, detail)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} ({detail})")
