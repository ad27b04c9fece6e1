import dataclasses

import pytest
from hypothesis import settings

from cometsim.config import DataConfig, PretrainConfig, ScenarioConfig, StreamConfig

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scenario() -> ScenarioConfig:
    """A fast OPDA scenario: fewer source samples, a 10-batch stream."""
    return ScenarioConfig(
        name="small",
        data=DataConfig(input_dim=8, source_per_class=80),
        stream=StreamConfig(num_samples=640),
        pretrain=PretrainConfig(epochs=15),
    ).with_hyper(batch_size=64, lam=60.0)


@pytest.fixture(scope="session")
def small_pda(small_scenario) -> ScenarioConfig:
    from cometsim.config import ClassSplit

    return dataclasses.replace(small_scenario, split=ClassSplit(shared=6, source_private=3, target_private=0))


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
