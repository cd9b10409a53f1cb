import numpy as np
import pytest

from milr.data import generate_dataset
from milr.milr import MilrConfig, stage1_collect, train_milr
from milr.nn import freeze
from milr.protonet import ProtonetConfig, train_protonet


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(n_classes=5, samples_per_class=12, seed=0)


@pytest.fixture(scope="session")
def small_encoder(small_dataset):
    """Briefly trained, frozen encoder; enough structure for unit-level checks."""
    enc, _ = train_protonet(small_dataset, ProtonetConfig(episodes=40, n_query=3), seed=0)
    return freeze(enc)


@pytest.fixture(scope="session")
def small_cache(small_encoder, small_dataset):
    return stage1_collect(small_encoder, small_dataset.images)


@pytest.fixture(scope="session")
def small_state(small_dataset, small_encoder, small_cache):
    cfg = MilrConfig(episodes=30, n_query=3)
    state, _ = train_milr(small_dataset, small_encoder, cfg, seed=0, cache=small_cache)
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
