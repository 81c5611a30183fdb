import numpy as np
import pytest

from lowprob.instances import enumerable_instance
from lowprob.microlm import ModelSpec, init_weights


@pytest.fixture(scope="session")
def tiny_spec():
    return ModelSpec(n_layers=1, d_model=16, n_heads=4, d_mlp=32, vocab_size=32, max_seq_len=8)


@pytest.fixture(scope="session")
def tiny_model(tiny_spec):
    return init_weights(tiny_spec, seed=0)


@pytest.fixture(scope="session")
def enum_instance():
    """|V| = 8, k = 6, uniform inputs: 262,144 sequences, five targets in [1e-4, 1e-2]."""
    return enumerable_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one (criterion, passed, detail) line per acceptance criterion."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
