import logging

import numpy as np
import pytest

from prrx.txgen import TxConfig, transmit


@pytest.fixture(autouse=True)
def _quiet_alias_warning():
    logging.getLogger("prrx.frontend").setLevel(logging.ERROR)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def dual_tx():
    return transmit(TxConfig(n_symbols=1024, seed=3))


@pytest.fixture(scope="session")
def single_tx():
    return transmit(TxConfig(n_symbols=1024, seed=4, n_polarizations=1))


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""

    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
