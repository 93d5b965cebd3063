import os

import numpy as np
import pytest

from gmtl.data import TEC, prepare_tasks, synth_paired_tasks

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"\ncriterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_pair():
    return synth_paired_tasks(200, vocab_size=80, rho=0.8, seed=3)


@pytest.fixture(scope="session")
def small_data(small_pair):
    return prepare_tasks(small_pair.personality, small_pair.emotion, TEC, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def jobs() -> int:
    return max(1, int(os.environ.get("GMTL_JOBS", "1")))
