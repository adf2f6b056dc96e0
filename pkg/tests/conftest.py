import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gnnbound.graph import generate  # noqa: E402
from gnnbound.model import DatasetExample  # noqa: E402


def random_example(seed, n=6, d0=3, k=2, p=0.5):
    rng = np.random.default_rng(seed)
    G = generate("erdos_renyi", {"n": n, "p": p}, seed=seed)
    return DatasetExample(rng.standard_normal((n, d0)), G, int(rng.integers(k)))


def random_dataset(count, seed, n=6, d0=3, k=2):
    return [random_example(seed * 1000 + i, n, d0, k) for i in range(count)]


@pytest.fixture
def example():
    return random_example(0)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
