import numpy as np
import pytest

from bootmi import IncompleteDataset


def make_dataset(n=200, p=8, rate=0.0, seed=0, beta_d=1.0, beta_y=None):
    """Small linear design: D depends on X1, Y on D and X1."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    d = beta_d * x[:, 0] + rng.standard_normal(n)
    y = 0.5 * d + (1.0 if beta_y is None else beta_y) * x[:, 0] + rng.standard_normal(n)
    mask = rng.random((n, p)) >= rate
    return IncompleteDataset.from_arrays(y, d, x, x_mask=mask)


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture
def incomplete_dataset():
    return make_dataset(rate=0.2, seed=1)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the terminal summary."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
