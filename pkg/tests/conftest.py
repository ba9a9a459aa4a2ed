import numpy as np
import pytest

from powersmc.lm import mismatch_model, random_tabular, two_sequence_model


def oracle_model():
    """Alphabet 3 (two ordinary tokens + EOS), t_cap 4."""
    return random_tabular(2, 4, seed=0, concentration=5.0)


@pytest.fixture
def oracle():
    return oracle_model()


@pytest.fixture
def two_seq():
    return two_sequence_model()


@pytest.fixture
def mismatch():
    return mismatch_model()


def random_rows(rng, n, low=2, high=64, scale=2.0):
    """Random normalized log-probability rows of varying alphabet size."""
    out = []
    for _ in range(n):
        logits = scale * rng.standard_normal(int(rng.integers(low, high + 1)))
        out.append(logits - np.logaddexp.reduce(logits))
    return out


# acceptance criterion outcomes, printed once at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {num:>2}: {title} ({detail})")
