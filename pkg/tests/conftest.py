import numpy as np
import pytest
from hypothesis import strategies as st


@st.composite
def prob_vectors(draw, k=None, min_k=2, max_k=6, allow_zeros=False):
    """Random points on the simplex (optionally with exact zeros)."""
    k = draw(st.integers(min_k, max_k)) if k is None else k
    lo = 0.0 if allow_zeros else 1e-3
    raw = draw(st.lists(st.floats(lo, 1.0, allow_nan=False), min_size=k, max_size=k))
    raw = np.array(raw)
    if raw.sum() <= 0:
        raw[0] = 1.0
    return raw / raw.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
