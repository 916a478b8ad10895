import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from parampde.multiindex import MultiIndex

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def multi_indices(draw, max_dim: int = 5, max_exp: int = 4) -> MultiIndex:
    dense = draw(st.lists(st.integers(0, max_exp), min_size=0, max_size=max_dim))
    return MultiIndex.from_dense(dense)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240521)


# one line per acceptance criterion, echoed in the terminal summary so it survives output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
