import numpy as np
import pytest

from sparsecascade.topology import Topology

# (criterion number, title, passed, detail), printed in the terminal summary
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


def small_cascade(widths, layers, name):
    return Topology.from_edges(widths, layers, name)


@pytest.fixture
def bottleneck_212():
    """Two inputs through one hidden neuron to two outputs."""
    return Topology.from_edges([2, 1, 2], [[(0, 0), (1, 0)], [(0, 0), (0, 1)]], "2-1-2")


@pytest.fixture
def cascade_312():
    return Topology.from_edges([3, 1, 2], [[(0, 0), (1, 0), (2, 0)], [(0, 0), (0, 1)]], "3-1-2")


@pytest.fixture
def decomposed_312():
    """The 3-1-2 graph split into neurons with at most two inputs.

    Inputs a, b merge first; c is carried by a constant pass-through and merges
    one layer later, so all 6 trainable edges sit on 2-input/2-output primitives.
    """
    return Topology.from_edges(
        [3, 2, 1, 2],
        [[(0, 0), (1, 0), (2, 1, 1.0)], [(0, 0), (1, 0)], [(0, 0), (0, 1)]],
        "3-1-2 decomposed")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {num:2d}. {title}: {detail}")
