import pytest

from ppdm.core import Box, GridConfig, Triplet


@pytest.fixture
def grid():
    return GridConfig(128, 128, 4, 5, 6)


def box_at(cx, cy, w, h):
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def triplet(h=(40, 40, 16, 16), o=(80, 60, 24, 16), verb=0, cat=0, score=1.0):
    return Triplet(box_at(*h), box_at(*o), verb, cat, score)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
