import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmshape.mmspace import path_graph  # noqa: E402

import helpers  # noqa: E402


@pytest.fixture
def p3():
    return path_graph(3)


@pytest.fixture(params=sorted(helpers.SMALL_SPECS))
def small(request):
    return helpers.small_space(request.param)


def pytest_terminal_summary(terminalreporter):
    lines = helpers.ACCEPTANCE_LINES
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(lines):
        parts = lines[num]
        ok = all(p[0] for p in parts)
        detail = "; ".join(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
