import numpy as np
import pytest
import torch

from graphdiff.skeleton import build_skeleton

torch.set_num_threads(1)


@pytest.fixture
def chain4():
    """A 4-joint toy skeleton: root with two mirrored limbs and a spine."""
    return build_skeleton(4, [(0, 1), (0, 2), (0, 3)], flip_pairs=[(1, 2)], root_index=0, name="toy4")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion and assert on it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(number: int, title: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
        lines.append((number, line))
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
