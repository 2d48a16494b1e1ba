"""Shared fixtures for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from pagroup import PlacementError, SceneSpec, generate_scene


def scene_seeds(n: int, size_range=(20, 30), limit: int = 2000) -> list[int]:
    """First n seeds whose scenes place successfully with these settings."""
    out = []
    s = 0
    while len(out) < n and s < limit:
        try:
            generate_scene(SceneSpec(seed=s, size_range=size_range))
            out.append(s)
        except PlacementError:
            pass
        s += 1
    if len(out) < n:
        raise RuntimeError(f"only {len(out)} of {n} scene seeds placed")
    return out


@pytest.fixture(scope="session")
def rng():
    return np.random.Generator(np.random.Philox(20260823))


# One line per acceptance criterion, echoed after the run so the
# PASS/FAIL summary survives output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
