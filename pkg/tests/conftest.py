from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from schrostrip.grid import make_grid

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def small_grid():
    return make_grid(L=2.0, d=1.0, T=1.0, nx=21, ny=11, nt=11, t_clamp=0.05)


@pytest.fixture
def small_full_grid():
    return make_grid(L=2.0, d=1.0, T=1.0, nx=21, ny=11, nt=21, t_clamp=0.05, span="full")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
