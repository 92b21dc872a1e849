"""Shared fixtures and the acceptance summary printed at the end of the run."""
from __future__ import annotations

import numpy as np
import pytest

from vrpvcsd.instance import CustomerRealization, InstanceSpec, Kind, ServiceArea, DENSITIES, Level

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def toy_spec(Q=25.0, L=100.0, m=1, depot=(0.0, 0.0)) -> InstanceSpec:
    """Hand-sized instance: generated-customer family, single open area."""
    area = ServiceArea(width=100.0, height=100.0, depot=depot, active_zones=tuple(range(25)))
    return InstanceSpec(kind=Kind.VCSD, Q=float(Q), m=int(m), L=float(L), area=area,
                        density=DENSITIES[Level.VERY_LOW])


def toy_realization(points, dbar) -> CustomerRealization:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return CustomerRealization(np.arange(1, len(pts) + 1), pts, np.asarray(dbar, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
