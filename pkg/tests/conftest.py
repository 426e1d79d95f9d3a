"""Shared fixtures: flat-table cells with hand-checkable dynamics."""

from __future__ import annotations

import pytest

from safempc.battery_sim import EcmParams, KnotTable, load_params


def flat_table(value: float) -> KnotTable:
    return KnotTable((0.0, 0.5, 1.0), (value, value, value))


def flat_params(r0=0.03, r1=0.02, c1=2000.0, ocv=3.7, eta=1.0, q=7200.0, c_th=50.0, r_th=10.0,
                t_amb=298.0, dt=10.0, vt_sign=1.0) -> EcmParams:
    return EcmParams(
        flat_table(r0), flat_table(r1), flat_table(c1), flat_table(ocv),
        eta=eta, q=q, c_th=c_th, r_th=r_th, t_amb=t_amb, dt=dt, vt_sign=vt_sign,
    )


@pytest.fixture(scope="session")
def cell():
    return load_params()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
