import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safempc.battery_sim import (
    BatteryState,
    InvalidParamsError,
    InvalidStateError,
    KnotTable,
    MismatchSpec,
    interp_param,
    load_params,
    params_from_dict,
    perturb_params,
    simulate_episode,
    step_plant,
    terminal_voltage,
)

from conftest import flat_params

CELL = load_params()


def natural_spline_oracle(xs, ys, x):
    """Natural cubic spline via the second-derivative tridiagonal system."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    n = len(xs)
    h = np.diff(xs)
    a = np.zeros((n, n))
    r = np.zeros(n)
    a[0, 0] = a[-1, -1] = 1.0
    for k in range(1, n - 1):
        a[k, k - 1] = h[k - 1]
        a[k, k] = 2.0 * (h[k - 1] + h[k])
        a[k, k + 1] = h[k]
        r[k] = 6.0 * ((ys[k + 1] - ys[k]) / h[k] - (ys[k] - ys[k - 1]) / h[k - 1])
    m = np.linalg.solve(a, r)
    k = min(max(np.searchsorted(xs, x) - 1, 0), n - 2)
    hk, dl, dr = h[k], x - xs[k], xs[k + 1] - x
    return (m[k] * dr**3 + m[k + 1] * dl**3) / (6 * hk) + (ys[k] / hk - m[k] * hk / 6) * dr + (
        ys[k + 1] / hk - m[k + 1] * hk / 6
    ) * dl


# -- interpolation ------------------------------------------------------------


def test_constant_table_reproduced():
    assert interp_param(KnotTable((0, 0.5, 1), (1, 1, 1)), 0.25) == 1.0


def test_three_knot_hat_matches_tridiagonal_solve():
    tab = KnotTable((0, 0.5, 1), (0, 1, 0))
    expected = natural_spline_oracle(tab.soc, tab.value, 0.25)
    assert expected == pytest.approx(0.6875, abs=1e-15)
    assert interp_param(tab, 0.25) == pytest.approx(expected, abs=1e-14)


def test_bundled_tables_match_oracle_between_knots():
    for name in ("r0", "r1", "c1", "ocv"):
        tab = CELL.table(name)
        for x in np.linspace(0, 1, 37):
            assert interp_param(tab, x) == pytest.approx(natural_spline_oracle(tab.soc, tab.value, x), rel=1e-10)


def test_knots_reproduced_exactly():
    for name in ("r0", "r1", "c1", "ocv"):
        tab = CELL.table(name)
        for s, v in zip(tab.soc, tab.value):
            assert abs(interp_param(tab, s) - v) <= 1e-12 * max(1.0, abs(v))


def test_soc_outside_unit_interval_is_clamped(caplog):
    tab = CELL.ocv
    with caplog.at_level("WARNING"):
        assert interp_param(tab, 1.2) == interp_param(tab, 1.0)
    assert "clamping" in caplog.text


@pytest.mark.parametrize("soc,value", [((0.0, 0.5), (1, 1)), ((0.1, 1.0), (1, 1)), ((0.0, 0.6, 0.5, 1.0), (1, 1, 1, 1))])
def test_invalid_knots_rejected(soc, value):
    with pytest.raises(InvalidParamsError):
        KnotTable(soc, value)


def test_table_file_requires_schema_version():
    doc = CELL.to_dict()
    assert params_from_dict(doc) == CELL
    doc["schema_version"] = 7
    with pytest.raises(InvalidParamsError):
        params_from_dict(doc)


# -- dynamics -----------------------------------------------------------------


def test_zero_current_fixed_point():
    p = flat_params()
    x = BatteryState(0.4, 0.0, p.t_amb)
    assert step_plant(x, 0.0, p) == x


def test_soc_row_direct_substitution():
    p = flat_params(dt=1.0)
    x1 = step_plant(BatteryState(0.5, 0.0, 298.0), 6.0, p)
    assert x1.z == 0.5 + 6.0 / 7200.0


def test_full_step_against_hand_evaluation():
    p = flat_params(r0=0.03, r1=0.02, c1=2000.0, c_th=50.0, r_th=10.0, t_amb=298.0, dt=10.0)
    x1 = step_plant(BatteryState(0.5, 0.01, 300.0), 4.0, p)
    # z: 0.5 + 10*4/7200; u1: (0.01 - 0.08) e^{-10/40} + 0.08; T: 300 + 0.2 (16*0.05 - 0.2)
    assert x1.z == pytest.approx(0.5 + 40.0 / 7200.0, abs=1e-15)
    assert x1.u1 == pytest.approx(-0.07 * math.exp(-0.25) + 0.08, abs=1e-15)
    assert x1.t == pytest.approx(300.12, abs=1e-12)


def test_terminal_voltage_sign_conventions():
    x = BatteryState(0.5, 0.05, 298.0)
    assert terminal_voltage(x, 2.0, flat_params(r0=0.03, ocv=3.7)) == pytest.approx(3.81, abs=1e-14)
    assert terminal_voltage(x, 2.0, flat_params(r0=0.03, ocv=3.7, vt_sign=-1.0)) == pytest.approx(3.59, abs=1e-14)
    assert terminal_voltage(BatteryState(0.37, 0.0, 300.0), 0.0, CELL) == interp_param(CELL.ocv, 0.37)


def test_soc_clamped_at_full():
    x = step_plant(BatteryState(0.9999, 0.0, 298.0), 6.0, CELL)
    assert x.z == 1.0


@pytest.mark.parametrize("x,i", [(BatteryState(math.nan, 0, 298), 1.0), (BatteryState(0.5, 0, 298), math.inf),
                                 (BatteryState(0.5, 0, -1.0), 0.0)])
def test_non_finite_input_rejected(x, i):
    with pytest.raises(InvalidStateError):
        step_plant(x, i, CELL)


@settings(max_examples=50, deadline=None)
@given(z=st.floats(0, 1), u1=st.floats(-0.2, 0.2), t=st.floats(260, 340))
def test_zero_current_relaxes_temperature(z, u1, t):
    assert CELL.dt / (CELL.c_th * CELL.r_th) <= 1
    x1 = step_plant(BatteryState(z, u1, t), 0.0, CELL)
    assert abs(x1.t - CELL.t_amb) <= abs(t - CELL.t_amb)


@settings(max_examples=30, deadline=None)
@given(z=st.floats(0, 1), u1=st.floats(-0.2, 0.2).filter(lambda v: abs(v) > 1e-6))
def test_zero_current_geometric_rc_decay(z, u1):
    r1, c1 = interp_param(CELL.r1, z), interp_param(CELL.c1, z)
    factor = math.exp(-CELL.dt / (r1 * c1))
    x = BatteryState(z, u1, 300.0)
    for k in range(1, 21):
        x = step_plant(x, 0.0, CELL)
        assert x.u1 == pytest.approx(u1 * factor**k, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(z0=st.floats(0, 0.3), currents=st.lists(st.floats(0, 6), min_size=1, max_size=40))
def test_soc_telescoping(z0, currents):
    x = BatteryState(z0, 0.0, 300.0)
    for i in currents:
        x = step_plant(x, i, CELL)
    assert x.z - z0 == pytest.approx(CELL.eta * CELL.dt / CELL.q * sum(currents), abs=1e-12)


# -- mismatch -----------------------------------------------------------------


def test_zero_mismatch_is_identity():
    assert perturb_params(CELL, MismatchSpec(0.0, 3)) == CELL


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.floats(0.0, 0.6))
def test_mismatch_deterministic_and_bounded(seed, m):
    spec = MismatchSpec(m, seed, targets=("r0", "r1", "c1", "ocv", "q", "c_th", "r_th"))
    a, b = perturb_params(CELL, spec), perturb_params(CELL, spec)
    assert a == b
    for name in ("r0", "r1", "c1", "ocv"):
        ratio = np.array(a.table(name).value) / np.array(CELL.table(name).value)
        assert np.all((ratio >= 1 - m - 1e-12) & (ratio <= 1 + m + 1e-12))
    for name in ("q", "c_th", "r_th"):
        assert 1 - m - 1e-12 <= getattr(a, name) / getattr(CELL, name) <= 1 + m + 1e-12


def test_mismatch_spec_validation():
    with pytest.raises(ValueError):
        MismatchSpec(1.0)
    with pytest.raises(ValueError):
        MismatchSpec(0.2, targets=("dt",))


# -- episodes -----------------------------------------------------------------


def test_zero_current_episode_keeps_soc():
    tr = simulate_episode(lambda x: 0.0, BatteryState(0.3, 0.0, 300.0), 10, CELL)
    assert tr.states.shape == (11, 3)
    assert np.all(tr.z == 0.3)


def test_constant_current_soc_is_affine_until_clamp():
    p = flat_params()
    tr = simulate_episode(lambda x: 6.0, BatteryState(0.0, 0.0, 298.0), 130, p)
    k = np.arange(131)
    expected = np.minimum(k * p.eta * p.dt * 6.0 / p.q, 1.0)
    assert np.allclose(tr.z, expected, rtol=0, atol=1e-12)
    assert tr.z[-1] == 1.0


def test_constant_current_temperature_recursion():
    p = flat_params(r0=0.03, r1=0.02, c_th=50.0, r_th=10.0, t_amb=298.0, dt=10.0)
    tr = simulate_episode(lambda x: 3.0, BatteryState(0.2, 0.0, 301.0), 5, p)
    t = 301.0
    for k in range(1, 6):
        t = t + 10.0 / 50.0 * (9.0 * 0.05 - (t - 298.0) / 10.0)
        assert tr.temperature[k] == pytest.approx(t, abs=1e-12)


def test_controller_failure_marks_episode():
    def ctrl(x):
        if x.z > 0.105:
            raise RuntimeError("boom")
        return 6.0

    tr = simulate_episode(ctrl, BatteryState(0.1, 0.0, 300.0), 50, CELL)
    assert tr.failed and tr.failed_at is not None
    assert len(tr.z) == tr.failed_at + 1 and len(tr.currents) == tr.failed_at


def test_trajectory_csv_columns(tmp_path):
    tr = simulate_episode(lambda x: 2.0, BatteryState(0.2, 0.0, 300.0), 3, CELL)
    path = tmp_path / "t.csv"
    tr.to_csv(path, "hello")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hello"
    assert lines[1] == "k,time_s,z,u1_V,T_K,I_A,VT_V"
    assert len(lines) == 2 + 4
