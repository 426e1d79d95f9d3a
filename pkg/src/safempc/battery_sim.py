"""Discrete-time R-RC equivalent-circuit battery with a lumped thermal node.

State is ``(z, u1, t)``: state of charge, RC-branch voltage [V] and cell
temperature [K]. Positive current charges the cell. Circuit elements are
natural cubic splines in SOC; current and temperature dependence is ignored.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import _numerics as nx

logger = logging.getLogger(__name__)

TABLE_NAMES = ("r0", "r1", "c1", "ocv")
SCALAR_NAMES = ("eta", "q", "c_th", "r_th", "t_amb", "dt")
TRAJECTORY_COLUMNS = ("k", "time_s", "z", "u1_V", "T_K", "I_A", "VT_V")


class InvalidStateError(ValueError):
    """Raised when a state or input is not finite."""


class InvalidParamsError(ValueError):
    """Raised when a parameter table violates its invariants."""


@dataclass(frozen=True)
class BatteryState:
    z: float
    u1: float
    t: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z, self.u1, self.t], dtype=float)

    def check(self) -> None:
        if not all(math.isfinite(v) for v in (self.z, self.u1, self.t)):
            raise InvalidStateError(f"non-finite state {self}")
        if self.t <= 0.0:
            raise InvalidStateError(f"temperature must be positive kelvin, got {self.t}")


@dataclass(frozen=True)
class KnotTable:
    """Knots ``(soc, value)`` of one SOC-dependent circuit element."""

    soc: tuple[float, ...]
    value: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "soc", tuple(float(s) for s in self.soc))
        object.__setattr__(self, "value", tuple(float(v) for v in self.value))
        if len(self.soc) != len(self.value) or len(self.soc) < 2:
            raise InvalidParamsError("knot table needs at least two (soc, value) pairs of equal length")
        if any(b <= a for a, b in zip(self.soc, self.soc[1:])):
            raise InvalidParamsError("soc knots must be strictly increasing")
        if self.soc[0] > 0.0 or self.soc[-1] < 1.0:
            raise InvalidParamsError("soc knots must span [0, 1]")
        if not all(math.isfinite(v) for v in self.value):
            raise InvalidParamsError("knot values must be finite")

    def spline(self) -> CubicSpline:
        # two knots: a natural spline is the chord
        return CubicSpline(self.soc, self.value, bc_type="natural")

    def scaled(self, factors: Sequence[float]) -> "KnotTable":
        return KnotTable(self.soc, tuple(v * f for v, f in zip(self.value, factors)))


@dataclass(frozen=True)
class EcmParams:
    """Circuit tables plus thermal/capacity constants.

    ``vt_sign`` selects the terminal-voltage convention: ``+1`` adds the
    polarization and ohmic drops while charging, ``-1`` subtracts them.
    """

    r0: KnotTable
    r1: KnotTable
    c1: KnotTable
    ocv: KnotTable
    eta: float = 1.0
    q: float = 7200.0
    c_th: float = 45.0
    r_th: float = 15.0
    t_amb: float = 298.0
    dt: float = 10.0
    vt_sign: float = 1.0
    name: str = ""
    _packed: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.q > 0 or not self.c_th > 0 or not self.r_th > 0 or not self.dt > 0:
            raise InvalidParamsError("q, c_th, r_th and dt must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise InvalidParamsError(f"eta must lie in (0, 1], got {self.eta}")
        if self.vt_sign not in (1.0, -1.0):
            raise InvalidParamsError("vt_sign must be +1 or -1")
        if not self.t_amb > 0:
            raise InvalidParamsError("t_amb must be positive kelvin")
        object.__setattr__(self, "_packed", _pack(self))
        grid = np.linspace(0.0, 1.0, 401)
        for name in ("r0", "r1", "c1"):
            vals = getattr(self, name).spline()(grid)
            if np.min(vals) <= 0.0:
                raise InvalidParamsError(f"interpolated {name} is not positive on [0, 1]")

    @property
    def packed(self) -> tuple:
        """``(bx, bc, bn, consts)`` arrays for the compiled kernels."""
        return self._packed

    def table(self, name: str) -> KnotTable:
        return getattr(self, name)

    def to_dict(self) -> dict:
        out = {"schema_version": 1, "name": self.name, "tables": {}}
        for name in TABLE_NAMES:
            t = self.table(name)
            out["tables"][name] = {"soc": list(t.soc), "value": list(t.value)}
        for name in SCALAR_NAMES:
            out[name] = getattr(self, name)
        return out


def _pack(p: EcmParams) -> tuple:
    tables = [p.r0, p.r1, p.c1, p.ocv]
    kmax = max(len(t.soc) for t in tables)
    bx = np.zeros((4, kmax))
    bc = np.zeros((4, 4, kmax - 1))
    bn = np.zeros(4, dtype=np.int64)
    for j, t in enumerate(tables):
        sp = t.spline()
        n = len(t.soc)
        bx[j, :n] = sp.x
        bc[j, :, : n - 1] = sp.c
        # exact knot ordinates; CubicSpline keeps them, this pins the bits
        bc[j, 3, : n - 1] = t.value[:-1]
        bn[j] = n
    consts = np.array([p.eta, p.q, p.c_th, p.r_th, p.t_amb, p.dt, p.vt_sign])
    for arr in (bx, bc, bn, consts):
        arr.setflags(write=False)
    return bx, bc, bn, consts


def params_from_dict(doc: Mapping, vt_sign: float = 1.0) -> EcmParams:
    """Build :class:`EcmParams` from the parameter-table document."""
    if doc.get("schema_version") != 1:
        raise InvalidParamsError(f"unsupported parameter-table schema_version {doc.get('schema_version')!r}")
    tables = doc.get("tables", {})
    missing = [n for n in TABLE_NAMES if n not in tables]
    if missing:
        raise InvalidParamsError(f"parameter table is missing {missing}")
    kw = {n: KnotTable(tables[n]["soc"], tables[n]["value"]) for n in TABLE_NAMES}
    for n in SCALAR_NAMES:
        if n not in doc:
            raise InvalidParamsError(f"parameter table is missing scalar {n!r}")
        kw[n] = float(doc[n])
    return EcmParams(**kw, vt_sign=vt_sign, name=str(doc.get("name", "")))


def load_params(path: str | Path | None = None, vt_sign: float = 1.0) -> EcmParams:
    """Read a parameter-table JSON file; ``None`` loads the bundled synthetic cell."""
    if path is None:
        text = resources.files("safempc.data").joinpath("synthetic_nmc_18650.json").read_text()
    else:
        text = Path(path).read_text()
    return params_from_dict(json.loads(text), vt_sign=vt_sign)


def interp_param(table: KnotTable, soc: float) -> float:
    """Natural cubic spline value of ``table`` at ``soc`` (clamped to [0, 1])."""
    if soc < 0.0 or soc > 1.0:
        logger.warning("soc %.6g outside [0, 1]; clamping before interpolation", soc)
        soc = min(max(soc, 0.0), 1.0)
    return float(table.spline()(soc))


def step_plant(x: BatteryState, i: float, p: EcmParams) -> BatteryState:
    """Advance the plant one sampling period; SOC is clamped to [0, 1]."""
    x.check()
    if not math.isfinite(i):
        raise InvalidStateError(f"non-finite current {i}")
    bx, bc, bn, consts = p.packed
    z, u1, t = nx.step(x.z, x.u1, x.t, float(i), bx, bc, bn, consts)
    if z > 1.0 or z < 0.0:
        logger.debug("soc %.6g clamped to [0, 1]", z)
        z = min(max(z, 0.0), 1.0)
    return BatteryState(z, u1, t)


def terminal_voltage(x: BatteryState, i: float, p: EcmParams) -> float:
    if not (math.isfinite(x.z) and math.isfinite(x.u1) and math.isfinite(i)):
        raise InvalidStateError("non-finite input to terminal_voltage")
    bx, bc, bn, consts = p.packed
    return nx.output(x.z, x.u1, float(i), bx, bc, bn, consts)


@dataclass(frozen=True)
class MismatchSpec:
    """Multiplicative uniform perturbation of the prediction-model parameters.

    ``targets`` names what gets perturbed; by default the resistive and
    capacitive tables plus the two thermal constants. OCV and capacity stay
    nominal.
    """

    max_relative_perturbation: float = 0.5
    seed: int = 0
    mode: str = "multiplicative-uniform"
    targets: tuple[str, ...] = ("r0", "r1", "c1", "c_th", "r_th")

    def __post_init__(self):
        if not 0.0 <= self.max_relative_perturbation < 1.0:
            raise ValueError("max_relative_perturbation must lie in [0, 1)")
        if self.mode != "multiplicative-uniform":
            raise ValueError(f"unknown mismatch mode {self.mode!r}")
        unknown = set(self.targets) - set(TABLE_NAMES) - {"eta", "q", "c_th", "r_th"}
        if unknown:
            raise ValueError(f"cannot perturb {sorted(unknown)}")


def perturb_params(p: EcmParams, spec: MismatchSpec, max_tries: int = 100) -> EcmParams:
    """Draw an independent factor in ``[1 - m, 1 + m]`` per scalar and per table ordinate."""
    m = spec.max_relative_perturbation
    if m == 0.0:
        return p
    rng = np.random.default_rng(spec.seed)
    for _ in range(max_tries):
        kw = {}
        for name in TABLE_NAMES + ("eta", "q", "c_th", "r_th"):
            if name not in spec.targets:
                continue
            if name in TABLE_NAMES:
                tab = p.table(name)
                kw[name] = tab.scaled(rng.uniform(1.0 - m, 1.0 + m, size=len(tab.value)))
            else:
                kw[name] = getattr(p, name) * rng.uniform(1.0 - m, 1.0 + m)
        if "eta" in kw:
            kw["eta"] = min(kw["eta"], 1.0)
        try:
            return replace(p, **kw)
        except InvalidParamsError:
            # spline undershoot between scaled knots; redraw
            continue
    raise InvalidParamsError(f"no valid perturbation after {max_tries} draws")


@dataclass
class Trajectory:
    """Closed-loop record: ``states`` has M+1 rows, inputs and voltages M rows."""

    states: np.ndarray
    currents: np.ndarray
    voltages: np.ndarray
    dt: float
    failed: bool = False
    failed_at: int | None = None
    message: str = ""

    @property
    def z(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def temperature(self) -> np.ndarray:
        return self.states[:, 2]

    def to_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                for line in header_comment.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            for k, (z, u1, t) in enumerate(self.states):
                if k < len(self.currents):
                    i, v = repr(float(self.currents[k])), repr(float(self.voltages[k]))
                else:
                    i, v = "", ""
                w.writerow([k, repr(k * self.dt), repr(float(z)), repr(float(u1)), repr(float(t)), i, v])


def simulate_episode(
    controller: Callable[[BatteryState], float],
    x0: BatteryState,
    steps: int,
    p_plant: EcmParams,
) -> Trajectory:
    """Run ``steps`` closed-loop sampling periods against the plant.

    The controller sees the measured plant state; ``V_T`` is recorded with
    the current applied during each period. A controller exception or a
    non-finite current ends the episode early with ``failed`` set.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0.check()
    states = np.full((steps + 1, 3), np.nan)
    currents = np.full(steps, np.nan)
    volts = np.full(steps, np.nan)
    states[0] = x0.as_array()
    x = x0
    for k in range(steps):
        try:
            i = float(controller(x))
            if not math.isfinite(i):
                raise InvalidStateError(f"controller returned {i}")
            volts[k] = terminal_voltage(x, i, p_plant)
            x = step_plant(x, i, p_plant)
        except Exception as exc:  # controller or plant breakdown ends the episode
            logger.warning("episode failed at step %d: %s", k, exc)
            return Trajectory(states[: k + 1], currents[:k], volts[:k], p_plant.dt, True, k, str(exc))
        currents[k] = i
        states[k + 1] = x.as_array()
    return Trajectory(states, currents, volts, p_plant.dt)
