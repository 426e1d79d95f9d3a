"""Short-horizon MPC with a conservative soft-constraint cost and an RBF shaping term.

The OCP is transcribed by single shooting over the ``N`` currents. The input
box is handled by projection inside the Newton solver; temperature and
voltage limits only enter through the squared-hinge penalties.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _numerics as nx
from .battery_sim import BatteryState, EcmParams

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The OCP solver produced no finite iterate."""


@dataclass(frozen=True)
class RbfNetwork:
    """Fixed Gaussian RBFs over (terminal voltage, temperature).

    Distances are measured after mapping ``[v_lo, v_hi] x [t_lo, t_hi]``
    affinely onto the unit square; ``widths`` are in those normalized units.
    """

    centers: np.ndarray
    widths: np.ndarray
    v_lo: float = 3.9
    v_hi: float = 4.2
    t_lo: float = 305.0
    t_hi: float = 318.0

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, 2)
        w = np.array(self.widths, dtype=float).reshape(-1)
        if c.shape[0] != w.shape[0]:
            raise ValueError("centers and widths must have the same count")
        if np.any(w <= 0):
            raise ValueError("RBF widths must be positive")
        if not (self.v_hi > self.v_lo and self.t_hi > self.t_lo):
            raise ValueError("normalization box must have positive extent")
        c.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)

    @property
    def count(self) -> int:
        return self.widths.shape[0]

    @classmethod
    def grid(cls, n_v: int = 4, n_t: int = 4, v_range=(3.9, 4.2), t_range=(305.0, 318.0), half_at_neighbor=True):
        """``n_v x n_t`` centers spanning the box; each bump is 0.5 at its nearest neighbor."""
        vs = np.linspace(*v_range, n_v)
        ts = np.linspace(*t_range, n_t)
        centers = np.array([(v, t) for v in vs for t in ts])
        spacing = min(1.0 / (n_v - 1) if n_v > 1 else 1.0, 1.0 / (n_t - 1) if n_t > 1 else 1.0)
        lam = math.log(2.0) / spacing**2 if half_at_neighbor else 1.0
        return cls(centers, np.full(len(centers), lam), v_range[0], v_range[1], t_range[0], t_range[1])

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "widths": self.widths.tolist(),
            "v_lo": self.v_lo,
            "v_hi": self.v_hi,
            "t_lo": self.t_lo,
            "t_hi": self.t_hi,
        }


@dataclass(frozen=True)
class MpcConfig:
    prediction_params: EcmParams
    horizon_n: int = 10
    i_min: float = 0.0
    i_max: float = 6.0
    gamma_t: float = 0.005
    gamma_vt: float = 5.0
    t_max: float = 318.0
    vt_max: float = 4.2
    vt_min: float = 2.5
    slack_t: float = 3.0
    slack_vt: float = 0.05
    tol_kkt: float = 1e-6
    max_iter: int = 200
    n_random_starts: int = 2
    n_screen: int = 32
    rbf_unit: float = 0.004

    def __post_init__(self):
        if self.horizon_n < 1:
            raise ValueError("horizon_n must be >= 1")
        if self.i_min > self.i_max:
            raise ValueError("i_min must not exceed i_max")
        for name in ("gamma_t", "gamma_vt", "slack_t", "slack_vt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.rbf_unit > 0:
            raise ValueError("rbf_unit must be positive")
        if self.n_random_starts < 0 or self.n_screen < self.n_random_starts:
            raise ValueError("need 0 <= n_random_starts <= n_screen")

    @property
    def weight_unit(self) -> float:
        """Cost value of one unit of RBF weight.

        The default 0.004 is about half the drop in ``(1 - z)^2`` that one
        full-current sampling period buys from half charge on the bundled
        cell, so a weight of 1 trades against roughly half a step of charging.
        """
        return float(self.rbf_unit)

    def scaled_weights(self, theta, net: "RbfNetwork") -> np.ndarray:
        # zero weights stay exactly zero, which keeps theta = 0 bitwise equal to no RBF term
        return self.weight_unit * _check_theta(theta, net)

    def cost_params(self, net: RbfNetwork) -> np.ndarray:
        return np.array(
            [
                self.gamma_t,
                self.gamma_vt,
                self.t_max - self.slack_t,
                self.vt_max - self.slack_vt,
                net.v_lo,
                net.v_hi - net.v_lo,
                net.t_lo,
                net.t_hi - net.t_lo,
            ]
        )


def _check_theta(theta, net: RbfNetwork) -> np.ndarray:
    w = np.ascontiguousarray(theta, dtype=float).reshape(-1)
    if w.shape[0] != net.count:
        raise ValueError(f"theta has {w.shape[0]} weights, network has {net.count} RBFs")
    return w


def rbf_cost(vt: float, t: float, theta, net: RbfNetwork) -> float:
    """Unscaled RBF sum ``sum_i w_i exp(-lambda_i ||(v, t) - c_i||^2)`` in normalized coordinates."""
    w = _check_theta(theta, net)
    cp = np.array([0, 0, 0, 0, net.v_lo, net.v_hi - net.v_lo, net.t_lo, net.t_hi - net.t_lo], dtype=float)
    val, _, _ = nx.rbf_value_grad(float(vt), float(t), cp, net.centers, net.widths, w)
    return val


def stage_cost(x_pred: BatteryState, vt_pred: float, theta, cfg: MpcConfig, net: RbfNetwork) -> float:
    """Tracking, soft temperature/voltage penalties and ``cfg.weight_unit`` times the RBF sum."""
    w = cfg.scaled_weights(theta, net)
    c, _, _, _ = nx.stage(
        float(x_pred.z), float(x_pred.t), float(vt_pred), cfg.cost_params(net), net.centers, net.widths, w, True
    )
    return c


@dataclass
class OcpSolution:
    inputs: np.ndarray
    cost: float
    iterations: int
    pg_norm: float
    converged: bool

    @property
    def not_converged(self) -> bool:
        return not self.converged


def ocp_objective(u, x_meas: BatteryState, theta, cfg: MpcConfig, net: RbfNetwork, use_rbf: bool = True):
    """Objective and adjoint gradient of the single-shooting OCP at ``u``."""
    u = np.ascontiguousarray(u, dtype=float)
    w = cfg.scaled_weights(theta, net)
    grad = np.empty_like(u)
    bx, bc, bn, consts = cfg.prediction_params.packed
    f = nx.ocp_cost_grad(
        u, grad, x_meas.as_array(), bx, bc, bn, consts, cfg.cost_params(net), net.centers, net.widths, w, use_rbf
    )
    return f, grad


def solve_ocp(
    x_meas: BatteryState,
    theta,
    cfg: MpcConfig,
    net: RbfNetwork,
    warm_start=None,
    rng: np.random.Generator | None = None,
    use_rbf: bool = True,
) -> OcpSolution:
    """Multi-start projected Newton on the horizon's currents.

    Starts are the warm start (or the box midpoint) followed by the
    ``cfg.n_random_starts`` cheapest of ``cfg.n_screen`` uniform draws from
    ``rng``; screening costs one rollout per draw.
    """
    n = cfg.horizon_n
    lo = np.full(n, cfg.i_min)
    hi = np.full(n, cfg.i_max)
    if warm_start is None:
        first = np.full(n, 0.5 * (cfg.i_min + cfg.i_max))
    else:
        first = np.asarray(warm_start, dtype=float)
        if first.shape != (n,):
            raise ValueError(f"warm start must have length {n}")
    w = cfg.scaled_weights(theta, net)
    bx, bc, bn, consts = cfg.prediction_params.packed
    rows = [first]
    if cfg.n_random_starts > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        cands = rng.uniform(cfg.i_min, cfg.i_max, size=(cfg.n_screen, n))
        rows.extend(nx.screen_starts(cands, cfg.n_random_starts, x_meas.as_array(), bx, bc, bn, consts,
                                     cfg.cost_params(net), net.centers, net.widths, w, use_rbf))
    starts = np.ascontiguousarray(np.vstack(rows))
    u, f, it, pg, ok = nx.solve_multistart(
        starts,
        lo,
        hi,
        cfg.tol_kkt,
        cfg.max_iter,
        x_meas.as_array(),
        bx,
        bc,
        bn,
        consts,
        cfg.cost_params(net),
        net.centers,
        net.widths,
        w,
        use_rbf,
    )
    if not math.isfinite(f) or not np.all(np.isfinite(u)):
        raise SolverError(f"no finite OCP iterate at state {x_meas}")
    return OcpSolution(u, float(f), int(it), float(pg), bool(ok))


@dataclass
class MpcController:
    """Receding-horizon policy; owns its warm start and random-start stream.

    One instance per episode. ``log_path`` appends one JSON line per solve.
    """

    cfg: MpcConfig
    net: RbfNetwork
    theta: np.ndarray
    seed: int = 0
    use_rbf: bool = True
    log_path: str | Path | None = None
    warm_start: np.ndarray | None = None
    n_not_converged: int = field(default=0, init=False)

    def __post_init__(self):
        self.theta = _check_theta(self.theta, self.net)
        self._rng = np.random.default_rng(self.seed)

    def __call__(self, x: BatteryState) -> float:
        sol = solve_ocp(x, self.theta, self.cfg, self.net, self.warm_start, self._rng, self.use_rbf)
        if sol.not_converged:
            self.n_not_converged += 1
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(
                    json.dumps({"iterations": sol.iterations, "pg_norm": sol.pg_norm, "cost": sol.cost}) + "\n"
                )
        u = sol.inputs
        self.warm_start = np.concatenate([u[1:], u[-1:]])
        return float(u[0])


def mpc_policy(x_meas: BatteryState, theta, cfg: MpcConfig, net: RbfNetwork, controller: MpcController | None = None):
    """First input of the OCP solution; pass ``controller`` to carry the warm start."""
    if controller is None:
        controller = MpcController(cfg, net, theta)
    return controller(x_meas)
