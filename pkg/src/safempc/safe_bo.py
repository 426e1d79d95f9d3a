"""Episodic Bayesian optimization of the RBF weights with log-barrier safety.

The loop maximizes ``-G0`` (negative mean cumulative SOC tracking error).
Each monitored constraint gets its own GP on the worst-case slack over the
episodes of an iteration; a proposal is admissible only where every slack's
lower confidence bound is positive.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.stats import qmc

from . import gp
from .battery_sim import Trajectory

logger = logging.getLogger(__name__)

NEG_INF = -math.inf


class EpisodeFailedError(RuntimeError):
    """At least one episode of an evaluation broke down."""


class InfeasibleProposalError(RuntimeError):
    """No finite acquisition anywhere and no safe incumbent to fall back on."""


@dataclass(frozen=True)
class ConstraintSpec:
    """Box bound on a monitored trajectory quantity.

    ``quantity`` is one of ``"voltage"``, ``"temperature"``, ``"soc"``.
    """

    name: str
    quantity: str
    bound: float
    side: str = "upper"

    def __post_init__(self):
        if self.quantity not in ("voltage", "temperature", "soc"):
            raise ValueError(f"unknown monitored quantity {self.quantity!r}")
        if self.side not in ("upper", "lower"):
            raise ValueError(f"side must be 'upper' or 'lower', got {self.side!r}")
        if not math.isfinite(self.bound):
            raise ValueError("constraint bound must be finite")

    def values(self, tr: Trajectory) -> np.ndarray:
        if self.quantity == "voltage":
            return tr.voltages
        if self.quantity == "temperature":
            return tr.temperature
        return tr.z

    def to_dict(self) -> dict:
        return {"name": self.name, "quantity": self.quantity, "bound": self.bound, "side": self.side}


DEFAULT_CONSTRAINTS = (
    ConstraintSpec("vt_max", "voltage", 4.2, "upper"),
    ConstraintSpec("vt_min", "voltage", 2.5, "lower"),
    ConstraintSpec("t_max", "temperature", 318.0, "upper"),
)


@dataclass(frozen=True)
class BoConfig:
    beta: float = 1.0
    tau: float = 1.0
    acquisition_beta: float = 2.0
    theta_lo: float = -5.0
    theta_hi: float = 5.0
    n_params: int = 16
    n_iterations: int = 40
    n_initial_conditions: int = 4
    constrained: bool = True
    seed: int = 0
    n_candidates: int = 2048
    n_refine: int = 8
    refine_iterations: int = 30
    hyper_starts: int = 4
    initial_lengthscale: float = 0.2

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.n_iterations < 1 or self.n_initial_conditions < 1:
            raise ValueError("n_iterations and n_initial_conditions must be >= 1")
        if not self.theta_hi > self.theta_lo:
            raise ValueError("theta box must have positive width")
        if self.n_params < 1 or self.n_candidates < 1:
            raise ValueError("n_params and n_candidates must be >= 1")

    @property
    def lo(self) -> np.ndarray:
        return np.full(self.n_params, float(self.theta_lo))

    @property
    def hi(self) -> np.ndarray:
        return np.full(self.n_params, float(self.theta_hi))

    def to_unit(self, theta) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - self.theta_lo) / (self.theta_hi - self.theta_lo)

    def from_unit(self, u) -> np.ndarray:
        return self.theta_lo + np.asarray(u, dtype=float) * (self.theta_hi - self.theta_lo)


@dataclass(frozen=True)
class Surrogate:
    """A fitted GP on unit-cube inputs together with the map from raw θ."""

    model: gp.GpModel
    cfg: BoConfig

    def predict(self, thetas) -> tuple[np.ndarray, np.ndarray]:
        return gp.predict(self.model, self.cfg.to_unit(np.atleast_2d(thetas)))


def _predict(model, thetas) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(model, Surrogate):
        return model.predict(thetas)
    return gp.predict(model, np.atleast_2d(np.asarray(thetas, dtype=float)))


# -- episode metrics ---------------------------------------------------------


def performance_objective(trajectories: Sequence[Trajectory]) -> float:
    """Mean over episodes of the cumulative squared SOC deficit ``sum (1 - z_k)^2``.

    Raises
    ------
    EpisodeFailedError
        If any episode failed; the caller substitutes the failure penalty.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    if any(tr.failed for tr in trajectories):
        raise EpisodeFailedError("failed episode in evaluation")
    n = len(trajectories[0].z)
    if any(len(tr.z) != n for tr in trajectories):
        raise ValueError("all trajectories must have the same length")
    return float(np.mean([np.sum((1.0 - tr.z) ** 2) for tr in trajectories]))


def constraint_slack(trajectories: Sequence[Trajectory], spec: ConstraintSpec) -> float:
    """Worst-case margin to the bound over all episodes and steps; negative means violated."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    worst = math.inf
    for tr in trajectories:
        v = spec.values(tr)
        if v.size == 0:
            continue
        s = spec.bound - np.max(v) if spec.side == "upper" else np.min(v) - spec.bound
        worst = min(worst, float(s))
    return worst


# -- acquisition -------------------------------------------------------------


def _log_barrier(mean: np.ndarray, var: np.ndarray, beta: float) -> np.ndarray:
    arg = mean - beta * np.sqrt(var)
    out = np.full(arg.shape, NEG_INF)
    pos = arg > 0
    out[pos] = np.log(arg[pos])
    return out


def barrier_term(model, theta, beta: float) -> float:
    """``log(m - beta * sqrt(k))`` of the slack posterior, or ``-inf`` if not positive."""
    m, v = _predict(model, np.reshape(theta, (1, -1)))
    return float(_log_barrier(m, v, beta)[0])


def acquisition_batch(thetas, perf_model, constraint_models, cfg: BoConfig) -> np.ndarray:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    m0, v0 = _predict(perf_model, thetas)
    val = m0 + cfg.acquisition_beta * np.sqrt(v0)
    if not cfg.constrained:
        return val
    for cm in constraint_models:
        m, v = _predict(cm, thetas)
        val = val + cfg.tau * _log_barrier(m, v, cfg.beta)
    return val


def acquisition(theta, perf_model, constraint_models, cfg: BoConfig) -> float:
    """UCB on ``-G0`` plus ``tau`` times the barrier sum (barrier dropped when unconstrained)."""
    return float(acquisition_batch(np.reshape(theta, (1, -1)), perf_model, constraint_models, cfg)[0])


@dataclass
class Proposal:
    theta: np.ndarray
    value: float
    stalled: bool = False


def _refine(start: np.ndarray, f0: float, fun: Callable[[np.ndarray], np.ndarray], lo, hi, iters: int):
    """Projected ascent with central-difference gradients and step halving."""
    x, fx = start.copy(), f0
    h = 1e-4 * (hi - lo)
    step = 0.05 * float(np.max(hi - lo))
    d = x.shape[0]
    for _ in range(iters):
        pts = np.vstack([x + np.diag(h), x - np.diag(h)])
        pts = np.clip(pts, lo, hi)
        vals = fun(pts)
        idx = np.arange(d)
        span = pts[idx, idx] - pts[d + idx, idx]
        with np.errstate(invalid="ignore"):
            g = (vals[:d] - vals[d:]) / np.where(span > 0, span, 1.0)
        g[~np.isfinite(g)] = 0.0
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            break
        moved = False
        while step > 1e-6 * float(np.max(hi - lo)):
            y = np.clip(x + step * g / gn, lo, hi)
            fy = float(fun(y[None, :])[0])
            if fy > fx:
                x, fx = y, fy
                step *= 2.0
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return x, fx


def propose_next(perf_model, constraint_models, cfg: BoConfig, rng: np.random.Generator,
                 incumbent=None) -> Proposal:
    """Maximize the acquisition by Sobol sampling plus local refinement.

    Candidates are ``cfg.n_candidates`` scrambled Sobol points of the θ box;
    the best ``cfg.n_refine`` finite ones and ``incumbent`` are refined.
    """
    lo, hi = cfg.lo, cfg.hi

    def fun(x):
        return acquisition_batch(x, perf_model, constraint_models, cfg)

    sobol = qmc.Sobol(cfg.n_params, scramble=True, seed=rng)
    m = max(int(math.ceil(math.log2(cfg.n_candidates))), 0)
    raw = sobol.random_base2(m)[: cfg.n_candidates]
    cand = cfg.from_unit(raw)
    vals = fun(cand)
    finite = np.flatnonzero(np.isfinite(vals))
    order = finite[np.argsort(-vals[finite], kind="stable")][: cfg.n_refine]
    starts = [(cand[i], float(vals[i])) for i in order]
    if incumbent is not None:
        inc = np.clip(np.asarray(incumbent, dtype=float), lo, hi)
        fi = float(fun(inc[None, :])[0])
        if math.isfinite(fi):
            starts.append((inc, fi))
    if not starts:
        if incumbent is None:
            raise InfeasibleProposalError("no candidate has finite acquisition and there is no safe incumbent")
        logger.warning("acquisition is -inf everywhere sampled; re-evaluating the incumbent")
        return Proposal(np.asarray(incumbent, dtype=float).copy(), NEG_INF, stalled=True)
    best_x, best_f = starts[0]
    for x0, f0 in starts:
        x, f = _refine(x0, f0, fun, lo, hi, cfg.refine_iterations)
        if f > best_f:
            best_x, best_f = x, f
    return Proposal(np.asarray(best_x, dtype=float), float(best_f))


# -- the loop ----------------------------------------------------------------


class Scenario(Protocol):
    constraints: Sequence[ConstraintSpec]

    def run_episodes(self, theta: np.ndarray, rng: np.random.Generator, n: int) -> tuple[list[Trajectory], list]: ...


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    g0: float
    slacks: dict
    violated: bool
    failed: bool
    stalled: bool
    acquisition: float
    initial_conditions: list
    trajectories: list = field(repr=False, default_factory=list)
    models: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "theta": [float(t) for t in self.theta],
            "g0": self.g0,
            "slacks": self.slacks,
            "violated": self.violated,
            "failed": self.failed,
            "stalled": self.stalled,
            "acquisition": self.acquisition if math.isfinite(self.acquisition) else None,
            "initial_conditions": self.initial_conditions,
            "models": self.models,
            "wall_time_s": self.wall_time,
        }


@dataclass
class BoHistory:
    config: BoConfig
    constraints: tuple
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_safe_index(self) -> int | None:
        """Index of the lowest ``G0`` among violation-free, non-failed iterations."""
        best, idx = math.inf, None
        for j, r in enumerate(self.records):
            if not r.violated and not r.failed and r.g0 < best:
                best, idx = r.g0, j
        return idx

    @property
    def best_index(self) -> int | None:
        best, idx = math.inf, None
        for j, r in enumerate(self.records):
            if not r.failed and r.g0 < best:
                best, idx = r.g0, j
        return idx

    @property
    def violation_fraction(self) -> float:
        return sum(r.violated for r in self.records) / max(len(self.records), 1)

    def dataset(self, target: str) -> gp.GpDataset:
        """Training set for ``"g0"`` (stored as ``-G0``) or a constraint name."""
        x = np.array([self.config.to_unit(r.theta) for r in self.records]).reshape(len(self.records), -1)
        if target == "g0":
            y = [-r.g0 for r in self.records]
        else:
            y = [r.slacks[target] for r in self.records]
        return gp.GpDataset(x, np.array(y, dtype=float))


def _penalized(history: BoHistory, names: Sequence[str]) -> tuple[float, dict]:
    """Failure penalty: 1.05 x worst G0, and smallest slack minus one std."""
    ok = [r for r in history.records if not r.failed]
    if not ok:
        raise EpisodeFailedError("cannot penalize a failure before any successful evaluation")
    g0 = 1.05 * max(r.g0 for r in ok)
    slacks = {}
    for name in names:
        obs = np.array([r.slacks[name] for r in ok])
        slacks[name] = float(obs.min() - obs.std())
    return g0, slacks


def fit_surrogate(data: gp.GpDataset, cfg: BoConfig, safety: bool, rng: np.random.Generator) -> Surrogate:
    """GP on unit-cube θ; hyperparameters refit by evidence maximization when n >= 2."""
    y = data.targets
    second = float(np.mean(y * y))
    spread = float(np.var(y)) if y.size > 1 else 0.0
    if data.n < 2:
        sf2 = max(second, 1e-12)
        kc = gp.KernelConfig(sf2, np.full(data.dim, cfg.initial_lengthscale), 1e-6 * sf2, float(np.mean(y)))
        return Surrogate(gp.fit(data, kc), cfg)
    bounds = gp.default_bounds(data, signal_floor_second_moment=safety)
    sf2 = min(max(second if safety else max(spread, 1e-12), bounds.signal_variance[0]), bounds.signal_variance[1])
    default = gp.KernelConfig(
        sf2, np.full(data.dim, cfg.initial_lengthscale),
        min(max(1e-6 * sf2, bounds.noise_variance[0]), bounds.noise_variance[1]), float(np.mean(y)),
    )
    kc = gp.optimize_hyperparameters(data, bounds, default, n_starts=cfg.hyper_starts, rng=rng)
    return Surrogate(gp.fit(data, kc), cfg)


def evaluate(theta, scenario: Scenario, n: int, rng: np.random.Generator):
    trajs, ics = scenario.run_episodes(np.asarray(theta, dtype=float), rng, n)
    failed = any(tr.failed for tr in trajs)
    slacks = {c.name: constraint_slack(trajs, c) for c in scenario.constraints}
    g0 = math.nan if failed else performance_objective(trajs)
    return trajs, ics, g0, slacks, failed


def run_loop(cfg: BoConfig, scenario: Scenario, on_record: Callable[[IterationRecord], None] | None = None) -> BoHistory:
    """Run ``cfg.n_iterations`` iterations, the first at θ = 0.

    Initial conditions and proposals draw from separate streams derived from
    ``cfg.seed``, so safe and unconstrained runs with the same seed see the
    same initial conditions at the same iteration index.
    """
    names = [c.name for c in scenario.constraints]
    ss = np.random.SeedSequence(cfg.seed)
    ic_ss, prop_ss, hyp_ss = ss.spawn(3)
    ic_rng = np.random.default_rng(ic_ss)
    prop_rng = np.random.default_rng(prop_ss)
    hyp_rng = np.random.default_rng(hyp_ss)
    history = BoHistory(cfg, tuple(scenario.constraints))
    theta = np.zeros(cfg.n_params)
    acq, stalled = math.nan, False
    for it in range(cfg.n_iterations):
        t0 = time.perf_counter()
        if it > 0:
            perf = fit_surrogate(history.dataset("g0"), cfg, False, hyp_rng)
            cons = [fit_surrogate(history.dataset(n), cfg, True, hyp_rng) for n in names]
            inc = history.best_safe_index
            inc_theta = history.records[inc].theta if inc is not None else None
            prop = propose_next(perf, cons, cfg, prop_rng, inc_theta)
            theta, acq, stalled = prop.theta, prop.value, prop.stalled
            models = {"g0": perf.model.config.to_dict(), **{n: c.model.config.to_dict() for n, c in zip(names, cons)}}
        else:
            models = {}
        trajs, ics, g0, slacks, failed = evaluate(theta, scenario, cfg.n_initial_conditions, ic_rng)
        violated = any(s < 0 for s in slacks.values())
        if failed:
            if it == 0:
                raise EpisodeFailedError("an episode at the initial parameters theta = 0 failed")
            g0, slacks = _penalized(history, names)
        rec = IterationRecord(
            it + 1, np.array(theta, dtype=float), float(g0), slacks, violated, failed, stalled, float(acq), ics,
            trajs, models, time.perf_counter() - t0,
        )
        history.records.append(rec)
        logger.info("iteration %d: G0=%.4f violated=%s failed=%s", it + 1, g0, violated, failed)
        if on_record is not None:
            on_record(rec)
    return history
