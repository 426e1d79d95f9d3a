"""Experiment orchestration: BO campaigns, reduction maps, charging-time metrics.

Every artifact carries the config hash and the seed. CSV files contain only
deterministic fields so a rerun from the embedded config reproduces them
byte for byte; wall-clock timings go to the JSON files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .battery_sim import BatteryState, EcmParams, Trajectory, simulate_episode
from .config import ExperimentConfig, dump_config
from .mpc import MpcConfig, MpcController, RbfNetwork
from .safe_bo import BoHistory, ConstraintSpec, IterationRecord, run_loop

logger = logging.getLogger(__name__)

NOT_REACHED = "not_reached"
# absorbs round-off accumulated by the SOC recursion
SOC_TOL = 1e-9


def charging_time(trajectory: Trajectory, target_soc: float = 0.8) -> float | None:
    """Seconds until SOC first reaches ``target_soc`` (within ``SOC_TOL``); ``None`` if it never does."""
    hit = np.flatnonzero(trajectory.z >= target_soc - SOC_TOL)
    if hit.size == 0:
        return None
    return float(hit[0] * trajectory.dt)


# -- episodes ----------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeTask:
    theta: np.ndarray
    x0: tuple
    seed: int


def _run_task(args) -> Trajectory:
    plant, cfg, net, steps, task = args
    ctrl = MpcController(cfg, net, task.theta, seed=task.seed)
    return simulate_episode(ctrl, BatteryState(*task.x0), steps, plant)


def run_episodes_parallel(plant: EcmParams, cfg: MpcConfig, net: RbfNetwork, steps: int,
                          tasks: Sequence[EpisodeTask], jobs: int = 1) -> list[Trajectory]:
    """Run independent episodes; results are returned in task order."""
    args = [(plant, cfg, net, steps, t) for t in tasks]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(a) for a in args]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_run_task, args))


@dataclass
class ChargingScenario:
    """Closed-loop charging episodes against the true plant.

    Initial SOC cycles through ``soc0`` by episode index; initial
    temperatures are a Latin-hypercube draw over ``t0_range`` (each episode
    is marginally uniform, the batch covers the range evenly); the cell
    starts relaxed (``u1 = 0``).
    """

    plant: EcmParams
    mpc_cfg: MpcConfig
    net: RbfNetwork
    constraints: Sequence[ConstraintSpec]
    steps: int
    soc0: Sequence[float]
    t0_range: tuple
    jobs: int = 1

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, jobs: int = 1) -> "ChargingScenario":
        return cls(cfg.plant, cfg.mpc_config(), cfg.rbf, cfg.constraints, cfg.episodes.length_m,
                   cfg.episodes.soc0, cfg.episodes.t0_range, jobs)

    def run_episodes(self, theta, rng: np.random.Generator, n: int):
        tasks, ics = [], []
        lo, hi = self.t0_range
        strata = rng.permutation(n)
        for j in range(n):
            t0 = float(lo + (strata[j] + rng.uniform()) * (hi - lo) / n)
            seed = int(rng.integers(2**31))
            x0 = (float(self.soc0[j % len(self.soc0)]), 0.0, t0)
            tasks.append(EpisodeTask(np.asarray(theta, dtype=float), x0, seed))
            ics.append({"soc0": x0[0], "t0": t0, "solver_seed": seed})
        return run_episodes_parallel(self.plant, self.mpc_cfg, self.net, self.steps, tasks, self.jobs), ics


# -- artifacts ---------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def _audit(cfg: ExperimentConfig, **extra) -> str:
    parts = [f"config_sha256={cfg.hash}", f"seed={cfg.seed}"] + [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def write_history(hist: BoHistory, cfg: ExperimentConfig, mode: str, out: Path) -> None:
    names = [c.name for c in hist.constraints]
    with open(out / "history.jsonl", "w") as fh:
        for r in hist.records:
            doc = {"config_sha256": cfg.hash, "seed": cfg.seed, "mode": mode, **r.to_dict()}
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    with open(out / "history_summary.csv", "w", newline="") as fh:
        fh.write(f"# {_audit(cfg, mode=mode)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "g0"] + [f"slack_{n}" for n in names] + ["violated", "failed", "stalled"])
        for r in hist.records:
            w.writerow([r.iteration, _fmt(r.g0)] + [_fmt(r.slacks[n]) for n in names]
                       + [_fmt(r.violated), _fmt(r.failed), _fmt(r.stalled)])


def select_theta(hist: BoHistory, constrained: bool) -> tuple[int | None, np.ndarray]:
    """Best violation-free iteration in safe mode, best overall otherwise."""
    idx = hist.best_safe_index if constrained else hist.best_index
    if idx is None:
        return None, np.zeros(hist.config.n_params)
    return idx, hist.records[idx].theta.copy()


@dataclass
class CampaignResult:
    histories: dict = field(default_factory=dict)
    selected: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)


def run_campaign(cfg: ExperimentConfig, modes: Sequence[str] = ("safe",), out: str | Path | None = None,
                 jobs: int = 1, write_trajectories: bool = True) -> CampaignResult:
    """Run the BO loop in each mode and write all artifacts under ``out``."""
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    scenario = ChargingScenario.from_config(cfg, jobs)
    result = CampaignResult()
    report = {
        "config_sha256": cfg.hash, "seed": cfg.seed, "modes": {}, "errors": [],
        "config": cfg.canonical(),
    }
    for mode in modes:
        constrained = mode == "safe"
        mdir = out / mode
        tdir = mdir / "trajectories"
        tdir.mkdir(parents=True, exist_ok=True)
        t_start = time.perf_counter()

        def on_record(rec: IterationRecord, _mode=mode, _tdir=tdir):
            if not write_trajectories:
                return
            for l, tr in enumerate(rec.trajectories):
                ic = rec.initial_conditions[l]
                tr.to_csv(
                    _tdir / f"iter{rec.iteration:03d}_ep{l}.csv",
                    _audit(cfg, mode=_mode, iteration=rec.iteration, episode=l,
                           soc0=repr(ic["soc0"]), t0=repr(ic["t0"])),
                )

        hist = run_loop(cfg.bo_config(constrained), scenario, on_record)
        write_history(hist, cfg, mode, mdir)
        idx, theta = select_theta(hist, constrained)
        with open(mdir / "theta_best.json", "w") as fh:
            json.dump({
                "config_sha256": cfg.hash, "seed": cfg.seed, "mode": mode,
                "iteration": None if idx is None else hist.records[idx].iteration,
                "g0": None if idx is None else hist.records[idx].g0,
                "theta": [float(t) for t in theta],
            }, fh, indent=2)
            fh.write("\n")
        result.histories[mode] = hist
        result.selected[mode] = theta
        report["modes"][mode] = {
            "iterations": len(hist),
            "violating_iterations": sum(r.violated for r in hist.records),
            "violation_fraction": hist.violation_fraction,
            "failed_iterations": sum(r.failed for r in hist.records),
            "selected_iteration": None if idx is None else hist.records[idx].iteration,
            "wall_time_s": time.perf_counter() - t_start,
        }
    with open(out / "run_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    result.report = report
    return result


# -- reduction map -----------------------------------------------------------


@dataclass
class ReductionCell:
    soc0: float
    t0: float
    baseline_s: float | None
    learned_s: float | None

    @property
    def reduction_s(self) -> float | None:
        if self.baseline_s is None or self.learned_s is None:
            return None
        return self.baseline_s - self.learned_s

    @property
    def status(self) -> str:
        if self.baseline_s is None and self.learned_s is None:
            return "neither_reached"
        if self.baseline_s is None:
            return "baseline_not_reached"
        if self.learned_s is None:
            return "learned_not_reached"
        return "ok"


@dataclass
class ReductionMap:
    soc_values: list
    t_values: list
    cells: list

    def values(self) -> np.ndarray:
        """``(len(soc_values), len(t_values))`` reductions with NaN for not-reached cells."""
        v = np.full((len(self.soc_values), len(self.t_values)), np.nan)
        for c in self.cells:
            if c.reduction_s is not None:
                v[self.soc_values.index(c.soc0), self.t_values.index(c.t0)] = c.reduction_s
        return v

    def summary(self) -> dict:
        ok = [c for c in self.cells if c.reduction_s is not None]
        base = [c.baseline_s for c in ok]
        learned = [c.learned_s for c in ok]
        return {
            "cells": len(self.cells),
            "reached_cells": len(ok),
            "mean_reduction_s": float(np.mean([c.reduction_s for c in ok])) if ok else None,
            "mean_baseline_s": float(np.mean(base)) if ok else None,
            "mean_learned_s": float(np.mean(learned)) if ok else None,
        }

    def to_csv(self, path: str | Path, header_comment: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["soc0", "t0_K", "baseline_s", "learned_s", "reduction_s", "status"])
            for c in self.cells:
                w.writerow([repr(c.soc0), repr(c.t0), _fmt(c.baseline_s), _fmt(c.learned_s),
                            _fmt(c.reduction_s), c.status])


def _cell_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])


def reduction_cell(cfg: ExperimentConfig, theta_learned, soc0: float, t0: float, cell_seed: int,
                   mpc_cfg: MpcConfig | None = None) -> ReductionCell:
    """Baseline and learned episodes from one initial condition against the same plant."""
    mpc_cfg = mpc_cfg or cfg.mpc_config()
    steps = cfg.episodes.length_m
    trs = run_episodes_parallel(cfg.plant, mpc_cfg, cfg.rbf, steps, [
        EpisodeTask(np.zeros(cfg.rbf.count), (soc0, 0.0, t0), cell_seed),
        EpisodeTask(np.asarray(theta_learned, dtype=float), (soc0, 0.0, t0), cell_seed),
    ])
    return ReductionCell(soc0, t0, charging_time(trs[0], cfg.target_soc), charging_time(trs[1], cfg.target_soc))


def build_reduction_map(cfg: ExperimentConfig, theta_learned, jobs: int = 1) -> ReductionMap:
    """Charging-time reduction (baseline minus learned) on the configured grid.

    A pure function of ``(cfg, theta_learned, cfg.seed)``: the solver
    random-start stream of each cell is derived from the seed and the cell
    index, and both controllers of a cell share it.
    """
    socs, temps = cfg.grid.points()
    mpc_cfg = cfg.mpc_config()
    theta = np.asarray(theta_learned, dtype=float)
    tasks, keys = [], []
    for i, s in enumerate(socs):
        for j, t in enumerate(temps):
            seed = _cell_seed(cfg.seed, i, j)
            tasks.append(EpisodeTask(np.zeros(cfg.rbf.count), (s, 0.0, t), seed))
            tasks.append(EpisodeTask(theta, (s, 0.0, t), seed))
            keys.append((s, t))
    trs = run_episodes_parallel(cfg.plant, mpc_cfg, cfg.rbf, cfg.episodes.length_m, tasks, jobs)
    cells = [
        ReductionCell(s, t, charging_time(trs[2 * k], cfg.target_soc), charging_time(trs[2 * k + 1], cfg.target_soc))
        for k, (s, t) in enumerate(keys)
    ]
    return ReductionMap(socs, temps, cells)


def theta_digest(theta) -> str:
    """Short content hash of a weight vector; location-independent provenance."""
    blob = np.ascontiguousarray(np.asarray(theta, dtype="<f8")).tobytes()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_reduction_map(rmap: ReductionMap, cfg: ExperimentConfig, out: str | Path, theta) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "reduction_map.csv"
    rmap.to_csv(path, _audit(cfg, theta_sha256=theta_digest(theta)))
    return path
