"""Command-line entry point: ``safempc {simulate,tune,map,validate-config}``.

Exit codes: 0 success, 1 runtime failure (a run report is written), 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .battery_sim import BatteryState, simulate_episode
from .config import ConfigError, ExperimentConfig, default_config_path, load_config
from .mpc import MpcController

logger = logging.getLogger("safempc")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="experiment config (JSON); bundled default if omitted")
    common.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    common.add_argument("--out", type=Path, default=None, help="output directory (overrides output_dir)")
    common.add_argument("--jobs", type=int, default=1, help="episode-level parallelism cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safempc", description="Safe BO tuning of an RBF-shaped battery-charging MPC.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run one closed-loop episode")
    s.add_argument("--theta", type=Path, default=None, help="JSON file with a 'theta' list (zeros if omitted)")
    s.add_argument("--soc0", type=float, default=None)
    s.add_argument("--t0", type=float, default=None, help="initial temperature, kelvin")

    t = sub.add_parser("tune", parents=[common], help="run BO campaign(s)")
    t.add_argument("--mode", choices=("safe", "unconstrained", "both"), default="both")
    t.add_argument("--no-trajectories", action="store_true", help="skip per-episode trajectory CSVs")

    m = sub.add_parser("map", parents=[common], help="charging-time reduction map for a learned theta")
    m.add_argument("--theta", type=Path, required=True)

    sub.add_parser("validate-config", parents=[common], help="check a config file and print its hash")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config if args.config is not None else default_config_path())
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    return cfg


def read_theta(path: Path, n: int) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    vals = doc["theta"] if isinstance(doc, dict) else doc
    theta = np.asarray(vals, dtype=float).reshape(-1)
    if theta.shape[0] != n or not np.all(np.isfinite(theta)):
        raise ValueError(f"{path}: expected {n} finite weights, got {theta.shape[0]}")
    return theta


def _write_report(out: Path, doc: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_report.json"
    old = {}
    if path.exists():
        try:
            old = json.loads(path.read_text())
        except ValueError:
            old = {}
    old.update(doc)
    path.write_text(json.dumps(old, indent=2, sort_keys=True) + "\n")
    return path


def _simulate(cfg: ExperimentConfig, args, out: Path) -> None:
    theta = read_theta(args.theta, cfg.rbf.count) if args.theta else np.zeros(cfg.rbf.count)
    soc0 = args.soc0 if args.soc0 is not None else cfg.episodes.soc0[0]
    t0 = args.t0 if args.t0 is not None else cfg.episodes.t0_range[0]
    x0 = BatteryState(float(soc0), 0.0, float(t0))
    ctrl = MpcController(cfg.mpc_config(), cfg.rbf, theta, seed=cfg.seed)
    tr = simulate_episode(ctrl, x0, cfg.episodes.length_m, cfg.plant)
    out.mkdir(parents=True, exist_ok=True)
    from .campaign import charging_time

    tr.to_csv(out / "trajectory.csv", f"config_sha256={cfg.hash} seed={cfg.seed} soc0={soc0!r} t0={t0!r}")
    t80 = charging_time(tr, cfg.target_soc)
    print(f"wrote {out / 'trajectory.csv'}; charging time to {cfg.target_soc:g}: "
          f"{'not reached' if t80 is None else f'{t80:g} s'}; failed={tr.failed}")
    if tr.failed:
        raise RuntimeError(f"episode failed at step {tr.failed_at}: {tr.message}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("safempc: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _load(args)
    except ConfigError as exc:
        src = args.config if args.config is not None else "default config"
        print(f"safempc: config error in {src}: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate-config":
        print(f"ok {cfg.hash}")
        return 0
    out = Path(args.out if args.out is not None else cfg.output_dir)
    try:
        if args.command == "simulate":
            _simulate(cfg, args, out)
        elif args.command == "tune":
            from .campaign import run_campaign

            modes = ("safe", "unconstrained") if args.mode == "both" else (args.mode,)
            res = run_campaign(cfg, modes, out, jobs=args.jobs, write_trajectories=not args.no_trajectories)
            for mode, info in res.report["modes"].items():
                print(f"{mode}: {info['violating_iterations']}/{info['iterations']} violating iterations, "
                      f"selected iteration {info['selected_iteration']}")
        elif args.command == "map":
            from .campaign import build_reduction_map, write_reduction_map

            theta = read_theta(args.theta, cfg.rbf.count)
            rmap = build_reduction_map(cfg, theta, jobs=args.jobs)
            path = write_reduction_map(rmap, cfg, out, theta)
            summary = rmap.summary()
            _write_report(out, {"config_sha256": cfg.hash, "seed": cfg.seed, "map": summary})
            print(f"wrote {path}; mean reduction {summary['mean_reduction_s']} s over {summary['reached_cells']} cells")
    except Exception as exc:  # any runtime failure maps to exit 1 with a report
        report = _write_report(out, {
            "config_sha256": cfg.hash, "seed": cfg.seed, "command": args.command,
            "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
        })
        print(f"safempc: {args.command} failed: {exc}\nrun report: {report}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
