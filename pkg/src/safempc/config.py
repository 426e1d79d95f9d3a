"""Experiment configuration: one JSON file with a block per module.

Errors carry the line of the offending key so the CLI can point at it.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from json.decoder import scanstring
from pathlib import Path
from typing import Any

from .battery_sim import EcmParams, MismatchSpec, load_params, perturb_params
from .mpc import MpcConfig, RbfNetwork
from .safe_bo import BoConfig, ConstraintSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: tuple = ()):
        self.line = line
        self.path = path
        where = f"line {line}: " if line is not None else ""
        loc = "/".join(str(p) for p in path)
        super().__init__(f"{where}{loc + ': ' if loc else ''}{message}")


_WS = re.compile(r"[ \t\n\r]*")
_SCALAR = re.compile(r"[^,\]\}\s]+")


def _member_lines(text: str) -> dict[tuple, int]:
    """1-based line of every object key and array element in valid JSON ``text``."""
    lines: dict[tuple, int] = {}

    def line_at(i: int) -> int:
        return text.count("\n", 0, i) + 1

    def ws(i: int) -> int:
        return _WS.match(text, i).end()

    def value(i: int, path: tuple) -> int:
        i = ws(i)
        lines.setdefault(path, line_at(i))
        c = text[i]
        if c == "{":
            i = ws(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, j = scanstring(text, i + 1)
                lines[path + (key,)] = line_at(i)
                j = ws(j)
                i = value(j + 1, path + (key,))
                i = ws(i)
                if text[i] == "}":
                    return i + 1
                i = ws(i + 1)
        if c == "[":
            i = ws(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = ws(value(i, path + (k,)))
                k += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        if c == '"':
            return scanstring(text, i + 1)[1]
        return _SCALAR.match(text, i).end()

    value(0, ())
    return lines


def _locate(text: str, path: tuple) -> int | None:
    """Line of the deepest existing prefix of ``path``."""
    try:
        lines = _member_lines(text)
    except (IndexError, ValueError, AttributeError):
        return None
    for k in range(len(path), -1, -1):
        if path[:k] in lines:
            return lines[path[:k]]
    return None


@dataclass(frozen=True)
class EpisodeSpec:
    length_m: int = 360
    soc0: tuple = (0.1, 0.2, 0.3, 0.4)
    t0_range: tuple = (298.0, 313.0)


@dataclass(frozen=True)
class GridSpec:
    soc_range: tuple = (0.1, 0.5)
    soc_steps: int = 5
    t_range: tuple = (298.0, 313.0)
    t_steps: int = 4

    def points(self) -> tuple[list[float], list[float]]:
        def lin(r, k):
            if k == 1:
                return [float(r[0])]
            return [float(r[0] + (r[1] - r[0]) * j / (k - 1)) for j in range(k)]

        return lin(self.soc_range, self.soc_steps), lin(self.t_range, self.t_steps)


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    plant: EcmParams
    params_path: str | None
    mismatch: MismatchSpec
    mpc_fields: dict
    rbf: RbfNetwork
    bo: BoConfig
    constraints: tuple
    episodes: EpisodeSpec
    grid: GridSpec
    target_soc: float
    output_dir: str
    seed: int
    source: Path | None = field(default=None, compare=False)

    @property
    def prediction_params(self) -> EcmParams:
        return perturb_params(self.plant, self.mismatch)

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(self.prediction_params, **self.mpc_fields)

    def bo_config(self, constrained: bool, seed: int | None = None) -> BoConfig:
        return replace(self.bo, constrained=constrained, seed=self.seed if seed is None else seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        raw["seed"] = int(seed)
        return parse_config(raw, base_dir=self.source.parent if self.source else None)

    def canonical(self) -> dict:
        """The configuration with run-location fields removed."""
        doc = json.loads(json.dumps(self.raw))
        doc.pop("output_dir", None)
        return doc

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "plant": {"params_path": None, "vt_sign": 1.0},
    "mismatch": {
        "max_relative_perturbation": 0.5,
        "seed": 0,
        "mode": "multiplicative-uniform",
        "targets": ["r0", "r1", "c1", "c_th", "r_th"],
    },
    "mpc": {
        "horizon_n": 10, "i_min": 0.0, "i_max": 6.0, "gamma_t": 0.005, "gamma_vt": 5.0,
        "t_max": 318.0, "vt_max": 4.2, "vt_min": 2.5, "slack_t": 3.0, "slack_vt": 0.05,
        "tol_kkt": 1e-6, "max_iter": 200, "n_random_starts": 2, "n_screen": 32,
        "rbf_unit": 0.004,
    },
    "rbf": {"n_v": 4, "n_t": 4, "v_range": [3.9, 4.2], "t_range": [305.0, 318.0]},
    "bo": {
        "beta": 1.0, "tau": 1.0, "acquisition_beta": 2.0, "theta_box": [-5.0, 5.0],
        "n_iterations": 40, "n_initial_conditions": 4, "n_candidates": 2048, "n_refine": 8,
        "refine_iterations": 30, "hyper_starts": 4, "initial_lengthscale": 0.2,
    },
    "constraints": [
        {"name": "vt_max", "quantity": "voltage", "bound": 4.2, "side": "upper"},
        {"name": "vt_min", "quantity": "voltage", "bound": 2.5, "side": "lower"},
        {"name": "t_max", "quantity": "temperature", "bound": 318.0, "side": "upper"},
    ],
    "episodes": {"length_m": 360, "soc0": [0.1, 0.2, 0.3, 0.4], "t0_range": [298.0, 313.0]},
    "grid": {"soc_range": [0.1, 0.5], "soc_steps": 5, "t_range": [298.0, 313.0], "t_steps": 4},
    "target_soc": 0.8,
    "output_dir": "runs/default",
    "seed": 0,
}

_BLOCKS = ("plant", "mismatch", "mpc", "rbf", "bo", "episodes", "grid")


class _Reader:
    def __init__(self, text: str | None):
        self.text = text

    def fail(self, msg: str, path: tuple):
        line = _locate(self.text, path) if self.text is not None else None
        raise ConfigError(msg, line, path)

    def num(self, doc, key, path, *, integer=False, lo=None, hi=None, lo_open=False):
        v = doc[key]
        p = path + (key,)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"expected a number, got {type(v).__name__}", p)
        if integer and not (isinstance(v, int) or float(v).is_integer()):
            self.fail("expected an integer", p)
        if not math.isfinite(v):
            self.fail("must be finite", p)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            self.fail(f"must be {'>' if lo_open else '>='} {lo}, got {v}", p)
        if hi is not None and v > hi:
            self.fail(f"must be <= {hi}, got {v}", p)
        return int(v) if integer else float(v)

    def pair(self, doc, key, path, increasing=True):
        v = doc[key]
        p = path + (key,)
        if not (isinstance(v, list) and len(v) == 2):
            self.fail("expected a two-element list", p)
        out = tuple(self.num(v, j, p) for j in range(2))
        if increasing and not out[1] >= out[0]:
            self.fail("range must be non-decreasing", p)
        return out

    def known(self, doc, allowed, path):
        if not isinstance(doc, dict):
            self.fail("expected an object", path)
        for k in doc:
            if k not in allowed:
                self.fail(f"unknown key {k!r}", path + (k,))


def _merge(defaults: dict, doc: dict) -> dict:
    out = json.loads(json.dumps(defaults))
    for k, v in doc.items():
        if k in _BLOCKS and isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def parse_config(doc: dict, text: str | None = None, base_dir: Path | None = None,
                 source: Path | None = None) -> ExperimentConfig:
    """Validate a decoded document; missing keys take the documented defaults."""
    r = _Reader(text)
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object", 1)
    if "schema_version" not in doc:
        raise ConfigError("missing mandatory key 'schema_version'", 1 if text is not None else None)
    r.known(doc, DEFAULTS.keys(), ())
    if doc["schema_version"] != SCHEMA_VERSION:
        r.fail(f"unsupported schema_version {doc['schema_version']!r} (expected {SCHEMA_VERSION})", ("schema_version",))
    for b in _BLOCKS:
        if b in doc:
            r.known(doc[b], DEFAULTS[b].keys(), (b,))
    full = _merge(DEFAULTS, doc)

    pl = full["plant"]
    ppath = pl["params_path"]
    if ppath is not None and not isinstance(ppath, str):
        r.fail("expected a path string or null", ("plant", "params_path"))
    vt_sign = r.num(pl, "vt_sign", ("plant",))
    if vt_sign not in (1.0, -1.0):
        r.fail("vt_sign must be +1 or -1", ("plant", "vt_sign"))
    resolved = None
    if ppath is not None:
        resolved = Path(ppath)
        if not resolved.is_absolute() and base_dir is not None:
            resolved = base_dir / resolved
        if not resolved.exists():
            r.fail(f"parameter table {str(resolved)!r} does not exist", ("plant", "params_path"))
    try:
        plant = load_params(resolved, vt_sign=vt_sign)
    except (ValueError, KeyError, OSError) as exc:
        r.fail(f"invalid parameter table: {exc}", ("plant", "params_path"))

    mm = full["mismatch"]
    tg = mm["targets"]
    if not (isinstance(tg, list) and all(isinstance(t, str) for t in tg)):
        r.fail("expected a list of parameter names", ("mismatch", "targets"))
    try:
        mismatch = MismatchSpec(
            r.num(mm, "max_relative_perturbation", ("mismatch",), lo=0.0, hi=0.99),
            r.num(mm, "seed", ("mismatch",), integer=True, lo=0),
            mm["mode"],
            tuple(tg),
        )
    except ValueError as exc:
        r.fail(str(exc), ("mismatch",))

    mp = full["mpc"]
    ints = {"horizon_n", "max_iter", "n_random_starts", "n_screen"}
    mpc_fields = {}
    for k in DEFAULTS["mpc"]:
        if k == "rbf_unit":
            mpc_fields[k] = r.num(mp, k, ("mpc",), lo=0, lo_open=True)
        else:
            mpc_fields[k] = r.num(mp, k, ("mpc",), integer=k in ints, lo=0)
    if mpc_fields["horizon_n"] < 1:
        r.fail("must be >= 1", ("mpc", "horizon_n"))
    if mpc_fields["i_min"] > mpc_fields["i_max"]:
        r.fail("i_min must not exceed i_max", ("mpc", "i_min"))
    if mpc_fields["n_random_starts"] > mpc_fields["n_screen"]:
        r.fail("must not exceed n_screen", ("mpc", "n_random_starts"))

    rb = full["rbf"]
    try:
        net = RbfNetwork.grid(
            r.num(rb, "n_v", ("rbf",), integer=True, lo=1),
            r.num(rb, "n_t", ("rbf",), integer=True, lo=1),
            r.pair(rb, "v_range", ("rbf",)),
            r.pair(rb, "t_range", ("rbf",)),
        )
    except ValueError as exc:
        r.fail(str(exc), ("rbf",))

    bo = full["bo"]
    box = r.pair(bo, "theta_box", ("bo",))
    if not box[1] > box[0]:
        r.fail("theta_box must have positive width", ("bo", "theta_box"))
    bo_cfg = BoConfig(
        beta=r.num(bo, "beta", ("bo",), lo=0.0),
        tau=r.num(bo, "tau", ("bo",), lo=0.0, lo_open=True),
        acquisition_beta=r.num(bo, "acquisition_beta", ("bo",), lo=0.0),
        theta_lo=box[0],
        theta_hi=box[1],
        n_params=net.count,
        n_iterations=r.num(bo, "n_iterations", ("bo",), integer=True, lo=1),
        n_initial_conditions=r.num(bo, "n_initial_conditions", ("bo",), integer=True, lo=1),
        n_candidates=r.num(bo, "n_candidates", ("bo",), integer=True, lo=1),
        n_refine=r.num(bo, "n_refine", ("bo",), integer=True, lo=0),
        refine_iterations=r.num(bo, "refine_iterations", ("bo",), integer=True, lo=0),
        hyper_starts=r.num(bo, "hyper_starts", ("bo",), integer=True, lo=1),
        initial_lengthscale=r.num(bo, "initial_lengthscale", ("bo",), lo=0.0, lo_open=True),
    )

    cons = full["constraints"]
    if not (isinstance(cons, list) and cons):
        r.fail("expected a non-empty list", ("constraints",))
    specs = []
    names = set()
    for j, c in enumerate(cons):
        r.known(c, ("name", "quantity", "bound", "side"), ("constraints", j))
        try:
            spec = ConstraintSpec(str(c["name"]), c["quantity"], r.num(c, "bound", ("constraints", j)), c.get("side", "upper"))
        except KeyError as exc:
            r.fail(f"missing key {exc.args[0]!r}", ("constraints", j))
        except ValueError as exc:
            r.fail(str(exc), ("constraints", j))
        if spec.name in names:
            r.fail(f"duplicate constraint name {spec.name!r}", ("constraints", j, "name"))
        names.add(spec.name)
        specs.append(spec)

    ep = full["episodes"]
    soc0 = ep["soc0"]
    if not (isinstance(soc0, list) and soc0):
        r.fail("expected a non-empty list of initial SOC values", ("episodes", "soc0"))
    soc_vals = tuple(r.num(soc0, j, ("episodes", "soc0"), lo=0.0, hi=1.0) for j in range(len(soc0)))
    episodes = EpisodeSpec(
        r.num(ep, "length_m", ("episodes",), integer=True, lo=1), soc_vals, r.pair(ep, "t0_range", ("episodes",))
    )

    gr = full["grid"]
    grid = GridSpec(
        r.pair(gr, "soc_range", ("grid",)),
        r.num(gr, "soc_steps", ("grid",), integer=True, lo=1),
        r.pair(gr, "t_range", ("grid",)),
        r.num(gr, "t_steps", ("grid",), integer=True, lo=1),
    )
    for v in grid.soc_range:
        if not 0.0 <= v <= 1.0:
            r.fail("SOC range must lie in [0, 1]", ("grid", "soc_range"))

    target = r.num(full, "target_soc", (), lo=0.0, hi=1.0, lo_open=True)
    if not isinstance(full["output_dir"], str):
        r.fail("expected a path string", ("output_dir",))
    seed = r.num(full, "seed", (), integer=True, lo=0)

    full["plant"]["params_path"] = ppath
    return ExperimentConfig(
        full, plant, ppath, mismatch, mpc_fields, net, bo_cfg, tuple(specs), episodes, grid, target,
        full["output_dir"], seed, source,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a config file.

    Raises
    ------
    ConfigError
        With the 1-based line of the problem for syntax and schema errors.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from exc
    return parse_config(doc, text, base_dir=path.parent, source=path)


def default_config_path() -> Path:
    from importlib.resources import files

    return Path(str(files("safempc.data") / "default_experiment.json"))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.raw, indent=2) + "\n"
