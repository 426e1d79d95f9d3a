"""Exact Gaussian-process regression with a squared-exponential ARD kernel.

Posterior inference goes through a Cholesky factor of the noisy Gram matrix.
Hyperparameters are fitted by maximizing the log marginal likelihood in log
space with analytic gradients and several starts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
_LOG_2PI = math.log(2.0 * math.pi)


class IndefiniteKernelError(np.linalg.LinAlgError):
    """Cholesky factorization failed even with the largest jitter."""


@dataclass(frozen=True)
class KernelConfig:
    """SE-ARD kernel, Gaussian noise and constant prior mean.

    ``fallback`` marks a configuration returned because every
    hyperparameter optimization start failed.
    """

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float
    prior_mean: float = 0.0
    jitter_floor: float = 0.0
    fallback: bool = field(default=False, compare=False)

    def __post_init__(self):
        ls = np.array(self.lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        if not (self.signal_variance > 0 and math.isfinite(self.signal_variance)):
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if ls.size == 0 or np.any(~(ls > 0)) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        if not (self.noise_variance >= self.jitter_floor):
            raise ValueError(f"noise_variance {self.noise_variance} below jitter floor {self.jitter_floor}")
        if not math.isfinite(self.prior_mean):
            raise ValueError("prior_mean must be finite")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": self.lengthscales.tolist(),
            "noise_variance": self.noise_variance,
            "prior_mean": self.prior_mean,
            "fallback": self.fallback,
        }


@dataclass(frozen=True)
class GpDataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float)
        y = np.array(self.targets, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(y.shape[0], -1) if y.shape[0] else x.reshape(0, x.shape[0])
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {x.shape} do not match {y.shape[0]} targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @classmethod
    def empty(cls, dim: int) -> "GpDataset":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, x, y: float) -> "GpDataset":
        return GpDataset(np.vstack([self.inputs, np.reshape(x, (1, -1))]), np.append(self.targets, y))


@dataclass(frozen=True)
class GpModel:
    """Fitted GP: ``chol @ chol.T = k(X, X) + (noise + jitter) I``."""

    config: KernelConfig
    data: GpDataset
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0


def _scaled_sqdist(a: np.ndarray, b: np.ndarray, ls: np.ndarray) -> np.ndarray:
    a = a / ls
    b = b / ls
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kernel_matrix(a, b, cfg: KernelConfig) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != cfg.dim or b.shape[1] != cfg.dim:
        raise ValueError("input dimension does not match the kernel")
    return cfg.signal_variance * np.exp(-0.5 * _scaled_sqdist(a, b, cfg.lengthscales))


def kernel(a, b, cfg: KernelConfig) -> float:
    """Squared-exponential ARD covariance between two input vectors."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape or a.shape[0] != cfg.dim:
        raise ValueError("kernel inputs must have the kernel's dimension")
    r = (a - b) / cfg.lengthscales
    return float(cfg.signal_variance * math.exp(-0.5 * float(r @ r)))


def fit(data: GpDataset, cfg: KernelConfig) -> GpModel:
    """Factorize the noisy Gram matrix, escalating jitter if needed.

    Raises
    ------
    IndefiniteKernelError
        If factorization fails at every jitter level up to ``1e-4`` times the
        signal variance.
    """
    if data.n and data.dim != cfg.dim:
        raise ValueError(f"data dimension {data.dim} does not match kernel dimension {cfg.dim}")
    n = data.n
    if n == 0:
        return GpModel(cfg, data, np.zeros((0, 0)), np.zeros(0))
    k = kernel_matrix(data.inputs, data.inputs, cfg)
    resid = data.targets - cfg.prior_mean
    for rel in JITTER_LADDER:
        jit = rel * cfg.signal_variance
        a = k + (cfg.noise_variance + jit) * np.eye(n)
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(chol)):
            continue
        if rel > 0:
            logger.debug("GP fit needed jitter %.1e", jit)
        alpha = cho_solve((chol, True), resid)
        return GpModel(cfg, data, chol, alpha, jit)
    raise IndefiniteKernelError(
        f"Gram matrix not positive definite with noise_variance={cfg.noise_variance:g} "
        f"and jitter up to {JITTER_LADDER[-1]:g} x signal variance"
    )


def predict(model: GpModel, xstar) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized posterior mean and variance at the rows of ``xstar``."""
    cfg = model.config
    xs = np.atleast_2d(np.asarray(xstar, dtype=float))
    if xs.shape[1] != cfg.dim:
        raise ValueError("query dimension does not match the kernel")
    prior_var = np.full(xs.shape[0], cfg.signal_variance)
    if model.data.n == 0:
        return np.full(xs.shape[0], cfg.prior_mean), prior_var
    ks = kernel_matrix(xs, model.data.inputs, cfg)
    mean = cfg.prior_mean + ks @ model.alpha
    v = solve_triangular(model.chol, ks.T, lower=True)
    var = prior_var - np.sum(v * v, axis=0)
    return mean, np.clip(var, 0.0, prior_var)


def posterior(model: GpModel, xstar) -> tuple[float, float]:
    """Posterior mean and variance at one input vector."""
    m, v = predict(model, np.reshape(xstar, (1, -1)))
    return float(m[0]), float(v[0])


def log_marginal_likelihood(model: GpModel) -> float:
    n = model.data.n
    if n == 0:
        return 0.0
    resid = model.data.targets - model.config.prior_mean
    return float(-0.5 * resid @ model.alpha - np.sum(np.log(np.diag(model.chol))) - 0.5 * n * _LOG_2PI)


@dataclass(frozen=True)
class HyperBounds:
    """Absolute boxes for the fitted hyperparameters."""

    signal_variance: tuple[float, float]
    lengthscale: tuple[float, float]
    noise_variance: tuple[float, float]

    def __post_init__(self):
        for name in ("signal_variance", "lengthscale", "noise_variance"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi < math.inf):
                raise ValueError(f"bad bounds for {name}: {(lo, hi)}")


def default_bounds(data: GpDataset, ls=(1e-2, 10.0), noise_rel=(1e-8, 1.0), signal_rel=(1e-2, 1e2),
                   signal_floor_second_moment: bool = False) -> HyperBounds:
    """Bounds scaled by the target spread.

    With ``signal_floor_second_moment`` the signal variance is kept at or
    above the targets' mean square, so that far from data a lower confidence
    bound with ``beta >= 1`` never lies above zero.
    """
    y = data.targets
    second = float(np.mean(y * y)) if y.size else 1.0
    scale = float(np.var(y)) if y.size > 1 else 0.0
    scale = max(scale, 1e-6 * second, 1e-12)
    s_lo, s_hi = signal_rel[0] * scale, signal_rel[1] * scale
    if signal_floor_second_moment:
        s_lo = max(s_lo, second)
        s_hi = max(s_hi, 10.0 * second)
    return HyperBounds((s_lo, s_hi), ls, (noise_rel[0] * scale, noise_rel[1] * scale))


def _neg_lml_and_grad(logp: np.ndarray, x: np.ndarray, resid: np.ndarray) -> tuple[float, np.ndarray]:
    n, d = x.shape
    sf2 = math.exp(logp[0])
    ls = np.exp(logp[1 : 1 + d])
    sn2 = math.exp(logp[1 + d])
    diff2 = (x[:, None, :] - x[None, :, :]) ** 2 / ls**2
    kf = sf2 * np.exp(-0.5 * diff2.sum(axis=2))
    a = kf + sn2 * np.eye(n)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return math.inf, np.zeros_like(logp)
    alpha = cho_solve((chol, True), resid)
    nll = 0.5 * resid @ alpha + np.sum(np.log(np.diag(chol))) + 0.5 * n * _LOG_2PI
    w = np.outer(alpha, alpha) - cho_solve((chol, True), np.eye(n))
    g = np.empty_like(logp)
    g[0] = 0.5 * np.sum(w * kf)
    g[1 : 1 + d] = 0.5 * np.einsum("ij,ijk->k", w * kf, diff2)
    g[1 + d] = 0.5 * sn2 * np.trace(w)
    return float(nll), -g


def _pack(cfg: KernelConfig) -> np.ndarray:
    return np.log(np.concatenate([[cfg.signal_variance], cfg.lengthscales, [cfg.noise_variance]]))


def _unpack(logp: np.ndarray, d: int, mean: float, lo=None, hi=None) -> KernelConfig:
    p = np.exp(logp)
    if lo is not None:
        # exp(log(b)) can land one ulp outside b
        p = np.clip(p, lo, hi)
    return KernelConfig(float(p[0]), p[1 : 1 + d], float(p[1 + d]), mean)


def optimize_hyperparameters(
    data: GpDataset,
    bounds: HyperBounds,
    default: KernelConfig | None = None,
    n_starts: int = 4,
    rng: np.random.Generator | None = None,
    maxiter: int = 200,
) -> KernelConfig:
    """Evidence maximization over signal variance, lengthscales and noise.

    The prior mean is fixed at the empirical target mean. Starts are the
    (clipped) default configuration followed by ``n_starts - 1`` log-uniform
    draws inside ``bounds``; the best of all starts and all local optima is
    returned, so the result never scores below any start.
    """
    if data.n < 2:
        raise ValueError("hyperparameter optimization needs at least two points")
    d = data.dim
    mean = float(np.mean(data.targets))
    resid = data.targets - mean
    x = data.inputs
    raw_box = np.array([bounds.signal_variance] + [bounds.lengthscale] * d + [bounds.noise_variance], dtype=float)
    box = np.log(raw_box)
    if default is None:
        default = KernelConfig(
            math.sqrt(bounds.signal_variance[0] * bounds.signal_variance[1]),
            np.full(d, math.sqrt(bounds.lengthscale[0] * bounds.lengthscale[1])),
            math.sqrt(bounds.noise_variance[0] * bounds.noise_variance[1]),
            mean,
        )
    rng = np.random.default_rng(0) if rng is None else rng
    starts = [np.clip(_pack(default), box[:, 0], box[:, 1])]
    for _ in range(max(n_starts - 1, 0)):
        starts.append(rng.uniform(box[:, 0], box[:, 1]))

    best_p, best_f = None, math.inf
    for p0 in starts:
        f0, _ = _neg_lml_and_grad(p0, x, resid)
        if f0 < best_f:
            best_p, best_f = p0, f0
        if not math.isfinite(f0):
            continue
        try:
            res = minimize(
                _neg_lml_and_grad, p0, args=(x, resid), jac=True, method="L-BFGS-B",
                bounds=box, options={"maxiter": maxiter},
            )
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("hyperparameter start failed: %s", exc)
            continue
        if math.isfinite(res.fun) and res.fun < best_f:
            best_p, best_f = np.clip(res.x, box[:, 0], box[:, 1]), float(res.fun)
    if best_p is None or not math.isfinite(best_f):
        logger.warning("all hyperparameter starts failed; keeping the default configuration")
        return replace(default, prior_mean=mean, fallback=True)
    return _unpack(best_p, d, mean, raw_box[:, 0], raw_box[:, 1])
