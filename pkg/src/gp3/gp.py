"""Zero-mean Gaussian process regression (posterior mean only)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import minimize

from .kernels import Family, KernelSpec, kernel_matrix

log = logging.getLogger(__name__)


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"covariance matrix is not positive definite (failed at pivot {pivot})")
        self.pivot = pivot


@dataclass(frozen=True)
class TrainingSet:
    X: np.ndarray
    y: np.ndarray

    def __init__(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
        if X.shape[0] < 1:
            raise ValueError("training set is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("training data contain non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class GPModel:
    spec: KernelSpec
    noise_variance: float
    train: TrainingSet
    weights: np.ndarray
    factor: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def X(self) -> np.ndarray:
        return self.train.X

    @property
    def dim(self) -> int:
        return self.train.dim


def _cholesky(a: np.ndarray) -> np.ndarray:
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(int(info))
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def fit(train: TrainingSet, spec: KernelSpec, noise_variance: float) -> GPModel:
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    if train.dim != spec.dim:
        raise ValueError(f"kernel has d={spec.dim}, data has d={train.dim}")
    K = kernel_matrix(spec, train.X, train.X)
    A = K + noise_variance * np.eye(train.n)
    jitter = 0.0
    try:
        L = _cholesky(A)
    except FactorizationError:
        if noise_variance > 0:
            raise
        jitter = 1e-10 * spec.signal_variance
        log.warning("Cholesky failed without noise; retrying with jitter %.3g", jitter)
        L = _cholesky(A + jitter * np.eye(train.n))
    lam, info = lapack.dpotrs(L, train.y, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return GPModel(spec, float(noise_variance), train, np.asarray(lam), L, jitter)


def mean(model: GPModel, x) -> np.ndarray | float:
    """Posterior mean at ``x`` of shape ``(d,)`` or ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[-1] != model.dim:
        raise ValueError(f"expected inputs of dimension {model.dim}, got {xs.shape[-1]}")
    out = mean_batch(model, xs)
    return float(out[0]) if single else out


def mean_batch(model: GPModel, xs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    # row-wise reduction keeps each value independent of how points are batched
    out = np.empty(len(xs))
    for s in range(0, len(xs), chunk):
        K = kernel_matrix(model.spec, xs[s:s + chunk], model.X)
        out[s:s + chunk] = np.sum(K * model.weights, axis=1)
    return out


def log_marginal_likelihood(model: GPModel) -> float:
    y = model.train.y
    n = model.train.n
    return float(-0.5 * y @ model.weights - np.sum(np.log(np.diag(model.factor)))
                 - 0.5 * n * math.log(2.0 * math.pi))


def _pack(spec: KernelSpec, noise: float, fix_noise: bool) -> np.ndarray:
    theta = [math.log(spec.signal_variance), *np.log(spec.length_scales)]
    if not fix_noise:
        theta.append(math.log(noise))
    return np.array(theta)


def _unpack(theta, family, d, fixed_noise):
    spec = KernelSpec(family, math.exp(theta[0]), np.exp(theta[1:1 + d]))
    noise = fixed_noise if fixed_noise is not None else math.exp(theta[-1])
    return spec, noise


def optimize_hyperparameters(train: TrainingSet, family, init: KernelSpec | None = None,
                             noise_variance: float = 0.1, fix_noise: bool = True,
                             restarts: int = 4, seed: int = 0, maxiter: int = 2000):
    """Maximise the log marginal likelihood with Nelder-Mead in log space.

    Returns ``(spec, noise_variance)``. The result is never worse than the
    initial point. Restarts perturb the initial log-parameters by N(0, 1).
    """
    family = Family.parse(family)
    if init is None:
        span = np.ptp(train.X, axis=0)
        span = np.where(span > 0, span, 1.0)
        init = KernelSpec(family, max(float(np.var(train.y)), 1e-6), 0.3 * span)
    d = train.dim
    fixed = noise_variance if fix_noise else None

    def nlml(theta):
        if np.any(np.abs(theta) > 30):
            return 1e300
        spec, noise = _unpack(theta, family, d, fixed)
        try:
            return -log_marginal_likelihood(fit(train, spec, noise))
        except (np.linalg.LinAlgError, ValueError):
            return 1e300

    theta0 = _pack(init, noise_variance, fix_noise)
    f0 = nlml(theta0)
    if not math.isfinite(f0) or f0 >= 1e300:
        raise ValueError("log marginal likelihood is not finite at the initial parameters")
    rng = np.random.default_rng(seed)
    best_theta, best_f = theta0, f0
    starts = [theta0] + [theta0 + rng.normal(size=theta0.shape) for _ in range(restarts)]
    for start in starts:
        res = minimize(nlml, start, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-9})
        if res.fun < best_f:
            best_theta, best_f = res.x, float(res.fun)
    return _unpack(best_theta, family, d, fixed)
