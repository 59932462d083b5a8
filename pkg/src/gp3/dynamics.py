"""Bogacki-Shampine integration, the SMIB swing equation and Lyapunov data.

The integrator is vectorised over a batch of initial states: every trajectory
carries its own time, step size and error control, so the result for one
trajectory does not depend on which others are integrated alongside it.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Hyperrectangle


class IntegrationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    initial_step: float = 1e-3
    max_step: float = 0.1

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "initial_step", "max_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ODESystem:
    """Autonomous or time-dependent field ``rhs(t, X) -> dX`` on batches ``(n, d)``."""

    dim: int
    rhs: Callable
    params: dict = field(default_factory=dict)
    name: str = ""


# Bogacki-Shampine 3(2) tableau
_A21 = 1 / 2
_A32 = 3 / 4
_B1, _B2, _B3 = 2 / 9, 1 / 3, 4 / 9
# 3rd order minus embedded 2nd order weights (stage 4 is f at the new point)
_E1, _E2, _E3, _E4 = -5 / 72, 1 / 12, 1 / 9, -1 / 8

_MIN_STEP = 1e-14
_SAFETY = 0.9


def _stages(rhs, t, y, h, k1):
    hc = h[:, None]
    k2 = rhs(t + 0.5 * h, y + hc * (_A21 * k1))
    k3 = rhs(t + 0.75 * h, y + hc * (_A32 * k2))
    y_new = y + hc * (_B1 * k1 + _B2 * k2 + _B3 * k3)
    k4 = rhs(t + h, y_new)
    err = hc * (_E1 * k1 + _E2 * k2 + _E3 * k3 + _E4 * k4)
    return y_new, k4, err


def integrate_batch(system: ODESystem, X0, sample_times, config: IntegratorConfig = IntegratorConfig(),
                    fixed_step: float | None = None, t0: float = 0.0) -> np.ndarray:
    """States at ``sample_times`` for every row of ``X0``; shape ``(n, len(times), d)``.

    Steps are clamped to land exactly on each sample time. With ``fixed_step``
    the error control is switched off (still clamped at sample times).
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    times = np.asarray(sample_times, dtype=float).reshape(-1)
    if X0.shape[1] != system.dim:
        raise ValueError(f"state has dimension {X0.shape[1]}, system expects {system.dim}")
    if np.any(np.diff(times) <= 0) or (len(times) and times[0] < t0):
        raise ValueError("sample times must be increasing and not before t0")
    if not np.all(np.isfinite(X0)):
        raise IntegrationError("non-finite initial state")
    n, d = X0.shape
    out = np.empty((n, len(times), d))
    y = X0.copy()
    t = np.full(n, float(t0))
    h = np.full(n, fixed_step if fixed_step is not None else config.initial_step)
    rhs = system.rhs
    k1 = rhs(t, y)
    for ti, target in enumerate(times):
        active = t < target
        while np.any(active):
            idx = np.flatnonzero(active)
            ta, ya, ka = t[idx], y[idx], k1[idx]
            if fixed_step is None:
                ha = np.minimum(h[idx], config.max_step)
            else:
                ha = np.full(len(idx), fixed_step)
            remaining = target - ta
            last = ha >= remaining * (1 - 1e-12)
            ha = np.where(last, remaining, ha)
            y_new, k_new, err = _stages(rhs, ta, ya, ha, ka)
            if fixed_step is None:
                scale = config.abs_tol + config.rel_tol * np.maximum(np.abs(ya), np.abs(y_new))
                e = np.sqrt(np.mean((err / scale) ** 2, axis=1))
                accept = e <= 1.0
                with np.errstate(divide="ignore"):
                    factor = np.clip(_SAFETY * e ** (-1.0 / 3.0), 0.2, 5.0)
                factor = np.where(e == 0, 5.0, factor)
                h_next = ha * factor
                # a clamped final step should not shrink the step used afterwards
                h[idx] = np.where(accept & last, np.maximum(h[idx], h_next), h_next)
                if np.any(h[idx] < _MIN_STEP):
                    raise IntegrationError(f"step size underflow below {_MIN_STEP:g}")
            else:
                accept = np.ones(len(idx), dtype=bool)
            acc = idx[accept]
            t[acc] = np.where(last[accept], target, ta[accept] + ha[accept])
            y[acc] = y_new[accept]
            k1[acc] = k_new[accept]
            if not np.all(np.isfinite(y_new[accept])):
                raise IntegrationError("state became non-finite")
            active = t < target
        out[:, ti, :] = y
    return out


def integrate(system: ODESystem, x0, sample_times, config: IntegratorConfig = IntegratorConfig(),
              fixed_step: float | None = None) -> np.ndarray:
    """Single trajectory; returns ``(len(sample_times), d)``."""
    return integrate_batch(system, np.asarray(x0, dtype=float)[None, :], sample_times,
                           config, fixed_step)[0]


# -- single machine infinite bus ------------------------------------------------

@dataclass(frozen=True)
class SMIBParams:
    m1: float = 1.0
    d1: float = 20.0
    a12: float = 10.0
    theta1: float = math.asin(0.05)

    def __post_init__(self):
        if self.m1 == 0:
            raise ValueError("inertia m1 must be non-zero")


def smib_field(state, params: SMIBParams = SMIBParams()) -> np.ndarray:
    """Swing equation in first-order form; state is ``[phi_dot, phi]``."""
    if params.m1 == 0:
        raise ValueError("inertia m1 must be non-zero")
    s = np.asarray(state, dtype=float)
    w, phi = s[..., 0], s[..., 1]
    th = params.theta1
    acc = (-params.d1 * w - params.a12 * (np.sin(th + phi) - math.sin(th))) / params.m1
    return np.stack([acc, w], axis=-1)


class _SMIBRhs:
    # picklable right-hand side
    def __init__(self, params):
        self.params = params

    def __call__(self, t, X):
        return smib_field(X, self.params)


def smib_system(params: SMIBParams = SMIBParams()) -> ODESystem:
    return ODESystem(2, _SMIBRhs(params), dataclasses.asdict(params), name="smib")


def _decay_rhs(t, X):
    return -X


def _zero_rhs(t, X):
    return np.zeros_like(X)


def _oscillator_rhs(t, X):
    return np.stack([X[..., 1], -X[..., 0]], axis=-1)


def linear_decay_system(dim: int = 1) -> ODESystem:
    return ODESystem(dim, _decay_rhs, name="decay")


def zero_system(dim: int = 1) -> ODESystem:
    return ODESystem(dim, _zero_rhs, name="zero")


def oscillator_system() -> ODESystem:
    return ODESystem(2, _oscillator_rhs, name="oscillator")


# -- Lyapunov data ----------------------------------------------------------------

@dataclass(frozen=True)
class LyapunovDataset:
    X0: np.ndarray
    V: np.ndarray
    horizon: int
    sample_time: float


def lyapunov_values(system: ODESystem, X0, K: int, dt: float,
                    config: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Finite-horizon trajectory cost: sum over k=0..K of ||x(k dt)||^2."""
    if K < 0 or not dt > 0:
        raise ValueError("need K >= 0 and dt > 0")
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    total = np.sum(X0**2, axis=1)
    if K == 0:
        return total
    traj = integrate_batch(system, X0, dt * np.arange(1, K + 1), config)
    return total + np.sum(traj**2, axis=(1, 2))


def lyapunov_value(system: ODESystem, x0, K: int, dt: float,
                   config: IntegratorConfig = IntegratorConfig()) -> float:
    return float(lyapunov_values(system, np.asarray(x0, dtype=float)[None, :], K, dt, config)[0])


def grid_points(domain: Hyperrectangle, n: int) -> np.ndarray:
    """``n`` points on a uniform grid including the box corners (``n`` a perfect power)."""
    d = domain.dim
    per_axis = round(n ** (1.0 / d))
    if per_axis**d != n:
        raise ValueError(f"{n} is not a perfect {d}-th power")
    if per_axis == 1:
        return domain.c[None, :]
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(domain.lower, domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def build_lyapunov_dataset(system: ODESystem, domain: Hyperrectangle, N: int, K: int, dt: float,
                           config: IntegratorConfig = IntegratorConfig()) -> LyapunovDataset:
    X0 = grid_points(domain, N)
    V = lyapunov_values(system, X0, K, dt, config)
    if not np.all(np.isfinite(V)):
        raise IntegrationError("non-finite Lyapunov values")
    return LyapunovDataset(X0, V, K, dt)


# -- flow map and simulation baseline ---------------------------------------------------

class FlowMap:
    """``x0 -> x(dt, x0)`` on batches; usable as a problem's state map."""

    def __init__(self, system: ODESystem, dt: float, config: IntegratorConfig = IntegratorConfig()):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.system = system
        self.dt = dt
        self.config = config

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = integrate_batch(self.system, np.atleast_2d(X), [self.dt], self.config)[:, 0, :]
        return out[0] if single else out


def flow_map(system: ODESystem, dt: float, config: IntegratorConfig = IntegratorConfig()) -> FlowMap:
    return FlowMap(system, dt, config)


def simulate_converged(system: ODESystem, X0, steps: int, dt: float, radius: float,
                       config: IntegratorConfig = IntegratorConfig(rel_tol=1e-6, abs_tol=1e-9)
                       ) -> np.ndarray:
    """Whether each trajectory ends within ``radius`` of the origin after ``steps * dt``.

    Trajectories that blow up count as not converged.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            final = integrate_batch(system, X0, [steps * dt], config)[:, 0, :]
        except IntegrationError:
            # fall back to one trajectory at a time so a single blow-up is isolated
            final = np.full_like(X0, np.inf)
            for i, x in enumerate(X0):
                try:
                    final[i] = integrate_batch(system, x[None, :], [steps * dt], config)[0, 0]
                except IntegrationError:
                    pass
    norm = np.linalg.norm(final, axis=1)
    return np.isfinite(norm) & (norm <= radius)


def roa_baseline(system: ODESystem, domain: Hyperrectangle, grid_n: int, steps: int, dt: float,
                 radius: float, config: IntegratorConfig = IntegratorConfig(rel_tol=1e-6, abs_tol=1e-9)):
    """Convergence flags on a ``grid_n``-per-axis grid; returns ``(points, converged)``."""
    if grid_n < 1 or steps < 1 or not dt > 0 or not radius > 0:
        raise ValueError("roa_baseline needs positive arguments")
    pts = grid_points(domain, grid_n**domain.dim)
    return pts, simulate_converged(system, pts, steps, dt, radius, config)
