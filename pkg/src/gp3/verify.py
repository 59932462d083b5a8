"""Certified bounds for ``g(f(x)) - mu(x)`` over boxes, and the refinement driver.

The engine combines three pieces:

* :func:`local_lipschitz` -- a Lipschitz constant of the posterior mean on a
  box, from per-training-point enclosures of the kernel partials, each scaled
  by its weight and summed with the bound rows swapped for negative weights.
* :func:`cell_bounds` -- the certified range of ``g(f(x)) - mu(x)`` on a box
  from the value at the centre plus Lipschitz slack.
* :func:`run_analysis` -- wave-by-wave evaluation and 2**d refinement of every
  box whose range misses the targets, until all are satisfied or too small.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import (Ball, Hyperrectangle, grid_counts, refine, refine_arrays,
                       uniform_grid)
from .gp import GPModel, mean_batch
from .kernels import derivative_bounds_all
from .parallel import WorkerPool

log = logging.getLogger(__name__)

__all__ = [
    "Ball", "Hyperrectangle", "refine", "Status", "ProblemSpec", "CellResult",
    "VerificationReport", "local_lipschitz", "lipschitz_batch", "cell_bounds",
    "run_analysis", "lipschitz_envelope", "certified_min", "AnalysisTimeout",
    "NonFiniteError",
]

# cells x training points per inner block
_BLOCK = 1 << 16


class Status(str, enum.Enum):
    SATISFIED = "satisfied"
    MIN_SIZE = "min_size_reached"
    ASSUMED = "assumed_verified"


_CODES = {Status.SATISFIED: 0, Status.MIN_SIZE: 1, Status.ASSUMED: 2}
_STATUS_OF = {v: k for k, v in _CODES.items()}


class NonFiniteError(ArithmeticError):
    def __init__(self, center, half_widths, what):
        super().__init__(f"non-finite {what} on cell c={np.asarray(center).tolist()} "
                         f"b={np.asarray(half_widths).tolist()}")
        self.center = np.asarray(center)
        self.half_widths = np.asarray(half_widths)


class AnalysisTimeout(RuntimeError):
    pass


# -- Lipschitz constants -----------------------------------------------------

def lipschitz_batch(model: GPModel, centers, half_widths) -> np.ndarray:
    """Local Lipschitz constants of the posterior mean on many boxes at once."""
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    B = np.atleast_2d(np.asarray(half_widths, dtype=float))
    B = np.broadcast_to(B, C.shape)
    if C.shape[1] != model.dim:
        raise ValueError(f"cells have d={C.shape[1]}, model has d={model.dim}")
    lam = model.weights
    pos = lam > 0
    X = model.X
    out = np.empty(len(C))
    step = max(1, _BLOCK // len(X))
    for s in range(0, len(C), step):
        c = C[s:s + step]
        b = B[s:s + step]
        up, lo = derivative_bounds_all(model.spec, X[None, :, :] - c[:, None, :], b[:, None, :])
        # (cells, d, N) so the sum over training points runs along contiguous memory
        up = np.ascontiguousarray(up.transpose(0, 2, 1)) * lam
        lo = np.ascontiguousarray(lo.transpose(0, 2, 1)) * lam
        row_hi = np.where(pos, up, lo).sum(axis=-1)
        row_lo = np.where(pos, lo, up).sum(axis=-1)
        out[s:s + step] = np.sqrt(np.sum(np.maximum(row_hi**2, row_lo**2), axis=-1))
    return out


def gradient_enclosure(model: GPModel, cell: Hyperrectangle):
    """Per-dimension enclosure ``(lower, upper)`` of the mean's gradient on ``cell``."""
    lam = model.weights
    up, lo = derivative_bounds_all(model.spec, model.X - cell.c, cell.b)
    pos = (lam > 0)[:, None]
    hi = np.sum(np.where(pos, lam[:, None] * up, lam[:, None] * lo), axis=0)
    low = np.sum(np.where(pos, lam[:, None] * lo, lam[:, None] * up), axis=0)
    return low, hi


def local_lipschitz(model: GPModel, cell: Hyperrectangle) -> float:
    return float(lipschitz_batch(model, cell.c[None, :], cell.b[None, :])[0])


# -- problem description -----------------------------------------------------

def _as_cell_fn(v):
    if callable(v):
        return v
    value = float(v)
    return lambda C, *_: np.full(len(C), value)


@dataclass
class ProblemSpec:
    """Comparison ``g(f(x)) - mu(x)`` on ``domain`` with target bounds.

    Evaluators work on batches: ``f`` maps ``(n, d) -> (n, d)`` and ``g`` maps
    ``(n, d) -> (n,)``. ``g=None`` compares against the posterior mean itself,
    whose Lipschitz constant on the image box is then computed on the fly;
    ``f=None`` is the identity. ``L_f`` may be a constant or a callable
    ``(centers, half_widths) -> (n,)``; ``L_g`` a constant or a callable
    ``(image_centers, image_radius) -> (n,)``. Targets are constants or
    callables of the cell centres; ``inf`` disables a side. ``f_radius``
    optionally replaces ``L_f * ||b||`` as the radius of ``f(cell)`` around
    ``f(c)`` (needed for non-Lipschitz maps such as grid snapping).

    With ``workers > 1`` all callables must survive pickling or the platform
    must support ``fork``.
    """

    domain: Hyperrectangle
    g: Callable | None = None
    f: Callable | None = None
    L_f: float | Callable = 1.0
    L_g: float | Callable | None = None
    target_lower: float | Callable = math.inf
    target_upper: float | Callable = math.inf
    b_min: float = 1e-3
    initial_cells: int = 1
    f_radius: Callable | None = None

    def __post_init__(self):
        if not self.b_min > 0:
            raise ValueError("b_min must be positive")
        if self.initial_cells < 1:
            raise ValueError("initial_cells must be positive")
        if self.g is not None and self.L_g is None:
            raise ValueError("a user-supplied g needs a Lipschitz constant L_g")
        if not callable(self.L_f) and self.L_f < 0:
            raise ValueError("L_f must be non-negative")

    @property
    def dim(self) -> int:
        return self.domain.dim


@dataclass(frozen=True)
class CellResult:
    cell: Hyperrectangle
    lo: float
    hi: float
    L_mu: float
    status: Status

    @property
    def eps1(self) -> float:
        return max(0.0, -self.lo)

    @property
    def eps2(self) -> float:
        return max(0.0, self.hi)


@dataclass
class VerificationReport:
    """Final tiling of the domain. Per-cell data are stored column-wise."""

    centers: np.ndarray
    half_widths: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    L_mu: np.ndarray
    status_codes: np.ndarray
    depth: np.ndarray
    total_cells_evaluated: int
    max_depth: int
    wall_time: float
    initial_grid: tuple = ()
    waves: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.centers)

    @property
    def statuses(self) -> list[Status]:
        return [_STATUS_OF[int(s)] for s in self.status_codes]

    def mask(self, status: Status) -> np.ndarray:
        return self.status_codes == _CODES[status]

    @property
    def cells(self) -> list[CellResult]:
        return [CellResult(Hyperrectangle(c, b), float(lo), float(hi), float(L), _STATUS_OF[int(s)])
                for c, b, lo, hi, L, s in zip(self.centers, self.half_widths, self.lo,
                                               self.hi, self.L_mu, self.status_codes)]

    @property
    def eps1(self) -> float:
        """Smallest ``e1 >= 0`` with ``-e1 <= g(f(x)) - mu(x)`` on all evaluated cells."""
        m = ~self.mask(Status.ASSUMED)
        return float(max(0.0, -np.min(self.lo[m]))) if m.any() else 0.0

    @property
    def eps2(self) -> float:
        m = ~self.mask(Status.ASSUMED)
        return float(max(0.0, np.max(self.hi[m]))) if m.any() else 0.0

    def volume(self) -> float:
        return float(np.sum(np.prod(2.0 * self.half_widths, axis=1)))


# -- per-cell bounds -----------------------------------------------------------

@dataclass(frozen=True)
class _Shared:
    problem: ProblemSpec
    model: GPModel


def _center_terms(problem: ProblemSpec, model: GPModel, C, B):
    """``g(f(c)) - mu(c)`` and the slack contributed by ``g o f``."""
    mu_c = mean_batch(model, C)
    rb = np.linalg.norm(B, axis=1)
    fc = C if problem.f is None else np.asarray(problem.f(C), dtype=float).reshape(C.shape)
    if problem.f_radius is not None:
        radius = np.asarray(problem.f_radius(C, B), dtype=float)
    else:
        radius = _as_cell_fn(problem.L_f)(C, B) * rb
    if problem.g is None:
        g_fc = mean_batch(model, fc)
        # f(cell) lies in the ball of this radius around f(c); enclose it in a box
        L_g = lipschitz_batch(model, fc, np.repeat(radius[:, None], C.shape[1], axis=1))
    else:
        g_fc = np.asarray(problem.g(fc), dtype=float).reshape(len(C))
        L_g = _as_cell_fn(problem.L_g)(fc, radius)
    return g_fc - mu_c, L_g * radius, rb


def _evaluate(shared: _Shared, C, B):
    L_mu = lipschitz_batch(shared.model, C, B)
    diff, g_slack, rb = _center_terms(shared.problem, shared.model, C, B)
    slack = g_slack + L_mu * rb
    return diff - slack, diff + slack, L_mu


def cell_bounds(problem: ProblemSpec, model: GPModel, cell: Hyperrectangle,
                L_mu: float | None = None) -> tuple[float, float]:
    """Certified ``(lo, hi)`` with ``lo <= g(f(x)) - mu(x) <= hi`` on ``cell``.

    ``L_mu`` defaults to :func:`local_lipschitz` on the cell.
    """
    if L_mu is None:
        L_mu = local_lipschitz(model, cell)
    diff, g_slack, rb = _center_terms(problem, model, cell.c[None, :], cell.b[None, :])
    slack = g_slack[0] + L_mu * rb[0]
    lo, hi = diff[0] - slack, diff[0] + slack
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteError(cell.c, cell.b, "bound")
    return float(lo), float(hi)


def _excluded(exclusions, C, B) -> np.ndarray:
    mask = np.zeros(len(C), dtype=bool)
    for region in exclusions:
        mask |= region.contains_cells(C, B)
    return mask


def run_analysis(problem: ProblemSpec, model: GPModel,
                 exclusions: Sequence[Hyperrectangle | Ball] = (),
                 workers: int | None = None, max_depth: int = 60,
                 time_limit: float | None = None, progress: Callable | None = None
                 ) -> VerificationReport:
    """Multi-resolution bound computation over ``problem.domain``.

    Each wave evaluates all open cells (in parallel when ``workers > 1``). A
    cell is satisfied when ``lo >= -target_lower(c)`` and
    ``hi <= target_upper(c)``; otherwise it is split unless ``||b|| <= b_min``
    or it sits at ``max_depth`` refinements. Cells wholly inside an exclusion
    region are accepted without evaluation.
    """
    if problem.dim != model.dim:
        raise ValueError(f"domain has d={problem.dim}, model has d={model.dim}")
    t0 = time.perf_counter()
    counts = grid_counts(problem.domain, problem.initial_cells)
    C, B = uniform_grid(problem.domain, counts)
    depth = 0
    t_lower = _as_cell_fn(problem.target_lower)
    t_upper = _as_cell_fn(problem.target_upper)
    done = []
    waves = []
    warnings = []
    evaluated = 0
    def check():
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            raise AnalysisTimeout(
                f"time limit {time_limit:.0f}s exceeded at depth {depth} "
                f"with {len(C)} open cells ({evaluated} evaluated)")

    with WorkerPool(_Shared(problem, model), workers) as pool:
        while len(C):
            check()
            excl = _excluded(exclusions, C, B)
            if excl.any():
                n_ex = int(excl.sum())
                done.append((C[excl], B[excl], np.full(n_ex, -np.inf), np.full(n_ex, np.inf),
                             np.full(n_ex, np.nan), np.full(n_ex, _CODES[Status.ASSUMED], np.int8),
                             np.full(n_ex, depth)))
                C, B = C[~excl], B[~excl]
            if not len(C):
                break
            lo, hi, L = pool.map_concat(_evaluate, C, B, check=check)
            evaluated += len(C)
            bad = ~(np.isfinite(lo) & np.isfinite(hi))
            if bad.any():
                i = int(np.argmax(bad))
                raise NonFiniteError(C[i], B[i], "bound")
            ok = (lo >= -t_lower(C)) & (hi <= t_upper(C))
            small = np.linalg.norm(B, axis=1) <= problem.b_min
            capped = depth >= max_depth
            if capped and not np.all(ok | small):
                warnings.append(f"max_depth={max_depth} reached with unsatisfied cells")
                log.warning(warnings[-1])
                small = np.ones_like(small)
            final = ok | small
            codes = np.where(ok, _CODES[Status.SATISFIED], _CODES[Status.MIN_SIZE]).astype(np.int8)
            done.append((C[final], B[final], lo[final], hi[final], L[final], codes[final],
                         np.full(int(final.sum()), depth)))
            waves.append({"depth": depth, "evaluated": len(C), "satisfied": int(ok.sum()),
                          "min_size": int((small & ~ok).sum()), "refined": int((~final).sum())})
            if progress is not None:
                progress(waves[-1])
            C, B = refine_arrays(C[~final], B[~final]) if (~final).any() else (C[:0], B[:0])
            depth += 1
    cols = list(zip(*done)) if done else [[np.empty((0, problem.dim))]] * 7
    cat = [np.concatenate(c) for c in cols]
    return VerificationReport(
        centers=cat[0], half_widths=cat[1], lo=cat[2], hi=cat[3], L_mu=cat[4],
        status_codes=cat[5], depth=cat[6], total_cells_evaluated=evaluated,
        max_depth=int(cat[6].max()) if len(cat[6]) else 0,
        wall_time=time.perf_counter() - t0, initial_grid=counts, waves=waves,
        warnings=warnings)


# -- Lipschitz envelope and certified minimum ---------------------------------------

def _max_lipschitz(model, C, B):
    return float(lipschitz_batch(model, C, B).max())


def lipschitz_envelope(model: GPModel, domain: Hyperrectangle, cell_budget: int,
                       workers: int | None = None):
    """Uniform dyadic refinement of ``domain``; max local constant per wave.

    Returns ``(L, curve)`` where ``curve`` lists ``(cell_count, wave_max)`` for
    every wave with at most ``cell_budget`` cells and ``L`` is the smallest
    wave maximum (each one is a valid global constant on ``domain``).
    """
    if cell_budget < 1:
        raise ValueError("cell_budget must be at least 1")
    d = domain.dim
    curve = []
    k = 0
    with WorkerPool(model, workers) as pool:
        while (1 << (k * d)) <= cell_budget:
            C, B = uniform_grid(domain, (1 << k,) * d)
            curve.append((len(C), max(pool.map(_max_lipschitz, C, B))))
            k += 1
    return min(L for _, L in curve), curve


def certified_min(model: GPModel, cells) -> float:
    """Lower bound on the minimum of the mean over a union of cells.

    ``cells`` is a sequence of :class:`Hyperrectangle` or a ``(centers,
    half_widths)`` pair of arrays.
    """
    if isinstance(cells, tuple) and len(cells) == 2 and isinstance(cells[0], np.ndarray):
        C, B = cells
    else:
        cells = list(cells)
        if not cells:
            raise ValueError("certified_min needs at least one cell")
        C = np.array([c.c for c in cells])
        B = np.array([c.b for c in cells])
    if len(C) == 0:
        raise ValueError("certified_min needs at least one cell")
    values = mean_batch(model, C) - lipschitz_batch(model, C, B) * np.linalg.norm(B, axis=1)
    return float(values.min())
