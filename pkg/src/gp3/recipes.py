"""End-to-end pipelines: Lipschitz envelopes of a learned function and
region-of-attraction certification for a learned Lyapunov function.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .dynamics import (IntegratorConfig, LyapunovDataset, ODESystem, SMIBParams,
                       build_lyapunov_dataset, flow_map, grid_points, roa_baseline,
                       simulate_converged, smib_system)
from .geometry import Ball, Hyperrectangle
from .gp import GPModel, TrainingSet, fit, mean_batch, optimize_hyperparameters
from .kernels import Family, KernelSpec
from .verify import (ProblemSpec, Status, VerificationReport, certified_min, lipschitz_batch,
                     lipschitz_envelope, run_analysis)

log = logging.getLogger(__name__)


# -- learned-function Lipschitz envelopes -----------------------------------------

LIPSCHITZ_DOMAIN = ((-6.0, -4.0), (4.0, 4.0))

# published hyperparameters for the built-in target (signal variance, length scales)
DEFAULT_HYPERPARAMETERS = {
    Family.SE: (0.956, (1.762, 5.537)),
    Family.MATERN32: (1.274, (3.755, 15.052)),
    Family.MATERN52: (1.012, (2.333, 8.496)),
}
DEFAULT_NOISE_VARIANCE = 0.1


def builtin_target(X) -> np.ndarray:
    """``1 - sin(x1) + 1 / (1 + exp(-x2))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return 1.0 - np.sin(X[:, 0]) + 1.0 / (1.0 + np.exp(-X[:, 1]))


def builtin_training_set(n_samples: int = 100, noise_std: float = 0.0, seed: int = 0,
                         domain: Hyperrectangle | None = None) -> TrainingSet:
    """Target sampled on a uniform grid over the domain (corners included)."""
    domain = domain or Hyperrectangle.from_bounds(*LIPSCHITZ_DOMAIN)
    X = grid_points(domain, n_samples)
    y = builtin_target(X)
    if noise_std > 0:
        y = y + np.random.default_rng(seed).normal(scale=noise_std, size=y.shape)
    return TrainingSet(X, y)


@dataclass
class LipschitzRecipeConfig:
    families: tuple = (Family.SE, Family.MATERN32, Family.MATERN52)
    lower: tuple = LIPSCHITZ_DOMAIN[0]
    upper: tuple = LIPSCHITZ_DOMAIN[1]
    n_samples: int = 100
    noise_std: float = 0.0
    seed: int = 0
    optimize: bool = False
    # family -> (signal variance, length scales); missing families use DEFAULT_HYPERPARAMETERS
    hyperparameters: dict = field(default_factory=dict)
    noise_variance: float = DEFAULT_NOISE_VARIANCE
    cell_budget: int = 2000
    training: TrainingSet | None = None
    workers: int | None = None

    def __post_init__(self):
        self.families = tuple(Family.parse(f) for f in self.families)
        if not self.families:
            raise ValueError("need at least one kernel family")
        if self.cell_budget < 1:
            raise ValueError("cell budget must be positive")

    @property
    def domain(self) -> Hyperrectangle:
        return Hyperrectangle.from_bounds(self.lower, self.upper)


@dataclass
class LipschitzCurve:
    family: Family
    spec: KernelSpec
    noise_variance: float
    curve: list  # (cell_count, L) per wave
    final: float
    naive: float
    wall_time: float


def run_lipschitz_recipe(config: LipschitzRecipeConfig) -> dict[Family, LipschitzCurve]:
    domain = config.domain
    train = config.training or builtin_training_set(config.n_samples, config.noise_std,
                                                    config.seed, domain)
    if train.dim != domain.dim:
        raise ValueError(f"training data have d={train.dim}, domain has d={domain.dim}")
    out = {}
    for family in config.families:
        fallback = DEFAULT_HYPERPARAMETERS.get(family, (1.0, (1.0,) * domain.dim))
        sf2, ls = config.hyperparameters.get(family, fallback)
        spec = KernelSpec(family, sf2, ls)
        noise = config.noise_variance
        if config.optimize:
            spec, noise = optimize_hyperparameters(train, family, init=spec, noise_variance=noise,
                                                   seed=config.seed)
        model = fit(train, spec, noise)
        t0 = time.perf_counter()
        final, curve = lipschitz_envelope(model, domain, config.cell_budget, config.workers)
        out[family] = LipschitzCurve(family, spec, noise, curve, final, curve[0][1],
                                     time.perf_counter() - t0)
        log.info("%s: naive %.4g, final %.4g after %d cells", family.value, curve[0][1], final,
                 curve[-1][0])
    return out


def relative_change_last_decade(curve) -> float:
    """Relative drop of ``L`` between ``N_final / 10`` cells and ``N_final`` cells.

    ``L`` at ``N_final / 10`` is interpolated linearly in ``log(cell_count)``.
    """
    counts = np.array([c for c, _ in curve], dtype=float)
    values = np.array([v for _, v in curve], dtype=float)
    target = math.log(counts[-1] / 10.0)
    logs = np.log(counts)
    if target < logs[0]:
        raise ValueError("curve does not span a full decade of cell counts")
    earlier = float(np.interp(target, logs, values))
    return (earlier - values[-1]) / values[-1]


# -- region of attraction -----------------------------------------------------------

@dataclass
class RoaRecipeConfig:
    params: SMIBParams = field(default_factory=SMIBParams)
    lower: tuple = (-5.0, -5.0)
    upper: tuple = (5.0, 5.0)
    n_samples: int = 1024
    horizon: int = 1000
    dt: float = 0.01
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(Family.MATERN32, 1e8, (1.0, 0.4)))
    noise_variance: float = 0.1
    optimize: bool = False
    L_f: float = 20.0
    b_min: float = 1e-4
    radius: float = 0.1
    initial_cells: int = 16
    baseline_grid: int = 63
    baseline_steps: int = 10_000
    baseline_radius: float = 0.1
    skip_baseline: bool = False
    # any autonomous system replaces the SMIB model when given
    system: ODESystem | None = None
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    workers: int | None = None
    time_limit: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("exclusion radius must be positive")
        if not self.b_min > 0:
            raise ValueError("b_min must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def domain(self) -> Hyperrectangle:
        return Hyperrectangle.from_bounds(self.lower, self.upper)

    def make_system(self) -> ODESystem:
        return self.system if self.system is not None else smib_system(self.params)


@dataclass
class RoaResult:
    dataset: LyapunovDataset
    model: GPModel
    report: VerificationReport
    c_star: float
    W: np.ndarray  # mask over report cells: certified decrease
    V: np.ndarray  # mask over report cells: certified level set below c_star
    upper_mu: np.ndarray  # certified upper bound of the mean on every cell
    baseline_points: np.ndarray | None
    baseline_converged: np.ndarray | None
    warnings: list
    timings: dict

    def cells(self, mask):
        return self.report.centers[mask], self.report.half_widths[mask]


def run_roa_recipe(config: RoaRecipeConfig, progress=None) -> RoaResult:
    timings = {}
    t0 = time.perf_counter()
    system = config.make_system()
    domain = config.domain
    dataset = build_lyapunov_dataset(system, domain, config.n_samples, config.horizon, config.dt,
                                     config.integrator)
    train = TrainingSet(dataset.X0, dataset.V)
    spec, noise = config.kernel, config.noise_variance
    if config.optimize:
        spec, noise = optimize_hyperparameters(train, spec.family, init=spec, noise_variance=noise,
                                               seed=config.seed)
    model = fit(train, spec, noise)
    timings["learn"] = time.perf_counter() - t0

    # decrease of the learned function along one sampling interval: mu(f(x)) - mu(x) <= 0
    problem = ProblemSpec(domain, g=None, f=flow_map(system, config.dt, config.integrator),
                          L_f=config.L_f, target_lower=math.inf, target_upper=0.0,
                          b_min=config.b_min, initial_cells=config.initial_cells)
    origin = Ball(np.zeros(domain.dim), config.radius)
    t1 = time.perf_counter()
    report = run_analysis(problem, model, [origin], workers=config.workers,
                          time_limit=config.time_limit, progress=progress)
    timings["verify"] = time.perf_counter() - t1

    W = report.mask(Status.SATISFIED)
    assumed = report.mask(Status.ASSUMED)
    unverified = report.mask(Status.MIN_SIZE)
    warnings = list(report.warnings)
    if not W.any():
        warnings.append("decrease region is empty")
    c_star = (certified_min(model, (report.centers[unverified], report.half_widths[unverified]))
              if unverified.any() else math.inf)

    L = report.L_mu.copy()
    if assumed.any():
        L[assumed] = lipschitz_batch(model, report.centers[assumed], report.half_widths[assumed])
    upper_mu = mean_batch(model, report.centers) + L * np.linalg.norm(report.half_widths, axis=1)
    V = (W | assumed) & (upper_mu <= c_star)

    points = converged = None
    if not config.skip_baseline:
        t2 = time.perf_counter()
        points, converged = roa_baseline(system, domain, config.baseline_grid,
                                         config.baseline_steps, config.dt, config.baseline_radius)
        timings["baseline"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0
    return RoaResult(dataset, model, report, c_star, W, V, upper_mu, points, converged,
                     warnings, timings)


# -- geometry of cell unions ------------------------------------------------------------

def adjacency(centers, half_widths, tol: float = 1e-9):
    """Sparse adjacency of boxes sharing a face of positive (d-1)-measure."""
    C = np.asarray(centers, dtype=float)
    B = np.asarray(half_widths, dtype=float)
    n = len(C)
    if n == 0:
        return coo_matrix((0, 0))
    rb = np.linalg.norm(B, axis=1)
    tree = cKDTree(C)
    pairs = tree.query_ball_point(C, rb + rb.max() + tol)
    rows = np.repeat(np.arange(n), [len(p) for p in pairs])
    cols = np.concatenate([np.asarray(p, dtype=int) for p in pairs])
    keep = rows < cols
    rows, cols = rows[keep], cols[keep]
    gap = np.abs(C[rows] - C[cols]) - (B[rows] + B[cols])
    scale = tol * (1.0 + np.abs(C[rows]) + B[rows])
    touching = np.all(gap <= scale, axis=1)
    overlapping = gap < -scale
    # face contact: touching everywhere, overlapping in all but at most one axis
    face = touching & (overlapping.sum(axis=1) >= C.shape[1] - 1)
    rows, cols = rows[face], cols[face]
    return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def cell_components(centers, half_widths) -> tuple[int, np.ndarray]:
    """Connected components of a union of boxes (face adjacency)."""
    if len(centers) == 0:
        return 0, np.empty(0, dtype=int)
    return connected_components(adjacency(centers, half_widths), directed=False)


def encircles(centers, half_widths, labels, inner, sectors: int = 8) -> np.ndarray:
    """For each component, whether its cells touching ``inner`` cover every angular sector.

    ``inner`` is a boolean mask of the boxes forming the enclosed region (2-D only).
    """
    C = np.asarray(centers)
    B = np.asarray(half_widths)
    if C.shape[1] != 2:
        raise ValueError("angular coverage is defined in the plane only")
    A = adjacency(C, B).tocsr()
    A = A + A.T
    touching_inner = np.asarray(A[:, np.flatnonzero(inner)].sum(axis=1)).ravel() > 0
    centre = C[inner].mean(axis=0) if inner.any() else np.zeros(2)
    angle = np.arctan2(C[:, 1] - centre[1], C[:, 0] - centre[0])
    sector = np.floor((angle + np.pi) / (2 * np.pi) * sectors).astype(int) % sectors
    result = np.zeros(labels.max() + 1 if len(labels) else 0, dtype=bool)
    for comp in range(len(result)):
        sel = (labels == comp) & touching_inner & ~inner
        result[comp] = len(np.unique(sector[sel])) == sectors
    return result


def points_in_cells(points, centers, half_widths) -> np.ndarray:
    """Mask of points lying in at least one (closed) box."""
    P = np.asarray(points, dtype=float)
    C = np.asarray(centers, dtype=float)
    B = np.asarray(half_widths, dtype=float)
    out = np.zeros(len(P), dtype=bool)
    if len(C) == 0 or len(P) == 0:
        return out
    tree = cKDTree(C)
    for i, near in enumerate(tree.query_ball_point(P, np.linalg.norm(B, axis=1).max() * (1 + 1e-12))):
        if near:
            idx = np.asarray(near)
            out[i] = bool(np.any(np.all(np.abs(P[i] - C[idx]) <= B[idx], axis=1)))
    return out


@dataclass
class RoaChecks:
    W_nonempty: bool
    W_components: int
    W_encircles_ball: bool
    V_in_W_or_ball: bool
    V_cells: int
    V_centers_converged: bool
    baseline_points_ok: bool


def roa_checks(result: RoaResult, system: ODESystem, steps: int, dt: float, radius: float,
               chunk: int = 20_000) -> RoaChecks:
    """Containment and shape checks comparing the certified regions with simulation."""
    rep = result.report
    assumed = rep.mask(Status.ASSUMED)
    W = result.W
    n_comp, labels = cell_components(rep.centers[W | assumed], rep.half_widths[W | assumed])
    sub_assumed = assumed[W | assumed]
    ring = False
    if rep.centers.shape[1] == 2 and sub_assumed.any():
        enc = encircles(rep.centers[W | assumed], rep.half_widths[W | assumed], labels, sub_assumed)
        ring = bool(enc[labels[sub_assumed][0]]) and len(np.unique(labels[sub_assumed])) == 1
    w_comp, _ = cell_components(rep.centers[W], rep.half_widths[W])
    V = result.V
    centres = rep.centers[V & ~assumed]
    conv = np.ones(len(centres), dtype=bool)
    for s in range(0, len(centres), chunk):
        conv[s:s + chunk] = simulate_converged(system, centres[s:s + chunk], steps, dt, radius)
    grid_ok = True
    if result.baseline_points is not None:
        bad = result.baseline_points[~result.baseline_converged]
        grid_ok = not points_in_cells(bad, rep.centers[V], rep.half_widths[V]).any()
    return RoaChecks(
        W_nonempty=bool(W.any()), W_components=int(w_comp), W_encircles_ball=ring,
        V_in_W_or_ball=bool(np.all(W[V] | assumed[V])), V_cells=int(V.sum()),
        V_centers_converged=bool(conv.all()), baseline_points_ok=grid_ok)
