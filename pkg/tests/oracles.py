"""Randomised instances and dense-sampling oracles shared by several test modules."""

import numpy as np

from gp3.geometry import Hyperrectangle
from gp3.gp import TrainingSet, fit, mean_batch
from gp3.kernels import Family, KernelSpec, kernel_gradient, kernel_partial, maximum_point
from gp3.verify import ProblemSpec, cell_bounds, local_lipschitz

FAMILIES = list(Family)


def random_model(rng, d=None, n=None, family=None):
    d = d or int(rng.integers(1, 4))
    n = n or int(rng.integers(1, 31))
    family = family or FAMILIES[rng.integers(3)]
    spec = KernelSpec(family, rng.uniform(0.3, 3.0), rng.uniform(0.3, 2.0, d))
    X = rng.uniform(-2, 2, (n, d))
    y = rng.normal(size=n) * rng.uniform(0.5, 3.0)
    return fit(TrainingSet(X, y), spec, rng.uniform(1e-3, 0.3))


CELL_KINDS = 4


def random_cell(rng, model, kind=None):
    """Cells placed relative to a training point so every enclosure case occurs."""
    d = model.dim
    xt = model.X[rng.integers(len(model.X))]
    ls = model.spec.ls
    peak = np.array([maximum_point(model.spec, j) for j in range(d)])
    kind = rng.integers(CELL_KINDS) if kind is None else kind
    b = ls * rng.uniform(0.01, 1.0, d) * rng.choice([0.1, 0.5, 1.5])
    if kind == 0:  # training point inside the cell
        c = xt + rng.uniform(-1, 1, d) * b
    elif kind == 1:  # cell straddling the peak of the partial
        c = xt + rng.choice([-1, 1], d) * peak + rng.uniform(-0.5, 0.5, d) * b
    elif kind == 2:  # wholly beyond the peak
        c = xt + rng.choice([-1, 1], d) * (peak + b + rng.uniform(0, 2, d) * ls)
    else:  # between the training point and the peak
        c = xt + rng.choice([-1, 1], d) * rng.uniform(0, 1, d) * peak
    return Hyperrectangle(c, b)


def sample_cell(rng, cell, n):
    pts = cell.c + cell.b * rng.uniform(-1, 1, (n, cell.dim))
    corners = cell.c + cell.b * rng.choice([-1.0, 1.0], (min(n, 2**cell.dim * 2), cell.dim))
    return np.vstack([pts, corners, cell.c])


def mean_gradient(model, xs):
    g = kernel_gradient(model.spec, model.X[None, :, :], xs[:, None, :])
    return np.einsum("pnd,n->pd", g, model.weights)


def partial_violations(model, cell, pts, tol=1e-12):
    from gp3.kernels import derivative_bounds_all
    count = 0
    up, lo = derivative_bounds_all(model.spec, model.X - cell.c, cell.b)
    for i, xt in enumerate(model.X):
        for j in range(model.dim):
            v = kernel_partial(model.spec, xt, pts, j)
            slack = tol * max(1.0, np.abs(v).max())
            count += int(np.sum(v > up[i, j] + slack) + np.sum(v < lo[i, j] - slack))
    return count


def lipschitz_violations(model, cell, pts, tol=1e-10):
    L = local_lipschitz(model, cell)
    norms = np.linalg.norm(mean_gradient(model, pts), axis=1)
    return int(np.sum(norms > L * (1 + tol) + tol))


class SineMap:
    """``f(x) = A sin(x) + s`` with Lipschitz constant ``||A||_2``."""

    def __init__(self, A, s):
        self.A, self.s = A, s
        self.L = float(np.linalg.norm(A, 2))

    def __call__(self, X):
        return np.sin(X) @ self.A.T + self.s


class CosineTarget:
    """``g(y) = a cos(w . y)`` with Lipschitz constant ``|a| ||w||``."""

    def __init__(self, a, w):
        self.a, self.w = a, w
        self.L = abs(a) * float(np.linalg.norm(w))

    def __call__(self, Y):
        return self.a * np.cos(Y @ self.w)


def random_problem(rng, model, domain):
    d = model.dim
    f = SineMap(rng.normal(size=(d, d)) * 0.7, rng.normal(size=d) * 0.3)
    if rng.random() < 0.5:
        return ProblemSpec(domain, g=None, f=f, L_f=f.L)
    g = CosineTarget(rng.normal(), rng.normal(size=d))
    return ProblemSpec(domain, g=g, f=f, L_f=f.L, L_g=g.L)


def difference(problem, model, pts):
    fx = problem.f(pts) if problem.f is not None else pts
    gfx = mean_batch(model, fx) if problem.g is None else problem.g(fx)
    return gfx - mean_batch(model, pts)


def bound_violations(problem, model, cell, pts, tol=1e-9):
    lo, hi = cell_bounds(problem, model, cell)
    v = difference(problem, model, pts)
    slack = tol * max(1.0, np.abs(v).max())
    return int(np.sum(v < lo - slack) + np.sum(v > hi + slack))
