"""Axis-aligned cells, exclusion regions and dyadic refinement."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Hyperrectangle:
    """The box ``{x : |x - center| <= half_widths}`` (element-wise)."""

    center: tuple
    half_widths: tuple

    def __init__(self, center, half_widths):
        c = tuple(float(v) for v in np.atleast_1d(center))
        b = tuple(float(v) for v in np.atleast_1d(half_widths))
        if len(c) != len(b):
            raise ValueError(f"center has {len(c)} entries, half_widths {len(b)}")
        if any(not v >= 0.0 for v in b):
            raise ValueError(f"half widths must be non-negative, got {b}")
        if not all(map(math.isfinite, c + b)):
            raise ValueError("non-finite cell")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_widths", b)

    @classmethod
    def from_bounds(cls, lower, upper) -> Hyperrectangle:
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(upper < lower):
            raise ValueError("upper bound below lower bound")
        return cls(0.5 * (lower + upper), 0.5 * (upper - lower))

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def c(self) -> np.ndarray:
        return np.array(self.center)

    @property
    def b(self) -> np.ndarray:
        return np.array(self.half_widths)

    @property
    def lower(self) -> np.ndarray:
        return self.c - self.b

    @property
    def upper(self) -> np.ndarray:
        return self.c + self.b

    @property
    def radius(self) -> float:
        """Euclidean norm of the half widths (circumscribed ball radius)."""
        return float(np.linalg.norm(self.b))

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.b))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.abs(x - self.c) <= self.b))

    def contains_cells(self, centers, half_widths) -> np.ndarray:
        """Mask of cells lying entirely inside this box."""
        lo = centers - half_widths
        hi = centers + half_widths
        return np.all((lo >= self.lower) & (hi <= self.upper), axis=-1)

    def sample(self, n: int, rng) -> np.ndarray:
        return self.c + self.b * rng.uniform(-1.0, 1.0, size=(n, self.dim))


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __init__(self, center, radius):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(center)))
        if not radius >= 0:
            raise ValueError("ball radius must be non-negative")
        object.__setattr__(self, "radius", float(radius))

    def contains_cells(self, centers, half_widths) -> np.ndarray:
        # conservative: the circumscribed ball of the cell must fit inside
        dist = np.linalg.norm(centers - np.asarray(self.center), axis=-1)
        return dist + np.linalg.norm(half_widths, axis=-1) <= self.radius


def refine(cell: Hyperrectangle) -> list[Hyperrectangle]:
    """Split ``cell`` into its 2**d children with halved half widths."""
    b = cell.b
    if np.any(b <= 0.0):
        raise ValueError("cannot split a cell with a zero-width dimension")
    centers, half = refine_arrays(cell.c[None, :], b[None, :])
    return [Hyperrectangle(c, h) for c, h in zip(centers, half)]


def refine_arrays(centers: np.ndarray, half_widths: np.ndarray):
    """Vectorised 2**d split; children of a parent are contiguous."""
    n, d = centers.shape
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    hb = 0.5 * half_widths
    child_c = centers[:, None, :] + signs[None, :, :] * hb[:, None, :]
    child_b = np.broadcast_to(hb[:, None, :], child_c.shape)
    return child_c.reshape(n * len(signs), d), np.ascontiguousarray(child_b.reshape(n * len(signs), d))


def grid_counts(domain: Hyperrectangle, m: int) -> tuple[int, ...]:
    """Per-axis counts proportional to the domain widths with product >= m."""
    w = 2.0 * domain.b
    if m <= 1:
        return (1,) * domain.dim
    if np.any(w <= 0):
        raise ValueError("domain has a zero-width dimension")
    scale = (m / np.prod(w)) ** (1.0 / domain.dim)
    counts = [max(1, math.ceil(wi * scale - 1e-9)) for wi in w]
    while math.prod(counts) < m:
        i = int(np.argmin([c / wi for c, wi in zip(counts, w)]))
        counts[i] += 1
    return tuple(counts)


def uniform_grid(domain: Hyperrectangle, counts) -> tuple[np.ndarray, np.ndarray]:
    """Tile ``domain`` with ``prod(counts)`` equal cells (C order, last axis fastest)."""
    lo = domain.lower
    width = 2.0 * domain.b / np.asarray(counts, dtype=float)
    axes = [lo[i] + width[i] * (np.arange(n) + 0.5) for i, n in enumerate(counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=-1)
    half = np.broadcast_to(0.5 * width, centers.shape).copy()
    return centers, half
