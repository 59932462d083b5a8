"""Stationary ARD kernels, their gradients, and derivative enclosures on boxes.

All three families are radial in the ARD distance ``r`` and share the form

    dk(x_t, x)/dx_j = (delta_j / l_j**2) * phi(r),   delta = x_t - x,

with ``phi(r) = -k'(r) / r`` positive and decreasing. Along the derived
direction the partial is odd in ``delta_j`` and unimodal on the positive half
line; along every other direction its magnitude decreases with distance. The
enclosures in :func:`derivative_bounds_all` are built from exactly these two
monotonicity facts.

Dimension indices ``j`` are zero-based throughout.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)


class Family(str, enum.Enum):
    SE = "se"
    MATERN32 = "matern32"
    MATERN52 = "matern52"

    @classmethod
    def parse(cls, name) -> Family:
        if isinstance(name, Family):
            return name
        if isinstance(name, enum.Enum):
            name = name.value
        key = str(name).strip().lower().replace("-", "").replace("_", "").replace("é", "e")
        aliases = {
            "se": cls.SE, "squaredexponential": cls.SE, "rbf": cls.SE,
            "matern32": cls.MATERN32, "m32": cls.MATERN32,
            "matern52": cls.MATERN52, "m52": cls.MATERN52,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown kernel family {name!r}") from None


@dataclass(frozen=True)
class KernelSpec:
    family: Family
    signal_variance: float
    length_scales: tuple

    def __init__(self, family, signal_variance, length_scales):
        ls = tuple(float(v) for v in np.atleast_1d(length_scales))
        if not ls:
            raise ValueError("need at least one length scale")
        if any(not (v > 0 and math.isfinite(v)) for v in ls):
            raise ValueError(f"length scales must be positive, got {ls}")
        if not (signal_variance > 0 and math.isfinite(signal_variance)):
            raise ValueError(f"signal variance must be positive, got {signal_variance}")
        object.__setattr__(self, "family", Family.parse(family))
        object.__setattr__(self, "signal_variance", float(signal_variance))
        object.__setattr__(self, "length_scales", ls)

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    @property
    def ls(self) -> np.ndarray:
        return np.array(self.length_scales)

    def replace(self, **kw) -> KernelSpec:
        args = dict(family=self.family, signal_variance=self.signal_variance,
                    length_scales=self.length_scales)
        args.update(kw)
        return KernelSpec(**args)


@dataclass(frozen=True)
class DerivBound:
    """Enclosure ``[lower, upper]`` of one kernel partial over a box."""

    upper: float
    lower: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"inverted derivative bound [{self.lower}, {self.upper}]")

    def __contains__(self, v) -> bool:
        return self.lower <= v <= self.upper


def _check_dims(spec: KernelSpec, *arrays):
    for a in arrays:
        if np.shape(a)[-1] != spec.dim:
            raise ValueError(f"dimension mismatch: kernel has d={spec.dim}, input has {np.shape(a)[-1]}")


def ard_distance(x, x2, spec: KernelSpec):
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    _check_dims(spec, x, x2)
    r = np.sqrt(np.sum(((x - x2) / spec.ls) ** 2, axis=-1))
    return float(r) if r.ndim == 0 else r


def kernel_from_r2(spec: KernelSpec, r2):
    sf2 = spec.signal_variance
    if spec.family is Family.SE:
        return sf2 * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if spec.family is Family.MATERN32:
        return sf2 * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)
    return sf2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-SQRT5 * r)


def _phi(spec: KernelSpec, r2):
    # -k'(r)/r as a function of r**2
    sf2 = spec.signal_variance
    if spec.family is Family.SE:
        return sf2 * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if spec.family is Family.MATERN32:
        return 3.0 * sf2 * np.exp(-SQRT3 * r)
    return (5.0 / 3.0) * sf2 * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)


def kernel_eval(spec: KernelSpec, x, x2):
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    _check_dims(spec, x, x2)
    r2 = np.sum(((x - x2) / spec.ls) ** 2, axis=-1)
    k = kernel_from_r2(spec, r2)
    return float(k) if np.ndim(k) == 0 else k


def kernel_matrix(spec: KernelSpec, xa, xb) -> np.ndarray:
    """``K[p, q] = k(xa[p], xb[q])``."""
    xa = np.atleast_2d(np.asarray(xa, dtype=float)) / spec.ls
    xb = np.atleast_2d(np.asarray(xb, dtype=float)) / spec.ls
    _check_dims(spec, xa, xb)
    diff = xa[:, None, :] - xb[None, :, :]
    return kernel_from_r2(spec, np.sum(diff * diff, axis=-1))


def kernel_partial(spec: KernelSpec, x_train, x, j: int):
    """Exact ``d k(x_train, x) / d x_j``."""
    x_train = np.asarray(x_train, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_dims(spec, x_train, x)
    if not 0 <= j < spec.dim:
        raise IndexError(f"dimension index {j} out of range for d={spec.dim}")
    delta = x_train - x
    r2 = np.sum((delta / spec.ls) ** 2, axis=-1)
    out = delta[..., j] / spec.length_scales[j] ** 2 * _phi(spec, r2)
    return float(out) if np.ndim(out) == 0 else out


def kernel_gradient(spec: KernelSpec, x_train, x) -> np.ndarray:
    """Gradient of ``k(x_train, x)`` with respect to ``x``, shape ``(..., d)``."""
    delta = np.asarray(x_train, dtype=float) - np.asarray(x, dtype=float)
    _check_dims(spec, delta)
    r2 = np.sum((delta / spec.ls) ** 2, axis=-1)
    return delta / spec.ls**2 * _phi(spec, r2)[..., None]


def _mode(family: Family, s2):
    """Maximiser of the partial along the derived direction, in length-scale units.

    ``s2`` is the squared ARD distance accumulated in the other directions.
    For the Matérn kernels the peak moves outward as ``s2`` grows.
    """
    if family is Family.SE:
        return np.ones_like(s2)
    if family is Family.MATERN32:
        return np.sqrt((1.0 + np.sqrt(1.0 + 12.0 * s2)) / 6.0)
    return np.sqrt((15.0 + np.sqrt(125.0 + 500.0 * s2)) / 50.0)


def maximum_point(spec: KernelSpec, j: int, offaxis_sq: float = 0.0) -> float:
    """Distance along dimension ``j`` at which the partial peaks.

    With ``offaxis_sq = 0`` this is ``l_j`` (SE), ``l_j/sqrt(3)`` (Matérn 3/2)
    and ``(5 + sqrt(5)) l_j / 10`` (Matérn 5/2).
    """
    return float(spec.length_scales[j] * _mode(spec.family, np.float64(offaxis_sq)))


def _hump(spec: KernelSpec, a, s2, lj):
    # partial as a function of the derived-direction offset a and off-axis s2
    return a / (lj * lj) * _phi(spec, (a / lj) ** 2 + s2)


def _upper(spec, t_lo, t_hi, s2_lo, s2_hi, lj):
    """Upper bound of the partial for delta_j in [t_lo, t_hi], off-axis in [s2_lo, s2_hi]."""
    a = np.clip(lj * _mode(spec.family, s2_lo), np.maximum(t_lo, 0.0), np.maximum(t_hi, 0.0))
    positive = _hump(spec, a, s2_lo, lj)
    # whole interval on the non-positive side: least negative value, farthest off-axis
    negative = -np.minimum(_hump(spec, -t_hi, s2_hi, lj), _hump(spec, -t_lo, s2_hi, lj))
    return np.where(t_hi > 0.0, positive, negative)


def derivative_bounds_all(spec: KernelSpec, delta, b):
    """Enclosures of every partial for training offsets ``delta`` over boxes ``b``.

    ``delta = x_train - center`` and ``b`` broadcast against each other with
    trailing dimension ``d``. Returns ``(upper, lower)`` of the broadcast shape;
    for every ``x`` with ``|x - center| <= b`` and every ``j``,
    ``lower[..., j] <= dk(x_train, x)/dx_j <= upper[..., j]``.
    """
    delta = np.asarray(delta, dtype=float)
    b = np.asarray(b, dtype=float)
    d = spec.dim
    ls = spec.ls
    absd = np.abs(delta)
    q_lo = (np.maximum(absd - b, 0.0) / ls) ** 2
    q_hi = ((absd + b) / ls) ** 2
    shape = np.broadcast_shapes(delta.shape, b.shape)
    upper = np.empty(shape)
    lower = np.empty(shape)
    for j in range(d):
        if d == 1:
            s2_lo = s2_hi = np.zeros(shape[:-1])
        else:
            others = [i for i in range(d) if i != j]
            s2_lo = q_lo[..., others].sum(axis=-1)
            s2_hi = q_hi[..., others].sum(axis=-1)
        t_lo = delta[..., j] - b[..., j]
        t_hi = delta[..., j] + b[..., j]
        lj = ls[j]
        up = _upper(spec, t_lo, t_hi, s2_lo, s2_hi, lj)
        # odd symmetry: lower bound is the mirrored upper bound, negated
        lo = -_upper(spec, -t_hi, -t_lo, s2_lo, s2_hi, lj)
        upper[..., j] = up
        lower[..., j] = lo
    bad = lower - upper > 1e-12 * np.maximum(np.abs(lower), np.abs(upper))
    if np.any(bad):
        raise ArithmeticError("derivative enclosure came out inverted (lower > upper)")
    return upper, lower


def derivative_bounds(spec: KernelSpec, x_train, cell, j: int) -> DerivBound:
    """Enclosure of ``dk(x_train, x)/dx_j`` over all ``x`` in ``cell``."""
    c = np.asarray(cell.center, dtype=float)
    b = np.asarray(cell.half_widths, dtype=float)
    x_train = np.asarray(x_train, dtype=float)
    _check_dims(spec, x_train, c)
    if np.any(b < 0):
        raise ValueError("invalid cell: negative half width")
    if not 0 <= j < spec.dim:
        raise IndexError(f"dimension index {j} out of range for d={spec.dim}")
    up, lo = derivative_bounds_all(spec, x_train - c, b)
    return DerivBound(upper=float(up[j]), lower=float(min(lo[j], up[j])))
