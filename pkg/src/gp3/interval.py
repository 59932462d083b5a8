"""Real compact interval arithmetic.

Only the three ring operations are provided. Endpoints are plain floats and
no directed rounding is applied, so enclosures are exact with respect to real
arithmetic and accurate to unit roundoff in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``; ``lo == hi`` is an exact value."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"empty interval: lo={self.lo!r} > hi={self.hi!r}")

    @classmethod
    def point(cls, x: float) -> Interval:
        return cls(x, x)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def __contains__(self, x) -> bool:
        if isinstance(x, Interval):
            return self.lo <= x.lo and x.hi <= self.hi
        return self.lo <= x <= self.hi

    def __add__(self, other):
        return iv_add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return iv_sub(self, _coerce(other))

    def __rsub__(self, other):
        return iv_sub(_coerce(other), self)

    def __mul__(self, other):
        return iv_mul(self, _coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)


def _coerce(x) -> Interval:
    if isinstance(x, Interval):
        return x
    return Interval.point(float(x))


def iv_add(a: Interval, b: Interval) -> Interval:
    return Interval(a.lo + b.lo, a.hi + b.hi)


def iv_sub(a: Interval, b: Interval) -> Interval:
    return Interval(a.lo - b.hi, a.hi - b.lo)


def iv_mul(a: Interval, b: Interval) -> Interval:
    p = (a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi)
    return Interval(min(p), max(p))
