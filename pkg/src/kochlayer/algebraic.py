"""Exact arithmetic in the ring Q(sqrt 3).

Every vertex produced by the snowflake maps, and every fiber corner built from
an amplitude in Q(sqrt 3), has coordinates of the form ``a + b*sqrt(3)`` with
rational ``a`` and ``b``.  Keeping them exact lets coincident cells and fiber
patches be detected by plain equality.
"""

from __future__ import annotations

import math
from fractions import Fraction
from numbers import Rational

SQRT3 = math.sqrt(3.0)


def _frac(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, Rational)):
        return Fraction(value)
    if isinstance(value, float):
        # decimal reading: 0.1 means 1/10, not the binary neighbour
        return Fraction(repr(value))
    if isinstance(value, str):
        return Fraction(value)
    raise TypeError(f"cannot convert {type(value).__name__} to Fraction")


class AlgebraicNumber:
    """The real number ``a + b*sqrt(3)`` with ``a, b`` rational."""

    __slots__ = ("a", "b", "_hash")

    def __init__(self, a=0, b=0):
        self.a = _frac(a)
        self.b = _frac(b)
        self._hash = None

    @classmethod
    def coerce(cls, value) -> "AlgebraicNumber":
        if isinstance(value, AlgebraicNumber):
            return value
        return cls(value, 0)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        o = AlgebraicNumber.coerce(other)
        return AlgebraicNumber(self.a + o.a, self.b + o.b)

    __radd__ = __add__

    def __neg__(self):
        return AlgebraicNumber(-self.a, -self.b)

    def __sub__(self, other):
        o = AlgebraicNumber.coerce(other)
        return AlgebraicNumber(self.a - o.a, self.b - o.b)

    def __rsub__(self, other):
        return AlgebraicNumber.coerce(other) - self

    def __mul__(self, other):
        o = AlgebraicNumber.coerce(other)
        return AlgebraicNumber(self.a * o.a + 3 * self.b * o.b, self.a * o.b + self.b * o.a)

    __rmul__ = __mul__

    def conjugate(self) -> "AlgebraicNumber":
        return AlgebraicNumber(self.a, -self.b)

    def norm(self) -> Fraction:
        return self.a * self.a - 3 * self.b * self.b

    def __truediv__(self, other):
        o = AlgebraicNumber.coerce(other)
        nrm = o.norm()
        if nrm == 0:
            raise ZeroDivisionError("division by zero in Q(sqrt 3)")
        num = self * o.conjugate()
        return AlgebraicNumber(num.a / nrm, num.b / nrm)

    def __rtruediv__(self, other):
        return AlgebraicNumber.coerce(other) / self

    # comparison -----------------------------------------------------------
    def __eq__(self, other):
        if isinstance(other, (int, Fraction, AlgebraicNumber)):
            o = AlgebraicNumber.coerce(other)
            return self.a == o.a and self.b == o.b
        return NotImplemented

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.a, self.b))
        return self._hash

    def sign(self) -> int:
        """Exact sign of ``a + b*sqrt(3)``."""
        a, b = self.a, self.b
        if b == 0:
            return (a > 0) - (a < 0)
        if a == 0:
            return (b > 0) - (b < 0)
        if (a > 0) == (b > 0):
            return 1 if a > 0 else -1
        # opposite signs: compare a^2 with 3 b^2
        diff = a * a - 3 * b * b
        if a > 0:
            return (diff > 0) - (diff < 0)
        return (diff < 0) - (diff > 0)

    def __lt__(self, other):
        return (self - other).sign() < 0

    def __le__(self, other):
        return (self - other).sign() <= 0

    def __gt__(self, other):
        return (self - other).sign() > 0

    def __ge__(self, other):
        return (self - other).sign() >= 0

    def __float__(self):
        return float(self.a) + float(self.b) * SQRT3

    def __repr__(self):
        if self.b == 0:
            return f"AlgebraicNumber({self.a})"
        return f"AlgebraicNumber({self.a}, {self.b})"

    def to_json(self) -> list[str]:
        return [str(self.a), str(self.b)]

    @classmethod
    def from_json(cls, data) -> "AlgebraicNumber":
        return cls(Fraction(data[0]), Fraction(data[1]))


Point = tuple  # (AlgebraicNumber, AlgebraicNumber)

ZERO = AlgebraicNumber(0)
ONE = AlgebraicNumber(1)
HALF = AlgebraicNumber(Fraction(1, 2))
ROOT3 = AlgebraicNumber(0, 1)


def point(x, y) -> Point:
    return (AlgebraicNumber.coerce(x), AlgebraicNumber.coerce(y))


def point_to_float(pt: Point) -> tuple[float, float]:
    return (float(pt[0]), float(pt[1]))


def points_to_array(pts):
    import numpy as np

    return np.array([[float(p[0]), float(p[1])] for p in pts], dtype=float)


def as_amplitude(value) -> AlgebraicNumber:
    """Coerce a fiber amplitude (float, str, Fraction or AlgebraicNumber) to an exact value."""
    return AlgebraicNumber.coerce(value)
