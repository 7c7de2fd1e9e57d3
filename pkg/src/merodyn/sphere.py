"""Riemann-sphere numerics: chordal distance and spherical derivatives.

Sphere points are plain complex numbers; the point at infinity is the
sentinel :data:`INF`. Any non-finite complex value is normalised to it by
:func:`as_sphere_point`, so overflow never leaks into finite coordinates.
"""

from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass

import numpy as np

INF = complex(math.inf, 0.0)

# Jets switch to the reciprocal chart once |f| exceeds this.
CHART_SWITCH = 1.0


def is_infinity(z) -> bool:
    return not cmath.isfinite(complex(z))


def as_sphere_point(z) -> complex:
    z = complex(z)
    return z if cmath.isfinite(z) else INF


def _chordal_scalar(a: complex, b: complex) -> float:
    a_inf, b_inf = is_infinity(a), is_infinity(b)
    if a_inf and b_inf:
        return 0.0
    if a_inf:
        return 2.0 / math.hypot(1.0, abs(b))
    if b_inf:
        return 2.0 / math.hypot(1.0, abs(a))
    if abs(a) > 1.0 and abs(b) > 1.0:
        # both near infinity: the inverted pair keeps |a - b| representable
        a, b = 1.0 / a, 1.0 / b
    return 2.0 * abs(a - b) / (math.hypot(1.0, abs(a)) * math.hypot(1.0, abs(b)))


def chordal_distance(a, b):
    """Chordal distance on the sphere of diameter 2.

    Accepts scalars or numpy arrays (broadcast); non-finite entries are the
    point at infinity.
    """
    if np.isscalar(a) and np.isscalar(b):
        return _chordal_scalar(complex(a), complex(b))
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    a, b = np.broadcast_arrays(a, b)
    a_inf = ~np.isfinite(a)
    b_inf = ~np.isfinite(b)
    big = (np.abs(a) > 1.0) & (np.abs(b) > 1.0) & ~a_inf & ~b_inf
    with np.errstate(all="ignore"):
        aa = np.where(big, 1.0 / np.where(big, a, 1.0), np.where(a_inf, 0.0, a))
        bb = np.where(big, 1.0 / np.where(big, b, 1.0), np.where(b_inf, 0.0, b))
        d = 2.0 * np.abs(aa - bb) / (np.hypot(1.0, np.abs(aa)) * np.hypot(1.0, np.abs(bb)))
    d = np.where(a_inf & ~b_inf, 2.0 / np.hypot(1.0, np.abs(bb)), d)
    d = np.where(b_inf & ~a_inf, 2.0 / np.hypot(1.0, np.abs(aa)), d)
    d = np.where(a_inf & b_inf, 0.0, d)
    return d


class Chart(enum.Enum):
    IDENTITY = "identity"
    RECIPROCAL = "reciprocal"


@dataclass(frozen=True)
class Jet:
    """Value and first derivative of f at ``base``.

    In the reciprocal chart ``value`` and ``deriv`` describe 1/f instead of f.
    """

    chart: Chart
    value: complex
    deriv: complex
    base: complex

    @property
    def is_reciprocal(self) -> bool:
        return self.chart is Chart.RECIPROCAL

    def point(self) -> complex:
        """The image f(base) as a sphere point."""
        if not self.is_reciprocal:
            return as_sphere_point(self.value)
        if self.value == 0:
            return INF
        return as_sphere_point(1.0 / self.value)

    def to_identity(self) -> "Jet":
        if not self.is_reciprocal:
            return self
        if self.value == 0:
            raise ZeroDivisionError("jet sits on a pole; no identity chart")
        w = self.value
        return Jet(Chart.IDENTITY, 1.0 / w, -self.deriv / (w * w), self.base)

    def to_reciprocal(self) -> "Jet":
        if self.is_reciprocal:
            return self
        if self.value == 0:
            raise ZeroDivisionError("jet sits on a zero; no reciprocal chart")
        a = self.value
        return Jet(Chart.RECIPROCAL, 1.0 / a, -self.deriv / (a * a), self.base)

    def normalized(self) -> "Jet":
        """Re-chart so that the stored value has modulus at most CHART_SWITCH."""
        if abs(self.value) <= CHART_SWITCH or self.value == 0:
            return self
        return self.to_identity() if self.is_reciprocal else self.to_reciprocal()


def marty_derivative(j: Jet) -> float:
    """|f'| / (1 + |f|^2); the same formula holds verbatim for 1/f."""
    v = abs(j.value)
    d = abs(j.deriv)
    if not math.isfinite(d):
        return math.inf
    return d / (1.0 + v * v)


def spherical_derivative(j: Jet) -> float:
    """Sphere-to-sphere derivative: Marty derivative times (1 + |base|^2)."""
    b = abs(j.base)
    return marty_derivative(j) * (1.0 + b * b)
