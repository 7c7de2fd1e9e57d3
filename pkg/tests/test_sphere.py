import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merodyn.sphere import (
    INF,
    Chart,
    Jet,
    as_sphere_point,
    chordal_distance,
    is_infinity,
    marty_derivative,
    spherical_derivative,
)

finite = st.complex_numbers(max_magnitude=1e8, allow_nan=False, allow_infinity=False)
points = st.one_of(finite, st.just(INF))


def embed(z):
    """Inverse stereographic projection onto the sphere of diameter 2 (oracle)."""
    if is_infinity(z):
        return np.array([0.0, 0.0, 1.0])
    a2 = abs(z) ** 2
    return np.array([2 * z.real, 2 * z.imag, a2 - 1]) / (1 + a2)


@pytest.mark.parametrize(
    "a,b,want",
    [(0, INF, 2.0), (1j, 1j, 0.0), (1, -1, 2.0), (INF, INF, 0.0)],
)
def test_chordal_examples(a, b, want):
    assert chordal_distance(a, b) == pytest.approx(want, abs=1e-15)


def test_nonfinite_values_collapse_to_infinity():
    assert as_sphere_point(complex(math.inf, 3)) == INF
    assert is_infinity(complex(math.nan, 0))
    assert as_sphere_point(2 + 1j) == 2 + 1j


@settings(max_examples=300, deadline=None)
@given(points, points)
def test_matches_embedding(a, b):
    want = np.linalg.norm(embed(complex(a)) - embed(complex(b)))
    assert chordal_distance(a, b) == pytest.approx(want, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(points, points, points)
def test_metric_axioms(a, b, c):
    dab = chordal_distance(a, b)
    assert dab == chordal_distance(b, a)
    assert 0.0 <= dab <= 2.0 + 1e-15
    assert dab <= chordal_distance(a, c) + chordal_distance(c, b) + 1e-12


@settings(max_examples=300, deadline=None)
@given(finite, finite)
def test_inversion_invariance(a, b):
    inv = lambda z: INF if z == 0 else 1 / z  # noqa: E731
    assert chordal_distance(inv(a), inv(b)) == pytest.approx(chordal_distance(a, b), abs=1e-12)


def test_array_form_agrees_with_scalar():
    rng = np.random.default_rng(3)
    a = rng.normal(size=500) * 10 ** rng.uniform(-3, 3, 500) + 1j * rng.normal(size=500)
    b = rng.normal(size=500) + 1j * rng.normal(size=500) * 10 ** rng.uniform(-3, 3, 500)
    a[::50] = INF
    arr = chordal_distance(a, b)
    scal = [chordal_distance(complex(x), complex(y)) for x, y in zip(a, b)]
    np.testing.assert_allclose(arr, scal, rtol=1e-13, atol=1e-15)


def test_large_close_points_keep_precision():
    a, b = 1e12, 1e12 + 1.0
    assert chordal_distance(a, b) == pytest.approx(2e-24, rel=1e-6)


def test_chart_round_trip():
    j = Jet(Chart.IDENTITY, 3 - 4j, 0.5 + 2j, 1j)
    back = j.to_reciprocal().to_identity()
    assert abs(back.value - j.value) <= 1e-12 * abs(j.value)
    assert abs(back.deriv - j.deriv) <= 1e-12 * abs(j.deriv)
    assert j.normalized().chart is Chart.RECIPROCAL
    assert Jet(Chart.RECIPROCAL, 0, 1, 0).point() == INF


@pytest.mark.parametrize(
    "value,deriv,base,sph,marty",
    [
        (0.0, 1.0, 0.0, 1.0, 1.0),  # identity at 0
        (1.0, 1.0, 1.0, 1.0, 0.5),  # identity at 1
        (1.0, 2.0, 1.0, 2.0, 1.0),  # z^2 at 1
        (1.0, 1.0, 0.0, 0.5, 0.5),  # exp at 0
        (0.5, -0.25, 2.0, 1.0, 0.2),  # 1/z at 2
    ],
)
def test_derivative_examples(value, deriv, base, sph, marty):
    j = Jet(Chart.IDENTITY, value, deriv, base)
    assert spherical_derivative(j) == pytest.approx(sph)
    assert marty_derivative(j) == pytest.approx(marty)


@settings(max_examples=200, deadline=None)
@given(finite.filter(lambda z: abs(z) > 1e-6), finite, finite)
def test_derivative_is_chart_independent(value, deriv, base):
    j = Jet(Chart.IDENTITY, value, deriv, base)
    r = j.to_reciprocal()
    assert marty_derivative(r) == pytest.approx(marty_derivative(j), rel=1e-12, abs=1e-300)
