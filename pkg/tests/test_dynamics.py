import math

import numpy as np
import pytest
from scipy.optimize import brentq

from merodyn.dynamics import (
    GridSpec,
    PixelFlag,
    find_prepoles,
    marty_raster,
    orbit,
    raster_metadata,
    read_ppm,
    write_metadata,
    write_ppm,
)
from merodyn.fnexpr import FunctionProfile, ProfileCase, Region, classify_profile, parse
from merodyn.sphere import INF

TAN = parse("tan(z)")
TWO_TAN = parse("2*tan(z)")


def test_orbits():
    assert orbit(parse("z^2"), 1, 5) == [1] * 6
    assert orbit(TAN, math.pi / 2, 5) == [math.pi / 2, INF]
    assert orbit(TWO_TAN, 0, 4) == [0] * 5


def test_grid_pixel_round_trip():
    g = GridSpec(1 + 1j, 2.0, 1.0, 8, 4)
    c = g.centers()
    assert c.shape == (4, 8)
    assert c[0, 0].imag > c[-1, 0].imag  # row 0 on top
    ix, iy = g.point_to_pixel(c)
    assert (ix == np.arange(8)[None, :]).all() and (iy == np.arange(4)[:, None]).all()


def _tan_profile(region):
    return classify_profile(TAN, [math.pi / 2, -math.pi / 2], region)


def test_prepoles_depth_zero_are_cos_roots():
    # depth 0 returns the declared poles inside the region, so all four are declared
    region = Region(-5, 5, -1, 1)
    declared = [s * k * math.pi / 2 for k in (1, 3) for s in (1, -1)]
    pts = find_prepoles(TAN, classify_profile(TAN, declared, region), 0, region)
    got = sorted(p.real for p, d in pts)
    # oracle: bisection on cos
    want = sorted(s * brentq(math.cos, a, a + 1) for a in (1.0, 4.0) for s in (1, -1))
    assert np.allclose(got, want, atol=1e-9)
    assert all(d == 0 for _, d in pts)


def test_prepoles_depth_one_contains_arctan():
    region = Region(-5, 5, -1, 1)
    pts = find_prepoles(TAN, _tan_profile(region), 1, region)
    want = brentq(lambda x: math.tan(x) - math.pi / 2, 0.5, 1.5)
    assert want == pytest.approx(1.003885, abs=1e-6)
    assert any(abs(p - want) < 1e-9 and d == 1 for p, d in pts)


def test_prepoles_need_poles():
    region = Region(-1, 1, -1, 1)
    profile = FunctionProfile([], ProfileCase.TWO_OR_MORE_POLES, region)
    with pytest.raises(ValueError):
        find_prepoles(parse("exp(z)"), profile, 1, region)


def test_raster_examples():
    g = GridSpec(0, 0.3, 0.3, 3, 3)
    r = marty_raster(TWO_TAN, g, 60, 1e6)
    assert r.flag[1, 1] == PixelFlag.JULIA
    # closed form: (f^n)'(0) = 2^n; Marty derivative at the fixed point is the same
    assert r.score[1, 1] >= math.log(1e6)
    r = marty_raster(parse("0.5*sin(z)"), GridSpec(0.1, 0.01, 0.01, 1, 1), 60, 1e6)
    assert r.flag[0, 0] == PixelFlag.FATOU
    # orbit oracle: 0.5 sin contracts to 0, so every iterate derivative stays <= 0.5^n
    z, d = 0.1, 1.0
    for _ in range(60):
        d *= 0.5 * math.cos(z)
        z = 0.5 * math.sin(z)
    assert abs(d) < 1e-10 and r.score[0, 0] < math.log(1.0)
    r = marty_raster(TAN, GridSpec(math.pi / 2, 1e-3, 1e-3, 1, 1), 60, 1e6, poles=[math.pi / 2])
    assert r.flag[0, 0] == PixelFlag.POLE_ORBIT


def test_raster_monotone_in_nmax():
    g = GridSpec(0.3 + 0.2j, 3, 3, 40, 40)
    a = marty_raster(TWO_TAN, g, 10, 1e6)
    b = marty_raster(TWO_TAN, g, 40, 1e6)
    assert not np.any(a.julia_mask() & ~b.julia_mask())
    assert np.all(b.score >= a.score - 1e-12)


def test_prepoles_promote_their_pixels():
    g = GridSpec(0, 4, 4, 64, 64)
    profile = classify_profile(TWO_TAN, [math.pi / 2, -math.pi / 2], g.region)
    pre = find_prepoles(TWO_TAN, profile, 2, g.region)
    r = marty_raster(TWO_TAN, g, 60, 1e6, poles=profile.declared_poles, prepoles=pre)
    ix, iy = g.point_to_pixel(np.array([p for p, _ in pre]))
    assert np.all(r.flag[iy, ix] != PixelFlag.FATOU)


def test_raster_is_worker_independent():
    g = GridSpec(0.1, 3, 3, 90, 90)
    a = marty_raster(TWO_TAN, g, 30, 1e6, workers=1)
    b = marty_raster(TWO_TAN, g, 30, 1e6, workers=4)
    assert a.score.tobytes() == b.score.tobytes() and a.flag.tobytes() == b.flag.tobytes()


def test_ppm_and_metadata(tmp_path):
    g = GridSpec(0, 4, 4, 16, 8)
    r = marty_raster(TWO_TAN, g, 20, 1e6)
    p = tmp_path / "r.ppm"
    write_ppm(p, r, "hello world")
    rgb, comments = read_ppm(p)
    assert rgb.shape == (8, 16, 3) and comments == ["hello world"]
    assert (rgb[r.flag == PixelFlag.JULIA] == 0).all()
    m = tmp_path / "r.meta"
    write_metadata(m, raster_metadata(r, {"a": 1}))
    assert '"exceptional_points"' in m.read_text()
