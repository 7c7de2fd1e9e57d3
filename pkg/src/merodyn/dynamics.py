"""Orbits, backward orbit of infinity, and Marty-criterion Julia rasters."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from . import __version__
from ._parallel import map_chunks
from .fnexpr import (
    POLE_EPS,
    Expr,
    FunctionProfile,
    Region,
    _eval,
    _identity_form,
    dedup_points,
    iterate_jets,
    newton,
)
from .sphere import INF, as_sphere_point

DEFAULT_NMAX = 60
DEFAULT_GROWTH_THRESHOLD = 1e6


class NoSeedsConverged(Exception):
    pass


class PixelFlag(enum.IntEnum):
    FATOU = 0
    JULIA = 1
    POLE_ORBIT = 2


@dataclass(frozen=True)
class GridSpec:
    center: complex
    width: float
    height: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one pixel per axis")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("grid width and height must be positive")

    @property
    def dx(self) -> float:
        return self.width / self.nx

    @property
    def dy(self) -> float:
        return self.height / self.ny

    @property
    def region(self) -> Region:
        c = complex(self.center)
        return Region(c.real - self.width / 2, c.real + self.width / 2, c.imag - self.height / 2, c.imag + self.height / 2)

    def pixel_to_point(self, ix, iy):
        """Pixel centre; row 0 is the top edge."""
        c = complex(self.center)
        x = c.real - self.width / 2 + (np.asarray(ix) + 0.5) * self.dx
        y = c.imag + self.height / 2 - (np.asarray(iy) + 0.5) * self.dy
        return x + 1j * y

    def point_to_pixel(self, z):
        c = complex(self.center)
        z = np.asarray(z, dtype=complex)
        ix = np.floor((z.real - (c.real - self.width / 2)) / self.dx).astype(int)
        iy = np.floor(((c.imag + self.height / 2) - z.imag) / self.dy).astype(int)
        return ix, iy

    def centers(self) -> np.ndarray:
        """All pixel centres, row-major, shape (ny, nx)."""
        iy, ix = np.mgrid[0 : self.ny, 0 : self.nx]
        return self.pixel_to_point(ix, iy)

    def as_dict(self) -> dict:
        c = complex(self.center)
        return {"center": [c.real, c.imag], "width": self.width, "height": self.height, "nx": self.nx, "ny": self.ny}


@dataclass
class JuliaRaster:
    grid: GridSpec
    score: np.ndarray  # (ny, nx) log of the largest Marty derivative seen
    flag: np.ndarray  # (ny, nx) PixelFlag values
    n_used: np.ndarray  # (ny, nx) iterates computed
    nmax: int
    growth_threshold: float
    promoted: int = 0

    def julia_mask(self) -> np.ndarray:
        """Pixels counted as Julia for coverage (PoleOrbit included)."""
        return self.flag != PixelFlag.FATOU

    def counts(self) -> dict:
        return {
            "julia": int(np.sum(self.flag == PixelFlag.JULIA)),
            "pole_orbit": int(np.sum(self.flag == PixelFlag.POLE_ORBIT)),
            "fatou": int(np.sum(self.flag == PixelFlag.FATOU)),
            "promoted": int(self.promoted),
        }


def orbit(e: Expr, z0: complex, nmax: int) -> list:
    """Forward orbit as sphere points, truncated right after the first infinity."""
    pts = [as_sphere_point(z0)]
    z = complex(z0)
    for _ in range(nmax):
        r, v, _d = _eval(e, np.array([z]))
        if r[0] and abs(v[0]) < POLE_EPS:
            pts.append(INF)
            break
        f, _ = _identity_form(r, v, _d)
        z = complex(f[0])
        pts.append(as_sphere_point(z))
        if pts[-1] == INF:
            break
    return pts


def find_prepoles(
    e: Expr,
    profile: FunctionProfile,
    depth: int,
    region: Region,
    seed_density: int = 41,
    max_steps: int = 50,
    tol: float = 1e-10,
    dedup_radius: float = 1e-7,
    workers: int = 1,
) -> list[tuple[complex, int]]:
    """Points q in ``region`` with f^k(q) a declared pole, for k <= depth.

    Each point is reported once with the smallest k that reaches a pole.
    """
    poles = list(getattr(profile, "declared_poles", None) or [])
    if not poles:
        raise ValueError("find_prepoles needs a profile with witnessed poles")
    seeds = region.lattice(seed_density)
    found: list[tuple[complex, int]] = []
    for k in range(depth + 1):
        cands = []
        for p in poles:
            if k == 0:
                if region.contains(p):
                    cands.append(np.array([complex(p)]))
                continue

            def func(z, k=k, p=p):
                ja, _ = iterate_jets(e, z, k)
                f, df = ja.identity()
                return f - p, df

            def run(chunk):
                roots, _res, ok = newton(func, chunk, max_steps=max_steps, tol=tol)
                return roots, ok

            roots, ok = map_chunks(run, seeds, workers)
            ok &= region.contains(roots)
            cands.append(roots[ok])
        pts = dedup_points(np.concatenate(cands) if cands else np.array([], complex), dedup_radius)
        for q in pts:
            if all(abs(q - prev) > dedup_radius for prev, _ in found):
                found.append((complex(q), k))
    if not found:
        raise NoSeedsConverged(f"no pre-pole of depth <= {depth} found in {region}")
    found.sort(key=lambda t: (t[1], t[0].real, t[0].imag))
    return found


def _raster_chunk(e: Expr, z0: np.ndarray, nmax: int, threshold: float, poles, pole_radius: float):
    n = z0.size
    w = z0.astype(complex).copy()
    D = np.ones(n, complex)
    best = np.zeros(n)
    flag = np.zeros(n, dtype=np.int8)
    used = np.zeros(n, dtype=np.int32)
    active = np.ones(n, bool)
    for k in range(1, nmax + 1):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        r, v, d = _eval(e, w[idx])
        with np.errstate(all="ignore"):
            dt = d * D[idx]
            mu = np.abs(dt) / (1.0 + np.abs(v) ** 2)
        mu = np.where(np.isnan(mu), 0.0, mu)
        best[idx] = np.maximum(best[idx], mu)
        used[idx] = k
        julia = mu >= threshold
        at_inf = r & (np.abs(v) < POLE_EPS)
        broken = ~np.isfinite(v) | ~np.isfinite(dt)
        if poles is None:
            pole_hit = at_inf
        else:
            near = np.zeros(idx.size, bool)
            for p in poles:
                near |= np.abs(w[idx] - p) < pole_radius
            pole_hit = at_inf & near
        flag[idx[julia]] = PixelFlag.JULIA
        flag[idx[pole_hit & ~julia]] = PixelFlag.POLE_ORBIT
        stop = julia | at_inf | broken
        active[idx[stop]] = False
        f, df = _identity_form(r, v, dt)
        keep = ~stop
        w[idx[keep]] = f[keep]
        D[idx[keep]] = df[keep]
    with np.errstate(divide="ignore"):
        score = np.log(np.maximum(best, 1e-300))
    return score, flag, used


def marty_raster(
    e: Expr,
    grid: GridSpec,
    nmax: int = DEFAULT_NMAX,
    growth_threshold: float = DEFAULT_GROWTH_THRESHOLD,
    poles=None,
    prepoles=None,
    pole_radius: float = 1e-6,
    workers: int = 1,
) -> JuliaRaster:
    """Flag each pixel centre by growth of the iterates' Marty derivatives.

    A pixel is Julia once some iterate's Marty derivative reaches
    ``growth_threshold``; PoleOrbit when the orbit lands on a pole; Fatou
    otherwise. When ``poles`` is given, an orbit reaching infinity counts as a
    pole hit only if the previous point is within ``pole_radius`` of a declared
    pole; otherwise it is treated as numerical escape and iteration stops.
    Cells containing any point of ``prepoles`` are promoted to PoleOrbit,
    since pre-poles belong to the Julia set.
    """
    if nmax < 1:
        raise ValueError("nmax must be at least 1")
    centers = grid.centers().ravel()
    pole_list = None if poles is None else [complex(p) for p in poles]

    def run(chunk):
        return _raster_chunk(e, chunk, nmax, growth_threshold, pole_list, pole_radius)

    score, flag, used = map_chunks(run, centers, workers)
    shape = (grid.ny, grid.nx)
    score, flag, used = score.reshape(shape), flag.reshape(shape), used.reshape(shape)
    promoted = 0
    if prepoles:
        pts = np.array([complex(q[0] if isinstance(q, tuple) else q) for q in prepoles])
        ix, iy = grid.point_to_pixel(pts)
        inside = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
        for x, y in zip(ix[inside], iy[inside]):
            if flag[y, x] == PixelFlag.FATOU:
                flag[y, x] = PixelFlag.POLE_ORBIT
                promoted += 1
    return JuliaRaster(grid, score, flag, used, nmax, growth_threshold, promoted)


# --------------------------------------------------------------------------
# export

PALETTE_JULIA = (0, 0, 0)
PALETTE_POLE = (255, 0, 0)


def raster_rgb(raster: JuliaRaster) -> np.ndarray:
    lt = math.log(raster.growth_threshold)
    frac = np.clip(np.nan_to_num(raster.score, neginf=0.0) / lt, 0.0, 1.0)
    grey = np.round(255.0 * (1.0 - frac)).astype(np.uint8)
    rgb = np.stack([grey, grey, grey], axis=-1)
    rgb[raster.flag == PixelFlag.JULIA] = PALETTE_JULIA
    rgb[raster.flag == PixelFlag.POLE_ORBIT] = PALETTE_POLE
    return rgb


def write_ppm(path, raster: JuliaRaster, comment: str = "") -> None:
    """Binary P6 pixmap; ``comment`` (single line) goes into the header."""
    rgb = raster_rgb(raster)
    header = "P6\n"
    if comment:
        header += "# " + comment.replace("\n", " ") + "\n"
    header += f"{raster.grid.nx} {raster.grid.ny}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    """Read back a P6 file written by :func:`write_ppm` as (rgb, comments)."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    fields: list[str] = []
    comments: list[str] = []
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            fields.extend(line.split())
    if fields[0] != "P6":
        raise ValueError("not a P6 pixmap")
    w, h = int(fields[1]), int(fields[2])
    rgb = np.frombuffer(data[pos : pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return rgb, comments


def raster_metadata(raster: JuliaRaster, config: dict | None = None) -> dict:
    return {
        "version": __version__,
        "grid": raster.grid.as_dict(),
        "nmax": raster.nmax,
        "growth_threshold": raster.growth_threshold,
        "counts": raster.counts(),
        "exceptional_points": "not identified; no pixels excluded",
        "precision": "float64 throughout",
        "config": config or {},
    }


def write_metadata(path, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
