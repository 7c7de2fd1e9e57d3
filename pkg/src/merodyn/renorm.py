"""Rescaling engines: concentration walk, Zalcman sequences, renormalization
at an isolated essential singularity, limit-map sampling and the Lehto scan.

Rescaled maps are measured with the Marty derivative |g'|/(1+|g|^2), i.e.
with the Euclidean metric on the source, which is what makes
``r_n * base_derivative`` normalise the rescaled map at 0. The Lehto scan
uses the sphere-to-sphere derivative.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_chunks
from .dynamics import GridSpec
from .fnexpr import POLE_EPS, Expr, _eval, _identity_form, iterate_jets
from .sphere import chordal_distance

ESSENTIAL_SIGMA = 8.0
ESSENTIAL_SCALE = 16.0


class RenormError(Exception):
    pass


class NotNonNormal(RenormError):
    def __init__(self, n: int, best: float, floor: float):
        super().__init__(f"stage {n}: best Marty derivative {best:.4g} below growth floor {floor:.4g}")
        self.n = n


class SeedBelowLehtoFloor(RenormError):
    def __init__(self, n: int, best: float, floor: float):
        super().__init__(f"step {n}: best alpha*g# on the seed circle {best:.4g} below floor {floor:.4g}")
        self.n = n


class NotEssential(RenormError):
    pass


class AnnulusBoundViolated(RenormError):
    pass


class EvaluationEscapedCharts(RenormError):
    pass


class BranchKind(enum.Enum):
    ENTIRE_PLANE = "EntirePlane"
    PUNCTURED = "Punctured"
    UNDECIDED = "Undecided"


@dataclass(frozen=True)
class Branch:
    kind: BranchKind
    zeta: complex | None = None

    def __str__(self) -> str:
        if self.kind is BranchKind.PUNCTURED:
            return f"Punctured({self.zeta.real:.12g}{self.zeta.imag:+.12g}j)"
        return self.kind.value


@dataclass
class RescalingStep:
    n: int
    v_n: complex
    r_n: float
    base_derivative: float
    xi_n: complex
    iterate: int  # which iterate f^m is being rescaled
    alpha_n: float | None = None
    branch: Branch = field(default_factory=lambda: Branch(BranchKind.UNDECIDED))
    scale: float = 1.0  # r_n * scale * base_derivative == 1
    walk_moves: int = 0
    anchor: complex | None = None  # the singularity v, for essential steps

    @property
    def annulus_ratio(self) -> float | None:
        if self.alpha_n is None or self.anchor is None:
            return None
        return float(abs(self.v_n - self.anchor) / self.alpha_n)


# --------------------------------------------------------------------------
# concentration walk on a finite metric space


def _distance_fn(X, metric):
    if metric is None:
        Xc = np.asarray(X, dtype=complex)
        return lambda i: np.abs(Xc - Xc[i])
    if callable(metric):
        return lambda i: np.asarray(metric(X[i], X), dtype=float)
    D = np.asarray(metric, dtype=float)
    return lambda i: D[i]


def concentration_walk(X, metric, M, sigma: float, u: int) -> list[int]:
    """Indices v_0 = u, v_1, ... of the doubling walk.

    From the current point, any x with M(x) > 2 M(v) within distance
    1/(sigma M(v)) is a violator; the walk moves to the violator with largest
    M (lowest index on ties) and stops when none is left. Terminates on a
    finite set because M more than doubles at every move.

    ``metric`` is None (Euclidean on complex points), a callable
    ``metric(x, X) -> distances`` or a square distance matrix.
    """
    M = np.asarray(M, dtype=float)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not M[u] > 0:
        raise ValueError("M(u) must be positive")
    if not np.all(np.isfinite(M)):
        raise ValueError("M must be finite on X")
    dist = _distance_fn(X, metric)
    path = [int(u)]
    v = int(u)
    while True:
        radius = 1.0 / (sigma * M[v])
        viol = np.nonzero((dist(v) <= radius) & (M > 2.0 * M[v]))[0]
        if viol.size == 0:
            return path
        v = int(viol[np.argmax(M[viol])])
        path.append(v)


def concentration_point(X, metric, M, sigma: float, u: int) -> int:
    return concentration_walk(X, metric, M, sigma, u)[-1]


def check_concentration(X, metric, M, sigma: float, u: int, w: int) -> dict:
    """Verify the three conclusions at w by brute force.

    (i) is checked with the walk's geometric-series slack: d(u, w) <= 2/(sigma M(u)).
    """
    M = np.asarray(M, dtype=float)
    dist = _distance_fn(X, metric)
    d_uw = float(dist(u)[w])
    near = dist(w) <= 1.0 / (sigma * M[w])
    return {
        "i": d_uw <= 2.0 / (sigma * M[u]) * (1 + 1e-12),
        "ii": bool(M[w] >= M[u]),
        "iii": bool(np.all(M[near] <= 2.0 * M[w])),
    }


# --------------------------------------------------------------------------
# Marty derivatives of iterates


def iterate_marty(e: Expr, z, m: int) -> np.ndarray:
    """Marty derivative of f^m at each point; 0 where the iterate is undefined."""
    z = np.asarray(z, dtype=complex)
    ja, hit = iterate_jets(e, z, m)
    mu = ja.marty()
    bad = (hit >= 0) | ~np.isfinite(mu)
    return np.where(bad, 0.0, mu)


def iterate_marty_all(e: Expr, z, m_max: int) -> np.ndarray:
    """Marty derivatives of f^1 .. f^m_max at each point, shape (m_max, n)."""
    z = np.asarray(z, dtype=complex).ravel()
    out = np.zeros((m_max, z.size))

    w = z.copy()
    D = np.ones(z.size, complex)
    alive = np.ones(z.size, bool)
    for k in range(m_max):
        r, v, d = _eval(e, w)
        with np.errstate(all="ignore"):
            dt = d * D
            mu = np.abs(dt) / (1.0 + np.abs(v) ** 2)
        good = alive & np.isfinite(mu)
        out[k] = np.where(good, mu, 0.0)
        alive &= ~(r & (np.abs(v) < POLE_EPS)) & np.isfinite(v) & np.isfinite(dt)
        f, df = _identity_form(r, v, dt)
        w = np.where(alive, f, 0.0)
        D = np.where(alive, df, 0.0)
    return out


def disc_lattice(center: complex, radius: float, n: int) -> np.ndarray:
    """Square n x n lattice clipped to the closed disc; the centre comes first."""
    t = np.linspace(-radius, radius, n)
    pts = (t[None, :] + 1j * t[:, None]).ravel()
    pts = pts[np.abs(pts) <= radius * (1 + 1e-12)] + complex(center)
    return np.concatenate([[complex(center)], pts])


def concentrate(mfunc, u: complex, sigma: float, domain, lattice_n: int = 101, max_rounds: int = 60, workers: int = 1):
    """Concentration walk for a function on a planar domain.

    Each round samples D(c, 2/(sigma M(c))) on a lattice centred at the current
    point c (the set the walk can reach), restricted to ``domain``, and walks.
    Rounds repeat from the new point until the walk no longer moves, so the
    final check of (iii) runs at the finest local resolution.

    Returns (w, M(w), moves).
    """
    c = complex(u)
    Mc = float(mfunc(np.array([c]))[0])
    if not Mc > 0:
        raise RenormError("M vanishes at the starting point")
    moves = 0
    for _ in range(max_rounds):
        pts = disc_lattice(c, 2.0 / (sigma * Mc), lattice_n)
        pts = pts[domain(pts)]
        if pts.size == 0 or pts[0] != c:
            pts = np.concatenate([[c], pts])
        M = map_chunks(mfunc, pts, workers)
        M = np.where(np.isfinite(M), M, 0.0)
        M[0] = Mc
        path = concentration_walk(pts, None, M, sigma, 0)
        if len(path) == 1:
            return c, Mc, moves
        moves += len(path) - 1
        c = complex(pts[path[-1]])
        Mc = float(M[path[-1]])
    return c, Mc, moves


# --------------------------------------------------------------------------
# Zalcman rescaling of the iterate family


@dataclass
class ZalcmanConfig:
    m_max: int = 40
    lattice_n: int = 101
    growth_floor: float = 10.0
    growth_factor: float = 2.0
    domain_radius: float = 1.0
    refinements: int = 2
    disc_radius: float = 1.0


def zalcman_sequence(
    e: Expr,
    v: complex,
    N: int,
    config: ZalcmanConfig | None = None,
    workers: int = 1,
    partial: bool = False,
) -> list[RescalingStep]:
    """Zalcman rescaling data of {f^m} at v for stages n = 1..N.

    Stage n searches D(v, disc_radius/n) for the smallest iterate m whose Marty
    derivative exceeds the growth floor (doubling the lattice resolution up
    to ``refinements`` times when it does not), takes the maximiser as seed xi_n,
    runs the concentration walk with sigma = 1/n inside D(v, domain_radius),
    and sets r_n = 1/M(v_n). With ``partial`` a stage that cannot reach its
    floor ends the sequence instead of raising (stage 1 still raises).
    """
    cfg = config or ZalcmanConfig()
    v = complex(v)
    steps: list[RescalingStep] = []
    prev = None
    for n in range(1, N + 1):
        floor = cfg.growth_floor if prev is None else max(cfg.growth_floor, cfg.growth_factor * prev)
        for j in range(cfg.refinements + 1):
            pts = disc_lattice(v, cfg.disc_radius / n, cfg.lattice_n * 2**j)
            allm = map_chunks(lambda z: iterate_marty_all(e, z, cfg.m_max).T, pts, workers).T
            allm = np.nan_to_num(allm, nan=0.0)
            best_per_m = allm.max(axis=1)
            ok = np.nonzero(best_per_m >= floor)[0]
            if ok.size:
                break
        if ok.size == 0:
            if partial and steps:
                break
            raise NotNonNormal(n, float(best_per_m.max()), floor)
        m = int(ok[0]) + 1
        xi = complex(pts[int(np.argmax(allm[m - 1]))])

        def mfunc(z, m=m):
            return iterate_marty(e, z, m)

        def domain(z):
            return np.abs(z - v) <= cfg.domain_radius

        vn, Mv, moves = concentrate(mfunc, xi, 1.0 / n, domain, cfg.lattice_n, workers=workers)
        steps.append(
            RescalingStep(n, vn, 1.0 / Mv, Mv, xi, m, branch=Branch(BranchKind.ENTIRE_PLANE), walk_moves=moves)
        )
        prev = Mv
    return steps


# --------------------------------------------------------------------------
# renormalization at an isolated essential singularity


@dataclass
class EssentialConfig:
    circle_samples: int = 720
    refinements: int = 2
    seed_floor: float = 1.0
    neighborhood_radius: float = 0.5
    lattice_n: int = 101
    divergence_threshold: float = 1e4
    cluster_tolerance: float = 0.1
    sigma: float = ESSENTIAL_SIGMA
    scale: float = ESSENTIAL_SCALE


def default_alphas(start: int = 3, stop: int = 10) -> list[float]:
    return [2.0**-n for n in range(start, stop + 1)]


def decide_branch(v: complex, steps: list[RescalingStep], cfg: EssentialConfig) -> Branch:
    if len(steps) < 3:
        return Branch(BranchKind.UNDECIDED)
    q = np.array([(v - s.v_n) / s.r_n for s in steps[-3:]])
    if np.all(np.abs(q) > cfg.divergence_threshold):
        return Branch(BranchKind.ENTIRE_PLANE)
    centre = q.mean()
    spread = np.max(np.abs(q - centre)) / max(abs(centre), 1e-300)
    if spread <= cfg.cluster_tolerance:
        return Branch(BranchKind.PUNCTURED, complex(centre))
    return Branch(BranchKind.UNDECIDED)


def essential_renorm(
    e: Expr,
    iterate: int,
    v: complex,
    alphas,
    config: EssentialConfig | None = None,
    workers: int = 1,
    first_index: int = 1,
) -> tuple[list[RescalingStep], Branch]:
    """Renormalize g = f^iterate around the isolated essential singularity v.

    For each alpha: the seed xi maximises alpha*g#(xi) on |xi - v| = alpha and
    must reach the seed floor; the concentration walk with sigma = 8 runs in
    {|x - v| <= W} minus D(v, alpha/4); r = 1/(16 g#(v_n)). The annulus
    bound 7/8 <= |v_n - v|/alpha <= 9/8 is verified for every step.
    """
    cfg = config or EssentialConfig()
    v = complex(v)

    def mfunc(z):
        return iterate_marty(e, z, iterate)

    steps: list[RescalingStep] = []
    failures: list[SeedBelowLehtoFloor] = []
    for n, alpha in enumerate(alphas, start=first_index):
        alpha = float(alpha)
        best, xi = -1.0, None
        for j in range(cfg.refinements + 1):
            k = cfg.circle_samples * 2**j
            theta = 2 * np.pi * np.arange(k) / k
            circ = v + alpha * np.exp(1j * theta)
            vals = alpha * map_chunks(mfunc, circ, workers)
            i = int(np.argmax(vals))
            if vals[i] > best:
                best, xi = float(vals[i]), complex(circ[i])
            if best >= cfg.seed_floor:
                break
        if best < cfg.seed_floor:
            failures.append(SeedBelowLehtoFloor(n, best, cfg.seed_floor))
            continue

        def domain(z, alpha=alpha):
            d = np.abs(z - v)
            return (d <= cfg.neighborhood_radius) & (d >= alpha / 4)

        vn, Mv, moves = concentrate(mfunc, xi, cfg.sigma, domain, cfg.lattice_n, workers=workers)
        ratio = abs(vn - v) / alpha
        if not (7 / 8 - 1e-12 <= ratio <= 9 / 8 + 1e-12):
            raise AnnulusBoundViolated(f"alpha={alpha}: |v_n - v|/alpha = {ratio:.6f}")
        step = RescalingStep(
            n, vn, 1.0 / (cfg.scale * Mv), Mv, xi, iterate, alpha_n=alpha, scale=cfg.scale, walk_moves=moves, anchor=v
        )
        steps.append(step)
    if not steps:
        raise NotEssential(f"seed floor {cfg.seed_floor} never reached around {v}; not an essential singularity")
    if failures:
        raise failures[0]
    branch = decide_branch(v, steps, cfg)
    for s in steps:
        s.branch = branch
    return steps, branch


# --------------------------------------------------------------------------
# limit map samples


@dataclass
class LimitMapSamples:
    compact: GridSpec
    values: list  # per step, (ny, nx) complex sphere points (inf allowed, nan masked)
    deltas: list
    excluded: tuple | None = None
    masked: int = 0


def rescaled_points(step: RescalingStep, z) -> np.ndarray:
    return step.v_n + step.r_n * np.asarray(z, dtype=complex)


def rescaled_jets(e: Expr, step: RescalingStep, z):
    """Jets of h(z) = f^m(v_n + r_n z) with respect to z."""
    ja, hit = iterate_jets(e, rescaled_points(step, z), step.iterate)
    ja.deriv = ja.deriv * step.r_n
    ja.base = np.asarray(z, dtype=complex)
    return ja, hit


def rescaled_marty(e: Expr, step: RescalingStep, z) -> np.ndarray:
    ja, hit = rescaled_jets(e, step, z)
    mu = ja.marty()
    return np.where(hit >= 0, np.nan, mu)


def limit_map_samples(steps, e: Expr, K: GridSpec, exclusion: tuple | None = None) -> LimitMapSamples:
    """Evaluate h_n on the grid K for every step; deltas are sup chordal gaps."""
    zs = K.centers()
    if exclusion is not None:
        zeta, rad = exclusion
        if np.any(np.abs(zs - complex(zeta)) <= rad):
            raise ValueError("sample grid meets the exclusion disc")
    values = []
    masked = 0
    for s in steps:
        ja, hit = iterate_jets(e, rescaled_points(s, zs.ravel()), s.iterate)
        with np.errstate(all="ignore"):
            pts = np.where(ja.rec, np.where(ja.value == 0, np.inf, 1.0 / ja.value), ja.value)
        bad = (hit >= 0) | ~ja.finite()
        masked += int(bad.sum())
        pts = np.where(bad, np.nan, pts)
        pts = np.where(~bad & ~np.isfinite(pts), complex(np.inf, 0), pts)
        values.append(pts.reshape(zs.shape))
    deltas = []
    for a, b in zip(values[:-1], values[1:]):
        ok = ~np.isnan(a) & ~np.isnan(b)
        d = chordal_distance(a[ok], b[ok]) if ok.any() else np.array([np.nan])
        deltas.append(float(np.max(d)))
    return LimitMapSamples(K, values, deltas, exclusion, masked)


# --------------------------------------------------------------------------
# Lehto scan


@dataclass
class LehtoRow:
    radius: float
    circle_max: float
    argmax: complex
    running_sup: float


def lehto_scan(e: Expr, v: complex, radii, samples_per_circle: int = 720, iterate: int = 1) -> list[LehtoRow]:
    """Per radius, the max of |z - v| * g#(z) over the sampled circle."""
    radii = [float(r) for r in radii]
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    v = complex(v)
    theta = 2 * np.pi * np.arange(samples_per_circle) / samples_per_circle
    rows = []
    sup = -math.inf
    for r in radii:
        z = v + r * np.exp(1j * theta)
        ja, hit = iterate_jets(e, z, iterate)
        vals = np.abs(z - v) * ja.spherical()
        vals = np.where((hit >= 0) | np.isnan(vals), -np.inf, vals)
        i = int(np.argmax(vals))
        sup = max(sup, float(vals[i]))
        rows.append(LehtoRow(r, float(vals[i]), complex(z[i]), sup))
    return rows


def alpha_windows(start: int = 3, stop: int = 10, width: float = 0.1, count: int = 64) -> list[np.ndarray]:
    """Candidate radii 2^-n (1 + t), |t| <= width, one window per n."""
    t = np.linspace(-width, width, count)
    return [2.0**-n * (1.0 + t) for n in range(start, stop + 1)]


def diagonal_extract(groups, e: Expr, K: GridSpec) -> tuple[list[RescalingStep], list[float]]:
    """Pick one step per group so that the rescaled maps stay close on K.

    Every candidate of the last group is tried as anchor; each earlier group
    contributes its candidate nearest (sup chordal distance on K) to the
    anchor. The anchor with the smallest worst-case gap wins. Returns the
    chosen steps and their gaps to the anchor.
    """
    samples = [limit_map_samples(g, e, K).values for g in groups]

    def gap(a, b):
        ok = ~np.isnan(a) & ~np.isnan(b)
        return float(np.max(chordal_distance(a[ok], b[ok]))) if ok.any() else np.inf

    best = None
    for j, ref in enumerate(samples[-1]):
        picks, gaps = [], []
        for vals in samples[:-1]:
            d = [gap(v, ref) for v in vals]
            k = int(np.argmin(d))
            picks.append(k)
            gaps.append(d[k])
        worst = max(gaps, default=0.0)
        if best is None or worst < best[0]:
            best = (worst, picks + [j], gaps + [0.0])
    _, picks, gaps = best
    return [g[k] for g, k in zip(groups, picks)], gaps
