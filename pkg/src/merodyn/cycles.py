"""Periodic points: Newton search, multipliers, renormalization-guided seeding
and Julia-set density reports."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._parallel import map_chunks
from .dynamics import GridSpec, JuliaRaster, NoSeedsConverged, find_prepoles, marty_raster
from .fnexpr import (
    POLE_WITNESS,
    Expr,
    FunctionProfile,
    ProfileCase,
    Region,
    _eval,
    _identity_form,
    classify_profile,
    dedup_points,
    eval_jets,
    iterate_jets,
    newton,
)
from .renorm import (
    RenormError,
    RescalingStep,
    ZalcmanConfig,
    alpha_windows,
    diagonal_extract,
    disc_lattice,
    essential_renorm,
    zalcman_sequence,
)
from .sphere import chordal_distance


class CycleClass(enum.Enum):
    REPELLING = "Repelling"
    ATTRACTING = "Attracting"
    INDIFFERENT = "Indifferent"


class CycleSearchError(Exception):
    pass


class NotAPrePole(CycleSearchError):
    pass


class IsolationFailed(CycleSearchError):
    pass


class ExcludedAnchor(CycleSearchError):
    pass


class NoCyclesFound(CycleSearchError):
    pass


@dataclass(frozen=True)
class Tolerances:
    residual: float = 1e-8
    dedup_radius: float = 1e-7
    band: float = 1e-6
    max_steps: int = 80
    escape: float = 1e6
    xtol: float = 1e-13  # relative Newton step size that also counts as converged


@dataclass
class Cycle:
    points: list  # orbit, starting at the lexicographically smallest point
    period: int
    multiplier: complex
    cls: CycleClass
    residual: float

    @property
    def representative(self) -> complex:
        return self.points[0]

    @property
    def is_repelling(self) -> bool:
        return self.cls is CycleClass.REPELLING


def residual_bound(multiplier: complex, tol: Tolerances) -> float:
    """Accepted |f^p(z) - z|: the absolute tolerance scaled by the root's conditioning.

    Dividing the residual by |multiplier - 1| estimates the distance to the
    true periodic point, so strongly repelling cycles are held to the same
    positional accuracy as mild ones.
    """
    return tol.residual * max(1.0, abs(multiplier - 1.0))


def classify(multiplier: complex, band: float = 1e-6) -> CycleClass:
    if band < 0:
        raise ValueError("band must be non-negative")
    a = abs(multiplier)
    if a > 1 + band:
        return CycleClass.REPELLING
    if a < 1 - band:
        return CycleClass.ATTRACTING
    return CycleClass.INDIFFERENT


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _orbit_table(e: Expr, z: np.ndarray, n: int) -> np.ndarray:
    """Rows f^0(z) .. f^n(z); nan once an orbit reaches infinity."""
    W = np.empty((n + 1, z.size), complex)
    W[0] = z
    w = z
    for k in range(1, n + 1):
        r, v, d = _eval(e, w)
        f, _ = _identity_form(r, v, d)
        bad = (r & (np.abs(v) < 1e-10)) | ~np.isfinite(f)
        w = np.where(bad, np.nan, f)
        W[k] = w
    return W


def _fixed_point_func(e: Expr, n: int):
    def func(z):
        ja, hit = iterate_jets(e, z, n)
        f, df = ja.identity()
        f = np.where(hit >= 0, np.nan, f)
        return f - z, df - 1.0

    return func


def _polish(e: Expr, z: np.ndarray, d: int, tol: Tolerances) -> np.ndarray:
    """A few Newton steps on f^d(w) - w; keeps the input where they do not help."""
    func = _fixed_point_func(e, d)
    F0, _ = func(z)
    zz, res, _ok = newton(func, z, max_steps=4, tol=0.0, escape=tol.escape)
    better = np.isfinite(res) & (res < np.abs(F0)) & (np.abs(zz - z) < tol.dedup_radius)
    return np.where(better, zz, z)


def cycles_from_roots(e: Expr, n: int, roots: np.ndarray, tol: Tolerances) -> list[Cycle]:
    """Turn roots of f^n(z) = z into deduplicated cycles of primitive period."""
    roots = dedup_points(roots, tol.dedup_radius)
    if roots.size == 0:
        return []
    W = _orbit_table(e, roots, n)
    finite = np.all(np.isfinite(W), axis=0)
    roots, W = roots[finite], W[:, finite]
    period = np.full(roots.size, n)
    for d in reversed(_divisors(n)[:-1]):
        close = np.abs(W[d] - W[0]) <= tol.dedup_radius
        period = np.where(close, d, period)
    cycles: list[Cycle] = []
    for d in sorted(set(period.tolist())):
        sel = period == d
        orb = W[:d, sel]  # (d, k)
        flat = _polish(e, orb.ravel(), d, tol).reshape(orb.shape)
        ja, hit = iterate_jets(e, flat.ravel(), d)
        f, df = ja.identity()
        res = np.abs(f - flat.ravel()).reshape(orb.shape)
        mult = df.reshape(orb.shape)
        for j in range(flat.shape[1]):
            pts = flat[:, j]
            k0 = min(range(d), key=lambda k: (pts[k].real, pts[k].imag))
            pts = np.roll(pts, -k0)
            r = float(res[k0, j])
            m = complex(mult[k0, j])
            if not np.isfinite(m) or not (r <= residual_bound(m, tol)):
                continue
            cycles.append(Cycle([complex(p) for p in pts], d, m, classify(m, tol.band), r))
    return dedup_cycles(cycles, tol.dedup_radius)


def dedup_cycles(cycles: list[Cycle], radius: float) -> list[Cycle]:
    cycles = sorted(cycles, key=lambda c: (c.period, c.representative.real, c.representative.imag))
    kept: list[Cycle] = []
    by_period: dict[int, list[Cycle]] = {}
    for c in cycles:
        same = by_period.setdefault(c.period, [])
        if any(min(abs(p - c.representative) for p in k.points) <= radius for k in same):
            continue
        same.append(c)
        kept.append(c)
    return kept


def find_cycles_from_seeds(e: Expr, n: int, seeds, tol: Tolerances | None = None, region: Region | None = None, workers: int = 1):
    """Cycles whose period divides n, from Newton runs on f^n(z) - z."""
    if n < 1:
        raise ValueError("period must be at least 1")
    tol = tol or Tolerances()
    func = _fixed_point_func(e, n)

    def run(chunk):
        roots, res, ok = newton(func, chunk, max_steps=tol.max_steps, tol=tol.residual, escape=tol.escape, xtol=tol.xtol)
        return roots, ok

    roots, ok = map_chunks(run, np.asarray(seeds, complex).ravel(), workers)
    if region is not None:
        ok &= region.contains(roots)
    return cycles_from_roots(e, n, roots[ok], tol)


def find_cycles(e: Expr, n: int, region: Region, seed_density: int = 41, tol: Tolerances | None = None, workers: int = 1):
    """Cycles with a root of f^n(z) = z inside ``region``, from a seed lattice."""
    return find_cycles_from_seeds(e, n, region.lattice(seed_density), tol, region, workers)


def merge_cycles(groups, radius: float = 1e-7) -> list[Cycle]:
    allc = [c for g in groups for c in g]
    return dedup_cycles(allc, radius)


# --------------------------------------------------------------------------
# preconditions of the guided search


def is_prepole(e: Expr, p: complex, lam: int, tol: float = POLE_WITNESS) -> bool:
    """True when f^(lam-1)(p) is finite and f sends it to infinity."""
    if lam < 1:
        return False
    ja, hit = iterate_jets(e, np.array([complex(p)]), lam)
    return bool(hit[0] < 0 and ja.rec[0] and abs(ja.value[0]) < tol)


def critical_points(e: Expr, region: Region, seed_density: int = 21, h: float = 1e-6) -> np.ndarray:
    """Zeros of f' in ``region`` (Newton with a central-difference f'')."""

    def fprime(z):
        f, df = eval_jets(e, z).identity()
        return df

    def func(z):
        d0 = fprime(z)
        d2 = (fprime(z + h) - fprime(z - h)) / (2 * h)
        return d0, d2

    roots, res, ok = newton(func, region.lattice(seed_density), max_steps=50, tol=1e-10)
    ok &= region.contains(roots)
    return dedup_points(roots[ok], 1e-7)


def check_isolation(e: Expr, profile: FunctionProfile, p: complex, lam: int, radius: float, seed_density: int = 41):
    """No other pre-pole of depth < lam (poles are depth 1) within ``radius`` of p."""
    p = complex(p)
    if lam <= 1:
        others = [q for q in profile.declared_poles if 0 < abs(q - p) <= radius]
        if others:
            raise IsolationFailed(f"pole {others[0]} within {radius} of {p}")
        return
    try:
        found = find_prepoles(e, profile, lam - 1, Region.around(p, radius), seed_density)
    except NoSeedsConverged:
        return
    for q, k in found:
        if 1e-7 < abs(q - p) <= radius:
            raise IsolationFailed(f"pre-pole {q} (depth {k + 1}) within {radius} of {p}")


@dataclass
class GuidedResult:
    cycles: list  # (Cycle, step index n)
    per_step: dict = field(default_factory=dict)  # n -> tracked cycle
    budget_binding: bool = False
    candidates: dict = field(default_factory=dict)  # n -> every cycle found at step n


def renorm_guided_search(
    e: Expr,
    profile: FunctionProfile,
    p: complex,
    lam: int,
    steps: list[RescalingStep],
    period_budget: int,
    tol: Tolerances | None = None,
    seed_n: int = 9,
    seed_radius: float = 1.0,
    exclusion: list | None = None,
    exclusion_radius: float = 1e-3,
    check: bool = True,
    workers: int = 1,
) -> GuidedResult:
    """Periodic points near the pre-pole p seeded from rescaling data.

    ``lam`` counts iterates to infinity: f^lam(p) = inf, so poles have lam = 1.
    For every step, Newton on f^m(z) - z with m = lam+1 .. lam+period_budget
    starts from v_n + r_n * (lattice of radius ``seed_radius``). Cycles with an
    orbit point within twice the largest alpha of p are kept with their step.
    """
    tol = tol or Tolerances()
    p = complex(p)
    if period_budget <= 0 or not steps:
        return GuidedResult([])
    alphas = [s.alpha_n for s in steps if s.alpha_n is not None]
    reach = 2 * max(alphas) if alphas else 2 * max(abs(s.v_n - p) + s.r_n * seed_radius for s in steps)
    if check:
        if not is_prepole(e, p, lam):
            raise NotAPrePole(f"f^{lam}({p}) is not infinite")
        check_isolation(e, profile, p, lam, reach)
        excl = [complex(c) for c in (exclusion or [])]
        excl += list(critical_points(e, Region.around(p, reach)))
        for c in excl:
            if abs(c - p) <= exclusion_radius:
                raise ExcludedAnchor(f"{p} is within {exclusion_radius} of excluded point {c}")
    base = disc_lattice(0, seed_radius, seed_n)
    out: list = []
    seen: list[Cycle] = []
    per_step: dict = {}
    for s in steps:
        seeds = s.v_n + s.r_n * base
        found: list[Cycle] = []
        for m in range(lam + 1, lam + period_budget + 1):
            found += find_cycles_from_seeds(e, m, seeds, tol, workers=workers)
        found = [c for c in dedup_cycles(found, tol.dedup_radius) if min(abs(q - p) for q in c.points) <= reach]
        per_step[s.n] = found
        for c in found:
            if not any(c.period == k.period and min(abs(q - c.representative) for q in k.points) <= tol.dedup_radius for k in seen):
                seen.append(c)
                out.append((c, s.n))
    return GuidedResult(out, track_limit_cycle(steps, per_step), budget_binding=not out, candidates=per_step)


def rescaled_coordinate(c: Cycle, step: RescalingStep) -> complex:
    """(z - v_n)/r_n for the orbit point z of ``c`` closest to v_n."""
    z = min(c.points, key=lambda q: abs(q - step.v_n))
    return (z - step.v_n) / step.r_n


def track_limit_cycle(steps, candidates: dict, radius: float = 0.25) -> dict:
    """Follow one cycle of the limit map through the steps.

    Cycles of converging rescaled maps converge to cycles of the limit, so the
    same cycle shows up at every step with the same period and nearly the
    same rescaled coordinate. Each cycle of the last step that has one is
    tried as anchor; the anchor matched (same period, rescaled coordinate
    within ``radius``) at the most steps wins, ties going to the smaller
    rescaled coordinate. Returns {n: Cycle} for the matched steps.
    """
    steps = [s for s in steps if candidates.get(s.n)]
    if not steps:
        return {}
    coords = {s.n: [(c, rescaled_coordinate(c, s)) for c in candidates[s.n]] for s in steps}
    best_key, best = None, {}
    for anchor, za in coords[steps[-1].n]:
        chosen = {}
        for s in steps:
            near = [(abs(z - za), c) for c, z in coords[s.n] if c.period == anchor.period and abs(z - za) <= radius]
            if near:
                chosen[s.n] = min(near, key=lambda t: t[0])[1]
        key = (-len(chosen), abs(za), anchor.period)
        if best_key is None or key < best_key:
            best_key, best = key, chosen
    return best


# --------------------------------------------------------------------------
# density report

HIST_BINS = (0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)


def _to_sphere3(z: np.ndarray) -> np.ndarray:
    """Inverse stereographic projection onto the unit sphere (diameter 2)."""
    z = np.asarray(z, complex)
    a2 = np.abs(z) ** 2
    return np.stack([2 * z.real / (1 + a2), 2 * z.imag / (1 + a2), (a2 - 1) / (1 + a2)], axis=-1)


def nearest_chordal(targets, points) -> np.ndarray:
    """Chordal distance from each target to the nearest of ``points``."""
    targets = np.asarray(targets, complex).ravel()
    points = np.asarray(points, complex).ravel()
    if points.size == 0:
        return np.full(targets.size, np.inf)
    tree = cKDTree(_to_sphere3(points))
    d, _ = tree.query(_to_sphere3(targets))
    return np.asarray(d)


@dataclass
class DensityReport:
    julia_pixels: int
    covered: int
    coverage: float
    epsilon: float
    histogram: list  # counts per HIST_BINS interval, plus overflow
    period_counts: dict  # period -> (repelling, total)
    notes: list
    max_distance: float

    def lines(self) -> list[str]:
        out = [
            f"julia_pixels: {self.julia_pixels}",
            f"covered_pixels: {self.covered}",
            f"epsilon: {self.epsilon!r}",
            f"coverage: {self.coverage:.6f}",
            f"max_distance: {self.max_distance:.6g}",
            "histogram_bins: " + ", ".join(repr(b) for b in HIST_BINS) + ", inf",
            "histogram_counts: " + ", ".join(str(c) for c in self.histogram),
        ]
        for per in sorted(self.period_counts):
            rep, tot = self.period_counts[per]
            out.append(f"period_{per}: repelling={rep} total={tot}")
        out += [f"note: {n}" for n in self.notes]
        return out


def density_report(raster: JuliaRaster, cycles: list[Cycle], epsilon: float) -> DensityReport:
    """Chordal distance from every Julia pixel centre to the nearest repelling periodic point."""
    notes = []
    mask = raster.julia_mask()
    centers = raster.grid.centers()[mask]
    rep_pts = np.array([q for c in cycles if c.is_repelling for q in c.points], complex)
    period_counts: dict = {}
    for c in cycles:
        rep, tot = period_counts.get(c.period, (0, 0))
        period_counts[c.period] = (rep + int(c.is_repelling), tot + 1)
    if centers.size == 0:
        notes.append("no Julia pixels; coverage is vacuous")
        return DensityReport(0, 0, 1.0, epsilon, [0] * len(HIST_BINS), period_counts, notes, 0.0)
    d = nearest_chordal(centers, rep_pts)
    if rep_pts.size == 0:
        notes.append("no repelling cycles found")
    edges = np.array(HIST_BINS + (np.inf,))
    hist, _ = np.histogram(np.minimum(d, 1e300), bins=edges)
    covered = int(np.sum(d <= epsilon))
    return DensityReport(
        int(centers.size), covered, covered / centers.size, epsilon, hist.tolist(), period_counts, notes, float(np.max(d))
    )


# --------------------------------------------------------------------------
# end-to-end density run


@dataclass
class DensityConfig:
    epsilon: float = 0.05
    period_budget: int = 6
    seed_density: int = 41
    prepole_depth: int = 2
    # pole path: windows of radii around 2^-n, one rescaling step kept per window
    alpha_start: int = 3
    alpha_stop: int = 10
    alpha_window: float = 0.1
    alpha_count: int = 64
    limit_grid: int = 11
    guided_seed_n: int = 9
    # omitted-pole path
    zalcman_points: int = 10
    zalcman_stages: int = 6
    zalcman_disc_radius: float = 0.25
    sample_seed: int = 0


@dataclass
class ZalcmanSample:
    v: complex
    steps: list
    nearest: float  # chordal distance from v to the closest repelling cycle found
    period: int | None


@dataclass
class DensityRun:
    profile: FunctionProfile
    raster: JuliaRaster
    prepoles: list
    cycles: list
    lattice_cycles: list
    guided: dict = field(default_factory=dict)  # pole -> (steps, GuidedResult)
    zalcman: list = field(default_factory=list)
    report: DensityReport | None = None
    path: str = ""


def sample_julia_points(raster: JuliaRaster, count: int, seed: int) -> np.ndarray:
    """Centres of ``count`` distinct Julia-flagged pixels, in raster order."""
    idx = np.argwhere(raster.julia_mask())
    if idx.size == 0:
        return np.array([], complex)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(idx), size=min(count, len(idx)), replace=False))
    iy, ix = idx[pick, 0], idx[pick, 1]
    return raster.grid.pixel_to_point(ix, iy)


def zalcman_guided_search(e: Expr, v: complex, steps, period_budget: int, tol=None, seed_n: int = 9, workers: int = 1):
    """Repelling cycles seeded at v_n + r_n * (unit-disc lattice), periods 1..budget.

    Returns the merged cycles and the one with an orbit point chordally
    closest to v (or None).
    """
    tol = tol or Tolerances()
    base = disc_lattice(0, 1.0, seed_n)
    found = []
    for s in steps:
        for m in range(1, period_budget + 1):
            found += find_cycles_from_seeds(e, m, s.v_n + s.r_n * base, tol, workers=workers)
    found = [c for c in dedup_cycles(found, tol.dedup_radius) if c.is_repelling]
    best, best_d = None, np.inf
    for c in found:
        d = float(np.min(chordal_distance(np.array(c.points), complex(v))))
        if d < best_d:
            best, best_d = c, d
    return found, best, best_d


def density_run(
    e: Expr,
    poles,
    grid: GridSpec,
    nmax: int,
    growth_threshold: float,
    config: DensityConfig | None = None,
    tol: Tolerances | None = None,
    workers: int = 1,
) -> DensityRun:
    """Raster, cycle search and coverage report for one function.

    Lattice-seeded cycles of every period up to the budget are always
    searched. With a pole that is not omitted, each declared pole inside the
    grid is renormalized (f^2 has an essential singularity there) and
    seeds the guided search; with a single omitted pole, Zalcman sequences at
    sampled Julia pixels seed it instead.
    """
    cfg = config or DensityConfig()
    tol = tol or Tolerances()
    region = grid.region
    profile = classify_profile(e, poles, region)
    notes = [f"profile: {profile.case.value}"]
    prepoles = find_prepoles(e, profile, cfg.prepole_depth, region, workers=workers) if profile.declared_poles else []
    raster = marty_raster(e, grid, nmax, growth_threshold, poles=profile.declared_poles, prepoles=prepoles, workers=workers)

    lattice = [find_cycles(e, n, region, cfg.seed_density, tol, workers) for n in range(1, cfg.period_budget + 1)]
    lattice = merge_cycles(lattice, tol.dedup_radius)
    run = DensityRun(profile, raster, prepoles, [], lattice)
    groups = [lattice]

    if profile.case is ProfileCase.SINGLE_POLE_OMITTED:
        run.path = "omitted pole: Zalcman sequences on iterates"
        zcfg = ZalcmanConfig(disc_radius=cfg.zalcman_disc_radius)
        for v in sample_julia_points(raster, cfg.zalcman_points, cfg.sample_seed):
            v = complex(v)
            try:
                steps = zalcman_sequence(e, v, cfg.zalcman_stages, zcfg, workers, partial=True)
            except RenormError as exc:
                notes.append(f"zalcman at {v:.6g}: {type(exc).__name__}")
                run.zalcman.append(ZalcmanSample(v, [], np.inf, None))
                continue
            found, best, d = zalcman_guided_search(e, v, steps, cfg.period_budget, tol, cfg.guided_seed_n, workers)
            groups.append(found)
            run.zalcman.append(ZalcmanSample(v, steps, d, best.period if best else None))
    else:
        run.path = "pole not omitted: renormalization at poles of f (essential for f^2)"
        lam = 1
        K = GridSpec(0, 1.0, 1.0, cfg.limit_grid, cfg.limit_grid)
        windows = alpha_windows(cfg.alpha_start, cfg.alpha_stop, cfg.alpha_window, cfg.alpha_count)
        for p in profile.declared_poles:
            if not region.contains(p):
                continue
            try:
                cands = []
                for n, w in zip(range(cfg.alpha_start, cfg.alpha_stop + 1), windows):
                    st, _ = essential_renorm(e, lam + 1, p, w, workers=workers)
                    for s in st:
                        s.n = n
                    cands.append(st)
                steps, _gaps = diagonal_extract(cands, e, K)
                res = renorm_guided_search(
                    e, profile, p, lam, steps, cfg.period_budget - lam, tol, seed_n=cfg.guided_seed_n, workers=workers
                )
            except (RenormError, CycleSearchError) as exc:
                notes.append(f"pole {complex(p):.6g}: {type(exc).__name__}: {exc}")
                continue
            run.guided[complex(p)] = (steps, res)
            groups.append([c for c, _n in res.cycles])
            if res.budget_binding:
                notes.append(f"pole {complex(p):.6g}: period budget binding, no guided cycles")
    notes.append(f"path: {run.path}")
    run.cycles = merge_cycles(groups, tol.dedup_radius)
    report = density_report(raster, run.cycles, cfg.epsilon)
    report.notes = notes + report.notes
    run.report = report
    return run
