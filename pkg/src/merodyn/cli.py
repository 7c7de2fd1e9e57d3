"""Command-line entry point: ``merodyn {render,density,renorm,lehto,cycles}``.

Runs are driven by an INI file. Every output file carries the resolved
configuration and the package version, so a file on its own says how it was
made. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .cycles import DensityConfig, Tolerances, density_run, find_cycles, merge_cycles
from .dynamics import GridSpec, find_prepoles, marty_raster, raster_metadata, write_metadata, write_ppm
from .fnexpr import Expr, ExprError, Var, classify_profile, eval_jet, parse
from .renorm import (
    EssentialConfig,
    ZalcmanConfig,
    default_alphas,
    essential_renorm,
    lehto_scan,
    zalcman_sequence,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# typed access to the INI file


def _walk(e):
    yield e
    for f in fields(e):
        child = getattr(e, f.name)
        if isinstance(child, Expr):
            yield from _walk(child)


def parse_constant(text: str) -> complex:
    """A constant written in the expression grammar, e.g. ``pi/2`` or ``-1+0.5i``."""
    e = parse(text)
    if any(isinstance(node, Var) for node in _walk(e)):
        raise ValueError(f"{text!r} depends on z")
    return complex(eval_jet(e, 0).point())


class Section:
    """One INI section with defaults recorded as they are read."""

    def __init__(self, cp: configparser.ConfigParser, name: str, resolved: dict):
        self.name = name
        self.raw = cp[name] if cp.has_section(name) else {}
        self.out = resolved.setdefault(name, {})

    def _get(self, key, default, convert, required=False):
        if key in self.raw:
            text = self.raw[key].strip()
            try:
                value = convert(text)
            except (ValueError, ExprError) as exc:
                raise ConfigError(f"[{self.name}] {key} = {text!r}: {exc}") from None
        elif required:
            raise ConfigError(f"[{self.name}] {key}: required field is missing")
        else:
            value = default
        self.out[key] = _jsonable(value)
        return value

    def int(self, key, default=None, required=False, minimum=None):
        v = self._get(key, default, int, required)
        if minimum is not None and v < minimum:
            raise ConfigError(f"[{self.name}] {key} = {v}: must be >= {minimum}")
        return v

    def float(self, key, default=None, required=False, positive=False):
        v = self._get(key, default, float, required)
        if positive and not v > 0:
            raise ConfigError(f"[{self.name}] {key} = {v}: must be positive")
        return v

    def complex(self, key, default=None, required=False):
        return self._get(key, default, parse_constant, required)

    def complex_list(self, key, default=None, required=False):
        return self._get(key, default, _split(parse_constant), required)

    def float_list(self, key, default=None, required=False):
        return self._get(key, default, _split(float), required)

    def str(self, key, default=None, required=False, choices=None):
        v = self._get(key, default, str, required)
        if choices and v not in choices:
            raise ConfigError(f"[{self.name}] {key} = {v!r}: expected one of {', '.join(choices)}")
        return v


def _split(convert):
    def go(text):
        return [convert(t) for t in text.replace("\n", ",").split(",") if t.strip()]

    return go


def _jsonable(v):
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return cp


def _function(cp, resolved, poles_required):
    sec = Section(cp, "function", resolved)
    text = sec.str("expression", required=True)
    try:
        e = parse(text)
    except ExprError as exc:
        raise ConfigError(f"[function] expression = {text!r}: {exc}") from None
    poles = sec.complex_list("poles", [], required=poles_required)
    return e, poles


def _grid(cp, resolved):
    sec = Section(cp, "grid", resolved)
    return GridSpec(
        sec.complex("center", 0j),
        sec.float("width", 4.0, positive=True),
        sec.float("height", 4.0, positive=True),
        sec.int("nx", 256, minimum=1),
        sec.int("ny", 256, minimum=1),
    )


def _tolerances(cp, resolved):
    sec = Section(cp, "tolerances", resolved)
    d = Tolerances()
    return Tolerances(
        residual=sec.float("residual", d.residual, positive=True),
        dedup_radius=sec.float("dedup_radius", d.dedup_radius, positive=True),
        band=sec.float("band", d.band),
        max_steps=sec.int("max_steps", d.max_steps, minimum=1),
        escape=sec.float("escape", d.escape, positive=True),
        xtol=sec.float("xtol", d.xtol),
    )


# --------------------------------------------------------------------------
# writers


def _header(resolved: dict, command: str) -> list[str]:
    return [f"merodyn {__version__} {command}", "config " + json.dumps(resolved, sort_keys=True)]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, header: list[str], columns: list[str], rows) -> None:
    buf = io.StringIO()
    for line in header:
        buf.write("# " + line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


CYCLE_COLUMNS = ["period", "re", "im", "multiplier_re", "multiplier_im", "multiplier_abs", "class", "residual"]


def cycle_rows(cycles):
    for c in cycles:
        z, m = complex(c.representative), complex(c.multiplier)
        yield [c.period, z.real, z.imag, m.real, m.imag, abs(m), c.cls.value, float(c.residual)]


STEP_COLUMNS = [
    "n", "iterate", "xi_re", "xi_im", "v_re", "v_im", "r_n", "base_derivative", "alpha_n", "annulus_ratio", "branch",
]  # fmt: skip


def step_rows(steps):
    for s in steps:
        yield [
            s.n, s.iterate, s.xi_n.real, s.xi_n.imag, s.v_n.real, s.v_n.imag,
            float(s.r_n), float(s.base_derivative), s.alpha_n, s.annulus_ratio, str(s.branch),
        ]  # fmt: skip


# --------------------------------------------------------------------------
# subcommands


def run_render(cp, out: Path, workers: int, resolved: dict) -> list[Path]:
    e, poles = _function(cp, resolved, poles_required=True)
    grid = _grid(cp, resolved)
    sec = Section(cp, "render", resolved)
    nmax = sec.int("nmax", 60, minimum=1)
    threshold = sec.float("growth_threshold", 1e6, positive=True)
    depth = sec.int("prepole_depth", 2, minimum=0)
    prepoles = []
    if poles:
        profile = classify_profile(e, poles, grid.region)
        prepoles = find_prepoles(e, profile, depth, grid.region, workers=workers)
        poles = profile.declared_poles
    raster = marty_raster(e, grid, nmax, threshold, poles=poles or None, prepoles=prepoles, workers=workers)
    ppm, meta = out / "raster.ppm", out / "raster.meta"
    write_ppm(ppm, raster, " | ".join(_header(resolved, "render")))
    write_metadata(meta, raster_metadata(raster, resolved))
    return [ppm, meta]


def run_density(cp, out: Path, workers: int, resolved: dict) -> list[Path]:
    e, poles = _function(cp, resolved, poles_required=True)
    if not poles:
        raise ConfigError("[function] poles: the density run needs at least one declared pole")
    grid = _grid(cp, resolved)
    rsec = Section(cp, "render", resolved)
    nmax = rsec.int("nmax", 60, minimum=1)
    threshold = rsec.float("growth_threshold", 1e6, positive=True)
    sec = Section(cp, "density", resolved)
    d = DensityConfig()
    cfg = DensityConfig(
        epsilon=sec.float("epsilon", d.epsilon, positive=True),
        period_budget=sec.int("period_budget", d.period_budget, minimum=0),
        seed_density=sec.int("seed_density", d.seed_density, minimum=2),
        prepole_depth=sec.int("prepole_depth", d.prepole_depth, minimum=0),
        alpha_start=sec.int("alpha_start", d.alpha_start, minimum=1),
        alpha_stop=sec.int("alpha_stop", d.alpha_stop, minimum=1),
        alpha_window=sec.float("alpha_window", d.alpha_window),
        alpha_count=sec.int("alpha_count", d.alpha_count, minimum=1),
        limit_grid=sec.int("limit_grid", d.limit_grid, minimum=1),
        guided_seed_n=sec.int("guided_seed_n", d.guided_seed_n, minimum=1),
        zalcman_points=sec.int("zalcman_points", d.zalcman_points, minimum=0),
        zalcman_stages=sec.int("zalcman_stages", d.zalcman_stages, minimum=1),
        zalcman_disc_radius=sec.float("zalcman_disc_radius", d.zalcman_disc_radius, positive=True),
        sample_seed=sec.int("sample_seed", d.sample_seed),
    )
    if not 0 <= cfg.alpha_window < 1:
        raise ConfigError(f"[density] alpha_window = {cfg.alpha_window}: must lie in [0, 1)")
    if cfg.alpha_stop < cfg.alpha_start:
        raise ConfigError("[density] alpha_stop must be >= alpha_start")
    tol = _tolerances(cp, resolved)
    run = density_run(e, poles, grid, nmax, threshold, cfg, tol, workers)

    header = _header(resolved, "density")
    ppm, cyc, rep = out / "raster.ppm", out / "cycles.csv", out / "report.txt"
    write_ppm(ppm, run.raster, " | ".join(header))
    write_csv(cyc, header, CYCLE_COLUMNS, cycle_rows(run.cycles))
    lines = ["# " + h for h in header]
    lines += run.report.lines()
    for p, (steps, res) in run.guided.items():
        lines.append(f"guided_pole: {p.real!r} {p.imag!r}")
        for s in steps:
            c = res.per_step.get(s.n)
            if c is None:
                lines.append(f"guided_step: n={s.n} r_n={s.r_n!r} cycle=none")
                continue
            m = abs(c.multiplier)
            lines.append(f"guided_step: n={s.n} r_n={s.r_n!r} period={c.period} multiplier_abs={m!r} r_n_times_multiplier={s.r_n * m!r}")
    for z in run.zalcman:
        lines.append(f"zalcman_point: {z.v.real!r} {z.v.imag!r} stages={len(z.steps)} nearest={z.nearest!r} period={z.period}")
    rep.write_text("\n".join(lines) + "\n")
    return [ppm, cyc, rep]


def run_cycles(cp, out: Path, workers: int, resolved: dict) -> list[Path]:
    e, _ = _function(cp, resolved, poles_required=False)
    grid = _grid(cp, resolved)
    sec = Section(cp, "cycles", resolved)
    max_period = sec.int("max_period", 6, minimum=1)
    density = sec.int("seed_density", 41, minimum=2)
    tol = _tolerances(cp, resolved)
    groups = [find_cycles(e, n, grid.region, density, tol, workers) for n in range(1, max_period + 1)]
    path = out / "cycles.csv"
    write_csv(path, _header(resolved, "cycles"), CYCLE_COLUMNS, cycle_rows(merge_cycles(groups, tol.dedup_radius)))
    return [path]


def run_renorm(cp, out: Path, workers: int, resolved: dict) -> list[Path]:
    e, _ = _function(cp, resolved, poles_required=False)
    sec = Section(cp, "renorm", resolved)
    mode = sec.str("mode", "zalcman", choices=("zalcman", "essential"))
    point = sec.complex("point", required=True)
    if mode == "zalcman":
        d = ZalcmanConfig()
        stages = sec.int("stages", 8, minimum=1)
        cfg = ZalcmanConfig(
            m_max=sec.int("m_max", d.m_max, minimum=1),
            lattice_n=sec.int("lattice_n", d.lattice_n, minimum=3),
            growth_floor=sec.float("growth_floor", d.growth_floor, positive=True),
            growth_factor=sec.float("growth_factor", d.growth_factor, positive=True),
            domain_radius=sec.float("domain_radius", d.domain_radius, positive=True),
            refinements=sec.int("refinements", d.refinements, minimum=0),
            disc_radius=sec.float("disc_radius", d.disc_radius, positive=True),
        )
        steps = zalcman_sequence(e, point, stages, cfg, workers)
    else:
        d = EssentialConfig()
        iterate = sec.int("iterate", 2, minimum=1)
        start = sec.int("alpha_start", 3, minimum=1)
        alphas = sec.float_list("alphas", default_alphas(start, sec.int("alpha_stop", 10, minimum=1)))
        if not alphas or any(a <= 0 for a in alphas):
            raise ConfigError("[renorm] alphas: need at least one positive radius")
        cfg = EssentialConfig(
            circle_samples=sec.int("circle_samples", d.circle_samples, minimum=8),
            refinements=sec.int("refinements", d.refinements, minimum=0),
            seed_floor=sec.float("seed_floor", d.seed_floor, positive=True),
            neighborhood_radius=sec.float("neighborhood_radius", d.neighborhood_radius, positive=True),
            lattice_n=sec.int("lattice_n", d.lattice_n, minimum=3),
        )
        steps, _branch = essential_renorm(e, iterate, point, alphas, cfg, workers, first_index=start)
    path = out / "renorm.csv"
    write_csv(path, _header(resolved, "renorm"), STEP_COLUMNS, step_rows(steps))
    return [path]


def run_lehto(cp, out: Path, workers: int, resolved: dict) -> list[Path]:
    e, _ = _function(cp, resolved, poles_required=False)
    sec = Section(cp, "lehto", resolved)
    point = sec.complex("point", 0j)
    radii = sec.float_list("radii", required=True)
    if not radii:
        raise ConfigError("[lehto] radii: the list is empty")
    if any(r <= 0 for r in radii) or any(b >= a for a, b in zip(radii, radii[1:])):
        raise ConfigError("[lehto] radii: must be positive and strictly decreasing")
    samples = sec.int("samples_per_circle", 720, minimum=4)
    iterate = sec.int("iterate", 1, minimum=1)
    rows = lehto_scan(e, point, radii, samples, iterate)
    path = out / "lehto.csv"
    write_csv(
        path,
        _header(resolved, "lehto"),
        ["radius", "circle_max", "argmax_re", "argmax_im", "running_sup"],
        ([r.radius, r.circle_max, r.argmax.real, r.argmax.imag, r.running_sup] for r in rows),
    )
    return [path]


COMMANDS = {
    "render": run_render,
    "density": run_density,
    "renorm": run_renorm,
    "lehto": run_lehto,
    "cycles": run_cycles,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="merodyn", description="Julia sets and repelling cycles of meromorphic maps.")
    ap.add_argument("--version", action="version", version=f"merodyn {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="INI file describing the run")
    ap.add_argument("--out", default=".", help="output directory (created if missing)")
    ap.add_argument("--workers", type=int, default=1, help="worker threads; never changes the output")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    resolved: dict = {}
    try:
        cp = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[args.command](cp, out, args.workers, resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported with the failing module's error type
        print(f"runtime error: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
