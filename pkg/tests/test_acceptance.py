"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script. Every
tolerance used below is pinned as a module constant.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from exprgen import random_expr, random_point

from merodyn.cli import main
from merodyn.fnexpr import Const, Div, NumericalOverflowBothCharts, eval_jet, parse
from merodyn.renorm import (
    concentration_point,
    default_alphas,
    disc_lattice,
    essential_renorm,
    lehto_scan,
    rescaled_marty,
    zalcman_sequence,
)
from merodyn.sphere import INF, chordal_distance, spherical_derivative

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# criterion 1
METRIC_PAIRS = 100_000
TRIANGLE_SLACK = 1e-12
INVERSION_TOL = 1e-12
METRIC_SECONDS = 5.0
# criterion 2
DERIV_SAMPLES = 1000
RECIPROCAL_REL = 1e-9
FD_REL = 1e-5
# criterion 3
GROMOV_INSTANCES = 1000
GROMOV_MAX_POINTS = 200
GROMOV_SECONDS = 10.0
# criterion 4
ZALCMAN_STAGES = 8
UNIT_DERIV_TOL = 1e-9
ZALCMAN_SUP = 2.2
# criterion 5
ANNULUS = (7 / 8, 9 / 8)
ESSENTIAL_DERIV = 1 / 16
ESSENTIAL_SUP = 0.155
# criterion 6
LEHTO_FLOOR = 0.5
LEHTO_AT_TENTH = 5.0
LEHTO_CLOSED_FORM = 5.05
LEHTO_REL = 0.02
POLE_CONTROL_TOL = 1e-9
# criterion 7
COVERAGE = 0.95
DENSITY_SECONDS = 300.0
# criterion 8
OMITTED_POINTS = 10
OMITTED_DISTANCE = 0.1
OMITTED_PERIOD = 8
# criterion 9
BLOWUP_RATIO = 10.0
BLOWUP_R = 1e-3
BLOWUP_MULT = 1e3

CLI_RUNS = {
    4: ("renorm", "tan_zalcman.ini"),
    5: ("renorm", "tantan_renorm.ini"),
    6: ("lehto", "exp1z_lehto.ini"),
    7: ("density", "tan_density.ini"),
    8: ("density", "expz_density.ini"),
}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def run_cli(n, root, workers):
    cmd, cfg = CLI_RUNS[n]
    out = root / f"c{n}_w{workers}"
    t0 = time.perf_counter()
    code = main([cmd, "--config", str(CONFIGS / cfg), "--out", str(out), "--workers", str(workers)])
    return code, out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return root, {n: run_cli(n, root, 1) for n in CLI_RUNS}


def report_fields(path):
    out = {}
    for ln in Path(path).read_text().splitlines():
        if ":" in ln and not ln.startswith("#"):
            key, _, val = ln.partition(":")
            out.setdefault(key, []).append(val.strip())
    return out


def kv(text):
    return dict(item.split("=", 1) for item in text.split() if "=" in item)


def test_criterion_1_metric(capsys):
    rng = np.random.default_rng(20)

    def draw(k):
        z = rng.normal(size=k) * 10 ** rng.uniform(-4, 4, k) + 1j * rng.normal(size=k) * 10 ** rng.uniform(-4, 4, k)
        z[rng.random(k) < 0.02] = INF
        return z

    a, b, c = draw(METRIC_PAIRS), draw(METRIC_PAIRS), draw(METRIC_PAIRS)
    t0 = time.perf_counter()
    dab, dba = chordal_distance(a, b), chordal_distance(b, a)
    symmetric = bool(np.all(dab == dba))
    tri = float(np.max(dab - chordal_distance(a, c) - chordal_distance(c, b)))
    with np.errstate(divide="ignore"):
        inv = lambda z: np.where(z == 0, INF, np.where(np.isinf(z.real), 0, 1 / z))  # noqa: E731
        inv_err = float(np.max(np.abs(chordal_distance(inv(a), inv(b)) - dab)))
    secs = time.perf_counter() - t0
    ok = symmetric and tri <= TRIANGLE_SLACK and inv_err <= INVERSION_TOL and secs < METRIC_SECONDS
    verdict(capsys, 1, ok, f"symmetric={symmetric} triangle_excess={tri:.2e} inversion_err={inv_err:.2e} seconds={secs:.2f}")


def test_criterion_2_derivatives(capsys):
    rng = np.random.default_rng(21)
    worst_recip, worst_fd, n_recip, n_fd = 0.0, 0.0, 0, 0
    while n_recip < DERIV_SAMPLES:
        e, z = random_expr(rng), random_point(rng)
        try:
            j = eval_jet(e, z)
            a = spherical_derivative(j)
            b = spherical_derivative(eval_jet(Div(Const(1.0), e), z))
        except NumericalOverflowBothCharts:
            continue
        if not (np.isfinite(a) and a > 1e-300):
            continue
        worst_recip = max(worst_recip, abs(a - b) / a)
        n_recip += 1
        # finite differences only where the function is tame enough for h = 1e-5
        f = j.point()
        if f == INF or not 1e-3 < abs(f) < 1e3:
            continue
        d = j.to_identity().deriv
        if not 1e-3 < abs(d) < 1e4:
            continue
        h = 1e-5 * (1 + abs(z))
        try:
            fd = (eval_jet(e, z + h).point() - eval_jet(e, z - h).point()) / (2 * h)
        except NumericalOverflowBothCharts:
            continue
        worst_fd = max(worst_fd, abs(fd - d) / abs(d))
        n_fd += 1
    ok = worst_recip <= RECIPROCAL_REL and worst_fd <= FD_REL and n_fd > DERIV_SAMPLES // 4
    verdict(capsys, 2, ok, f"samples={n_recip} reciprocal_rel={worst_recip:.2e} fd_samples={n_fd} fd_rel={worst_fd:.2e}")


def gromov_oracle(D, M, sigma, u, w):
    i = D[u, w] <= 2.0 / (sigma * M[u]) * (1 + 1e-12)
    ii = M[w] >= M[u]
    iii = bool(np.all(M[D[w] <= 1.0 / (sigma * M[w])] <= 2 * M[w]))
    return i and ii and iii


def test_criterion_3_gromov(capsys):
    rng = np.random.default_rng(22)
    instances = []
    for _ in range(GROMOV_INSTANCES):
        n = int(rng.integers(1, GROMOV_MAX_POINTS + 1))
        X = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
        M = 100.0 * (1.0 - rng.random(n)) ** rng.uniform(1, 6)  # in (0, 100]
        sigma = float(10 ** rng.uniform(-1, 2))
        instances.append((X, M, sigma, int(rng.integers(n))))
    t0 = time.perf_counter()
    picks = [concentration_point(X, None, M, s, u) for X, M, s, u in instances]
    secs = time.perf_counter() - t0
    bad = 0
    for (X, M, s, u), w in zip(instances, picks):
        D = np.abs(X[:, None] - X[None, :])
        bad += not gromov_oracle(D, M, s, u, w)
    ok = bad == 0 and secs < GROMOV_SECONDS
    verdict(capsys, 3, ok, f"instances={len(instances)} oracle_failures={bad} seconds={secs:.2f}")


def test_criterion_4_zalcman(capsys):
    e = parse("2*tan(z)")
    steps = zalcman_sequence(e, 0, ZALCMAN_STAGES)
    at0 = max(abs(rescaled_marty(e, s, np.array([0j]))[0] - 1.0) for s in steps)
    sup = max(float(np.nanmax(rescaled_marty(e, s, disc_lattice(0, s.n, 201)))) for s in steps)
    r = [s.r_n for s in steps]
    decreasing = all(b < a for a, b in zip(r, r[1:]))
    ok = [s.n for s in steps] == list(range(1, ZALCMAN_STAGES + 1)) and at0 <= UNIT_DERIV_TOL and sup <= ZALCMAN_SUP and decreasing
    verdict(capsys, 4, ok, f"stages={len(steps)} deriv_err_at_0={at0:.1e} sup_on_D(0,n)={sup:.3f} r_n_decreasing={decreasing}")


def test_criterion_5_essential(capsys):
    e = parse("tan(z)")
    steps, _ = essential_renorm(e, 2, math.pi / 2, default_alphas(3, 10), first_index=3)
    ratios = [s.annulus_ratio for s in steps]
    at0 = max(abs(rescaled_marty(e, s, np.array([0j]))[0] - ESSENTIAL_DERIV) for s in steps)
    sup = max(float(np.nanmax(rescaled_marty(e, s, disc_lattice(0, 1.0, 201)))) for s in steps)
    ok = (
        [s.n for s in steps] == list(range(3, 11))
        and all(ANNULUS[0] <= q <= ANNULUS[1] for q in ratios)
        and at0 <= UNIT_DERIV_TOL
        and sup <= ESSENTIAL_SUP
    )
    verdict(capsys, 5, ok, f"annulus=[{min(ratios):.4f}, {max(ratios):.4f}] deriv_err_at_0={at0:.1e} sup_on_unit_disc={sup:.4f}")


def test_criterion_6_lehto(capsys):
    radii = [1e-1, 1e-2, 1e-3, 1e-4]
    rows = lehto_scan(parse("exp(1/z)"), 0, radii)
    control = lehto_scan(parse("1/z"), 0, radii)
    floor = min(r.running_sup for r in rows)
    first = rows[0].circle_max
    ctrl = max(abs(r.circle_max - r.radius) for r in control)
    ok = (
        floor > LEHTO_FLOOR
        and first >= LEHTO_AT_TENTH
        and abs(first - LEHTO_CLOSED_FORM) <= LEHTO_REL * LEHTO_CLOSED_FORM
        and ctrl <= POLE_CONTROL_TOL
    )
    verdict(capsys, 6, ok, f"min_running_sup={floor:.3f} max_at_0.1={first:.4f} control_err={ctrl:.1e}")


def test_criterion_7_density(capsys, cli_runs):
    code, out, secs = cli_runs[1][7]
    f = report_fields(out / "report.txt") if code == 0 else {}
    cov = float(f["coverage"][0]) if f else 0.0
    julia = int(f["julia_pixels"][0]) if f else 0
    ok = code == 0 and julia > 0 and cov >= COVERAGE and secs <= DENSITY_SECONDS
    verdict(capsys, 7, ok, f"exit={code} julia_pixels={julia} coverage={cov:.4f} seconds={secs:.1f}")


def test_criterion_8_omitted_pole(capsys, cli_runs):
    code, out, _ = cli_runs[1][8]
    f = report_fields(out / "report.txt") if code == 0 else {}
    notes = f.get("note", [])
    omitted = any("SinglePoleOmitted" in n for n in notes)
    points = [kv(p) for p in f.get("zalcman_point", [])]
    near = [float(p["nearest"]) for p in points]
    periods = [p["period"] for p in points]
    good = sum(d <= OMITTED_DISTANCE and per != "None" and int(per) <= OMITTED_PERIOD for d, per in zip(near, periods))
    ok = code == 0 and omitted and len(points) == OMITTED_POINTS and good == OMITTED_POINTS
    worst = max(near) if near else math.inf
    verdict(capsys, 8, ok, f"exit={code} omitted_branch={omitted} points={len(points)} within_0.1={good} worst={worst:.4f}")


def test_criterion_9_multiplier_blowup(capsys, cli_runs):
    code, out, _ = cli_runs[1][7]
    lines = (out / "report.txt").read_text().splitlines() if code == 0 else []
    steps, current = [], None
    for ln in lines:
        if ln.startswith("guided_pole:"):
            re_, im_ = map(float, ln.split()[1:3])
            current = complex(re_, im_)
        elif ln.startswith("guided_step:") and current is not None and abs(current - math.pi / 2) < 1e-9:
            d = kv(ln)
            if "multiplier_abs" in d:
                steps.append((int(d["n"]), float(d["r_n"]), float(d["multiplier_abs"])))
    last = steps[-4:]
    prod = [r * m for _, r, m in last]
    ratio = max(prod) / min(prod) if len(prod) == 4 else math.inf
    small = [m for _, r, m in steps if r < BLOWUP_R]
    ok = len(last) == 4 and ratio <= BLOWUP_RATIO and bool(small) and min(small) > BLOWUP_MULT
    detail = f"steps={[n for n, _, _ in steps]} ratio_last4={ratio:.3f} min_mult_below_r={min(small) if small else float('nan'):.3g}"
    verdict(capsys, 9, ok, detail)


def test_criterion_10_determinism(capsys, cli_runs):
    root, first = cli_runs
    diffs, files = [], 0
    for n in CLI_RUNS:
        code8, out8, _ = run_cli(n, root, 8)
        code1, out1, _ = first[n]
        if code1 != 0 or code8 != 0:
            diffs.append(f"c{n}:exit")
            continue
        for p in sorted(out1.iterdir()):
            files += 1
            if p.read_bytes() != (out8 / p.name).read_bytes():
                diffs.append(f"c{n}:{p.name}")
    verdict(capsys, 10, not diffs, f"files_compared={files} differing={diffs or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
