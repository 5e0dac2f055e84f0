"""Acceptance criteria at their stated scale and tolerance.

Each test records one PASS/FAIL line; the lines are repeated in the
pytest terminal summary. The whole file takes roughly half an hour on one
core.
"""
import itertools
import math
import time
import warnings

import numpy as np
import pytest

from shapelab import cli
from shapelab import replicas as rep
from shapelab.estimators import estimate_lambdas, geometric_schedule, growth_of, shape_from_estimates
from shapelab.geometry import Direction, direction_grid, symmetry_images
from shapelab.observables import b_sets
from shapelab.properties import (
    PASS, check_halfspace_nesting, check_monotone_coupling, check_no_A_behind_front, check_poisson_marginals,
    check_superconvolutivity,
)
from shapelab.reference import JumpEvent
from shapelab.shape import build_shape, shape_sandwich_check, shape_sandwich_check_sites
from shapelab.simulator import (
    FullSpace, LayerInit, Original, ProcessSpec, build_population, designated_sites, guard_box, run, run_event_log,
)

# guard constant for the d=2 runs; the front stays far inside the margin at
# these horizons and the default of 4 would be several times slower
C_GUARD_2D = 1.25


def spec1(horizon, seed):
    return ProcessSpec(1, 1.0, 1.0, float(horizon), guard_box(horizon), seed=seed)


def spec2(horizon, seed, mode=None):
    return ProcessSpec(2, 1.0, 1.0, float(horizon), guard_box(horizon, C_GUARD_2D), mode=mode or FullSpace(),
                       seed=seed, c_guard=C_GUARD_2D)


def quiet_run(spec, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run(spec, **kw)


def test_c01_coupling_law(record_criterion):
    t0 = time.perf_counter()
    r1 = check_monotone_coupling(spec1(50, 101), 200)
    r2 = check_monotone_coupling(spec2(50, 102), 200)
    wall = time.perf_counter() - t0
    ok = r1.verdict == PASS and r2.verdict == PASS and wall <= 300
    record_criterion(1, ok, f"d=1 {r1.verdict} violations={r1.evidence['violations']}, "
                            f"d=2 {r2.verdict} violations={r2.evidence['violations']}, {wall:.0f}s (<=300s)")
    assert ok


def test_c02_halfspace_nesting(record_criterion):
    t0 = time.perf_counter()
    r = check_halfspace_nesting(spec1(50, 201), Direction((1.0,)), 2, 8, 100, per_event=True)
    wall = time.perf_counter() - t0
    ev = r.evidence
    ok = r.verdict == PASS and ev["eligible"] == 100 and ev["violations"] == 0 and wall <= 180
    record_criterion(2, ok, f"eligible={ev['eligible']} violations={ev['violations']} "
                            f"skip_rate={ev['skip_rate']:.2f}, {wall:.0f}s (<=180s)")
    assert ok


def test_c03_poisson_invariance(record_criterion):
    t0 = time.perf_counter()
    r = check_poisson_marginals(ProcessSpec(2, 1.0, 1.0, 8.0, 64, seed=301), 8.0, 50)
    wall = time.perf_counter() - t0
    ev = r.evidence
    ok = r.verdict == PASS and wall <= 600
    record_criterion(3, ok, f"p>1e-3 in {ev['fraction_p_above']:.2f} of replicas (>=0.95), "
                            f"adjacent corr={ev['adjacent_corr']:+.4f} (|.|<={ev['corr_bound']:.4f}), {wall:.0f}s")
    assert ok


def test_c04_linear_growth(record_criterion):
    t0 = time.perf_counter()
    fits = []
    for i in range(30):
        res = quiet_run(spec1(200, rep.replica_seed(401, i, "growth")))
        if res.containment_ok:
            fits.append(growth_of(res))
    wall = time.perf_counter() - t0
    r2 = np.array([f.r_squared for f in fits])
    frac = float(np.mean(r2 >= 0.99)) if fits else 0.0
    c_low_ok = bool(fits) and all(f.c_lower > 0 for f in fits)
    ok = frac >= 0.9 and c_low_ok and wall <= 600
    record_criterion(4, ok, f"unflagged={len(fits)}/30, r2>=0.99 in {frac:.2f} (>=0.90), "
                            f"median r2={np.median(r2):.4f}, min c_lower={min(f.c_lower for f in fits):.3f}, "
                            f"{wall:.0f}s")
    assert ok


def test_c05_speed_symmetry(record_criterion):
    t0 = time.perf_counter()
    e1 = Direction((1.0,))
    est = estimate_lambdas([e1, Direction.axis(0, 1, -1)], spec1(200, 501), geometric_schedule(0.25, 128, 2), 64)
    se = math.hypot(est[0].stderr, est[1].stderr)
    gap1 = abs(est[0].point - est[1].point)
    ok1 = gap1 <= 3 * se
    # the 8 images of e1 under the hyperoctahedral group hit 4 distinct directions
    images = sorted(set(symmetry_images((1.0, 0.0))))
    est2 = estimate_lambdas([Direction(v) for v in images], spec2(100, 502), geometric_schedule(0.25, 64, 2), 32)
    lam = [e.point for e in est2]
    spread = max(lam) - min(lam)
    max_se = max(e.stderr for e in est2)
    ok2 = spread <= 3 * max_se
    wall = time.perf_counter() - t0
    ok = ok1 and ok2 and wall <= 1800
    record_criterion(5, ok, f"d=1 |gap|={gap1:.4f} <= {3 * se:.4f}: {ok1}; d=2 spread={spread:.4f} <= "
                            f"{3 * max_se:.4f}: {ok2}; {wall:.0f}s (<=1800s)")
    assert ok


def test_c06_shape_sandwich(record_criterion):
    t0 = time.perf_counter()
    T, eps = 150.0, 0.25
    est = estimate_lambdas(direction_grid(2, 16), spec2(T, 601), geometric_schedule(0.25, 96, 2), 16,
                           bank="sandwich-shape")
    shape = shape_from_estimates(est)
    hits, used = 0, 0
    outcomes = []
    for i in range(30):
        res = quiet_run(spec2(T, rep.replica_seed(602, i, "sandwich-fresh"), Original()))
        if not res.containment_ok:
            continue
        used += 1
        inner, outer = shape_sandwich_check(res, T, shape, eps)
        outcomes.append((inner, outer))
        hits += inner and outer
    wall = time.perf_counter() - t0
    frac = hits / used if used else 0.0
    ok = frac >= 0.9 and wall <= 1800
    inner_n = sum(o[0] for o in outcomes)
    outer_n = sum(o[1] for o in outcomes)
    record_criterion(6, ok, f"both inclusions in {hits}/{used} = {frac:.2f} (>=0.90), inner={inner_n}, "
                            f"outer={outer_n}, {wall:.0f}s (<=1800s)")
    assert ok


def test_c07_no_A_behind_front(record_criterion):
    r = check_no_A_behind_front(spec1(150, 701), 150.0, 30, shrink=0.5)
    ev = r.evidence
    ok = r.verdict == PASS and not ev["vacuous"]
    record_criterion(7, ok, f"zero interior A in {ev['fraction_clean_interior']:.2f} of replicas (>=0.90), "
                            f"cube radius={ev['cube_radius']:.1f}")
    assert ok


def test_c08_superconvolutivity(record_criterion):
    t0 = time.perf_counter()
    r = check_superconvolutivity(spec1(40, 801), Direction((1.0,)), 40.0, 40.0, 400, c5=1.0, c6=4.0)
    wall = time.perf_counter() - t0
    ev = r.evidence
    ok = r.verdict == PASS and wall <= 900
    record_criterion(8, ok, f"{r.verdict}, worst margin={ev['worst_margin']:+.4f} over {ev['grid_points']} "
                            f"grid points, {wall:.0f}s (<=900s)")
    assert ok


def test_c09_determinism(tmp_path, record_criterion):
    runs = {
        "simulate": ["simulate", "--dim", "2", "--horizon", "12", "--seed", "9", "--c-guard", "1.5"],
        "estimate": ["estimate", "--dim", "2", "--directions", "8", "--replicas", "8", "--eta", "0.5", "--n0", "8",
                     "--kmax", "1", "--seed", "9"],
        "verify": ["verify", "--only", "coupling,nesting", "--replicas", "10", "--seed", "9"],
    }
    same = True
    compared = 0
    for name, argv in runs.items():
        a, b = tmp_path / f"{name}-a", tmp_path / f"{name}-b"
        assert cli.main(argv + ["--out", str(a)]) == 0
        assert cli.main([name, "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        for f in sorted(a.glob("*.csv")):
            compared += 1
            same &= f.read_bytes() == (b / f.name).read_bytes()
    spec = ProcessSpec(1, 1.0, 1.0, 2.0, 3)
    pop = build_population(spec, counts={(0,): 1, (2,): 1})
    events = [JumpEvent(0.5, 1, (2,), (1,)), JumpEvent(1.2, 1, (1,), (0,))]
    theta = float(run_event_log(spec, pop, events, [LayerInit([0])]).layer.theta[1])
    ok = same and compared >= 4 and theta == 1.2
    record_criterion(9, ok, f"{compared} CSVs byte-identical on replay: {same}; hand-trace theta(q)={theta!r}")
    assert ok


def brute_sandwich(tilde, t, shape, eps):
    vis = {tuple(x) for x in np.asarray(tilde).tolist()}
    R = int(math.ceil(t * (1 + eps) * shape.sup_radius())) + 2
    inner = all(x in vis for x in itertools.product(range(-R, R + 1), repeat=shape.d)
                if shape.contains(x, scale=t * (1 - eps))[0])
    outer = all(shape.contains(np.add(x, c), scale=t * (1 + eps))[0]
                for x in vis for c in itertools.product((-0.5, 0.5), repeat=shape.d))
    return inner, outer


def test_c10_oracle_equivalence(record_criterion):
    rng = np.random.default_rng(1001)
    mismatches = 0
    cases = 0
    for seed in range(6):
        # box 40 in d=2: 81^2 = 6561 <= 10^4 sites
        spec = ProcessSpec(2, 1.0, 1.0, 8.0, 40, seed=seed, c_guard=1.0)
        pop = build_population(spec)
        seen = set(designated_sites(spec, pop))
        def watch(ev, view):
            seen.update(view.b_sites(0))

        res = quiet_run(spec, listeners=[watch], engine="reference", population=pop)
        tilde, fat = b_sets(res, 8.0)
        cases += 1
        mismatches += {tuple(x) for x in tilde.tolist()} != seen
        lo, hi = tilde.min(axis=0) - 2, tilde.max(axis=0) + 2
        for _ in range(300):
            p = rng.uniform(lo, hi)
            if rng.random() < 0.5:
                p = np.round(p * 2) / 2
            brute = any(max(abs(p - np.asarray(s))) <= 0.5 for s in seen)
            mismatches += (tuple(p) in fat) != brute
            cases += 1
        for eps in (0.0, 0.2, 0.5):
            lams = rng.uniform(0.2, 0.9, size=8)
            shape = build_shape(direction_grid(2, 8), lams)
            for t in (2.0, 5.0, 8.0):
                got = shape_sandwich_check_sites(res.layer.b_tilde(t), t, shape, eps)
                mismatches += got != brute_sandwich(res.layer.b_tilde(t), t, shape, eps)
                cases += 1
    ok = mismatches == 0
    record_criterion(10, ok, f"{cases} oracle comparisons, {mismatches} mismatches")
    assert ok
