"""Pass/fail checks of the model's structural laws over seeded replica banks.

Deterministic checks (coupling, nesting) fail on one counterexample and keep
a replayable witness. Statistical checks report their statistic, threshold
and sample sizes.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import replicas as rep
from .estimators import Schedule, estimate_lambdas, geometric_schedule, growth_of
from .geometry import Direction
from .observables import b_positions, kappa
from .simulator import (
    FullSpace, HalfSpaceStart, LayerInit, Population, ProcessSpec, build_population, default_layer,
    designated_sites, guard_box, run,
)

PASS, FAIL, FLAGGED = "pass", "fail", "flagged"
P_THRESHOLD = 1e-3


class CouplingNotApplicable(ValueError):
    pass


class InsufficientReplicas(ValueError):
    pass


@dataclass
class PropertyReport:
    property_id: str
    verdict: str
    evidence: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    witness: dict | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def text(self) -> str:
        lines = [f"[{self.verdict.upper()}] {self.property_id}"]
        for k, v in self.evidence.items():
            lines.append(f"    {k}: {v}")
        if self.witness:
            lines.append(f"    witness: {self.witness}")
        return "\n".join(lines)


def _quiet_run(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run(*args, **kw)


def _spec_for(template: ProcessSpec, horizon: float, mode, seed: int) -> ProcessSpec:
    """Copy of ``template`` at a new horizon, with the guard box if the template box is too small."""
    L = max(template.init_box_L, guard_box(horizon, template.c_guard))
    return template.replace(horizon=float(horizon), init_box_L=L, mode=mode, seed=seed)


# --- monotone coupling -----------------------------------------------------

PairBuilder = Callable[[Population, list], tuple[LayerInit, LayerInit]]


def extra_particle_pair(population: Population, designated) -> tuple[LayerInit, LayerInit]:
    """Layer 1: the designated start; layer 2: the same plus the particle nearest to it."""
    first = default_layer(population, designated)
    chosen = set(first.initial_B.tolist())
    x0 = np.asarray(designated[0])
    dist = np.abs(population.origins - x0[None, :]).max(axis=1)
    order = np.lexsort((np.arange(len(dist)), dist))
    extra = next((int(p) for p in order if int(p) not in chosen), None)
    second = LayerInit(np.array(sorted(chosen | ({extra} if extra is not None else set()))), name="enlarged")
    return first, second


def _coupling_replica(spec: ProcessSpec, replica: int, builder: PairBuilder):
    pop = build_population(spec)
    designated = designated_sites(spec, pop)
    l1, l2 = builder(pop, designated)
    n = len(pop)
    if not set(l1.initial_B.tolist()) <= set(l2.initial_B.tolist()):
        raise CouplingNotApplicable("initial_B of layer 1 is not contained in layer 2")
    if not np.array_equal(l1.member_mask(n), l2.member_mask(n)) or l1.start != l2.start:
        raise CouplingNotApplicable("the two layers must share particles and start time")
    res = _quiet_run(spec, layers=[l1, l2], population=pop)
    th1, th2 = res.layers[0].theta, res.layers[1].theta
    bad = np.flatnonzero(th2 > th1)
    witness = None
    if len(bad):
        p = int(bad[0])
        witness = {"seed": spec.seed, "spec": spec.to_dict(), "particle": tuple(pop.pid(p)),
                   "theta1": float(th1[p]), "theta2": float(th2[p])}
    return replica, res.containment_ok, len(bad), int(np.sum(th2 < th1)), witness


def check_monotone_coupling(template: ProcessSpec, replicas: int, builder: PairBuilder = extra_particle_pair,
                            layer_seeds: tuple[int, int] | None = None, workers: int | None = None) -> PropertyReport:
    """theta2 <= theta1 for every particle when layer 2 starts with more B-particles.

    Both layers must ride one path ensemble; ``layer_seeds`` with two
    different values describes uncoupled layers and is rejected.
    """
    if layer_seeds is not None and layer_seeds[0] != layer_seeds[1]:
        raise CouplingNotApplicable("layers driven by different seeds are not coupled")
    jobs = [(template.replace(seed=rep.replica_seed(template.seed, i, "coupling")), i, builder)
            for i in range(replicas)]
    out = rep.map_replicas(_coupling_replica, jobs, workers)
    clean = [o for o in out if o[1]]
    violations = sum(o[2] for o in clean)
    strict = sum(1 for o in clean if o[3] > 0)
    witness = next((o[4] for o in clean if o[4] is not None), None)
    ev = {"replicas": replicas, "excluded_flagged": replicas - len(clean), "violations": violations,
          "replicas_with_strict_inequality": strict}
    verdict = PASS if violations == 0 and clean else (FLAGGED if not clean else FAIL)
    return PropertyReport("coupling", verdict, ev, template.to_dict(), witness)


# --- half-space nesting ----------------------------------------------------

def _nesting_layers(pop: Population, u: Direction, r: float):
    members = pop.restriction_mask(None if math.isinf(r) else HalfSpaceStart(u, r).restriction)
    idx = np.flatnonzero(members)
    if len(idx) == 0:
        return None, None
    from .geometry import nearest_site
    occupied = np.unique(pop.origins[idx], axis=0)
    site = tuple(int(c) for c in occupied[nearest_site(occupied, (0,) * pop.d)])
    return default_layer(pop, [site], members=members, name=f"r={r}"), site


def _nesting_replica(spec: ProcessSpec, replica: int, u: Direction, r1: float, r2: float, per_event: bool):
    pop = build_population(spec)
    l1, x1 = _nesting_layers(pop, u, r1)
    l2, x2 = _nesting_layers(pop, u, r2)
    if l1 is None or l2 is None or x1 != x2:
        return replica, False, True, 0, None, 0
    listeners = []
    event_bad = [0]
    if per_event:
        def watch(ev, view):
            if not view.b_sites(0) <= view.b_sites(1):
                event_bad[0] += 1
        listeners.append(watch)
    res = _quiet_run(spec, layers=[l1, l2], population=pop, listeners=listeners,
                     engine="reference" if per_event else "fast")
    th1, th2 = res.layers[0].theta, res.layers[1].theta
    shared = res.layers[0].members
    bad = np.flatnonzero(shared & (th2 > th1))
    witness = None
    if len(bad):
        p = int(bad[0])
        witness = {"seed": spec.seed, "spec": spec.to_dict(), "particle": tuple(pop.pid(p)),
                   "time": float(th2[p])}
    return replica, res.containment_ok, False, len(bad), witness, event_bad[0]


def check_halfspace_nesting(template: ProcessSpec, u: Direction, r1: float, r2: float, replicas: int,
                            per_event: bool = False, max_attempts: int | None = None,
                            workers: int | None = None) -> PropertyReport:
    """B-particles of the r1 half-space process are B in the r2 process (r1 <= r2, r2 may be inf).

    Replicas whose two start sites differ are skipped and counted; replicas
    are drawn until ``replicas`` eligible ones are collected.
    """
    if not 0 <= r1 <= r2:
        raise ValueError("need 0 <= r1 <= r2")
    max_attempts = max_attempts or 4 * replicas
    results = []
    start = 0
    while sum(1 for o in results if not o[2]) < replicas and start < max_attempts:
        need = replicas - sum(1 for o in results if not o[2])
        jobs = [(template.replace(mode=FullSpace(), seed=rep.replica_seed(template.seed, i, "nesting")),
                 i, u, r1, r2, per_event) for i in range(start, min(start + need, max_attempts))]
        start += len(jobs)
        results.extend(rep.map_replicas(_nesting_replica, jobs, workers))
    eligible = [o for o in results if not o[2]][:replicas]
    skipped = sum(1 for o in results if o[2])
    clean = [o for o in eligible if o[1]]
    violations = sum(o[3] for o in clean) + sum(o[5] for o in clean)
    witness = next((o[4] for o in clean if o[4] is not None), None)
    ev = {"eligible": len(eligible), "skipped": skipped, "skip_rate": skipped / max(len(results), 1),
          "excluded_flagged": len(eligible) - len(clean), "violations": violations, "per_event": per_event}
    if violations:
        verdict = FAIL
    elif len(eligible) < replicas or not clean:
        verdict = FLAGGED
    else:
        verdict = PASS
    return PropertyReport("nesting", verdict, ev, {**template.to_dict(), "u": list(u.components),
                                                   "r1": r1, "r2": r2}, witness)


# --- Poisson marginals -----------------------------------------------------

def poisson_chi2(counts: np.ndarray, mu: float, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Chi-square goodness of fit of integer counts to Poisson(mu).

    Bins are single values from 0 upward, merged until each holds an
    expected count >= min_expected; the last bin takes the upper tail.
    Returns (statistic, p-value, number of bins).
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = len(counts)
    kmax = int(counts.max()) if n else 0
    probs = stats.poisson.pmf(np.arange(kmax + 2), mu)
    edges = []  # bins as [lo, hi) over k; last bin open
    lo, acc = 0, 0.0
    for k in range(kmax + 1):
        acc += probs[k]
        if acc * n >= min_expected:
            edges.append((lo, k + 1))
            lo, acc = k + 1, 0.0
    if not edges:
        return 0.0, 1.0, 1
    # fold the remainder (and the tail) into the last bin
    edges[-1] = (edges[-1][0], None)
    obs, exp = [], []
    for a, b in edges:
        if b is None:
            obs.append(int((counts >= a).sum()))
            exp.append(n * stats.poisson.sf(a - 1, mu))
        else:
            obs.append(int(((counts >= a) & (counts < b)).sum()))
            exp.append(n * (stats.poisson.cdf(b - 1, mu) - stats.poisson.cdf(a - 1, mu)))
    if len(obs) < 2:
        return 0.0, 1.0, len(obs)
    res = stats.chisquare(obs, exp)
    return float(res.statistic), float(res.pvalue), len(obs)


def _poisson_replica(spec: ProcessSpec, replica: int, t: float):
    from .geometry import cube_sites
    res = _quiet_run(spec, snapshot_times=(t,))
    pos = res.positions_at(t)
    half = spec.init_box_L // 2
    W = 2 * half + 1
    inside = np.all(np.abs(pos) <= half, axis=1)
    flat = np.zeros(len(pos), dtype=np.int64)
    for j in range(spec.d):
        flat = flat * W + (pos[:, j] + half)
    grid = np.bincount(flat[inside], minlength=W ** spec.d).reshape((W,) * spec.d)
    stat, p, bins = poisson_chi2(grid.ravel(), spec.mu_A)
    # adjacent pairs along the first axis
    a = np.take(grid, np.arange(W - 1), axis=0).ravel()
    b = np.take(grid, np.arange(1, W), axis=0).ravel()
    return replica, res.containment_ok, p, stat, bins, a, b


def check_poisson_marginals(template: ProcessSpec, t: float, replicas: int, pass_rate: float = 0.95,
                            workers: int | None = None) -> PropertyReport:
    """Site counts at time t inside the half-size box look i.i.d. Poisson(mu_A)."""
    jobs = [(template.replace(mode=FullSpace(), horizon=float(t), seed=rep.replica_seed(template.seed, i, "poisson")),
             i, float(t))
            for i in range(replicas)]
    out = rep.map_replicas(_poisson_replica, jobs, workers)
    clean = [o for o in out if o[1]]
    pvals = [o[2] for o in clean]
    frac = float(np.mean([p > P_THRESHOLD for p in pvals])) if pvals else 0.0
    a = np.concatenate([o[5] for o in clean]) if clean else np.zeros(0)
    b = np.concatenate([o[6] for o in clean]) if clean else np.zeros(0)
    corr = float(np.corrcoef(a, b)[0, 1]) if len(a) > 2 else math.nan
    bound = 3.0 / math.sqrt(max(len(a), 1))
    ok = frac >= pass_rate and abs(corr) <= bound
    ev = {"replicas": replicas, "excluded_flagged": replicas - len(clean), "p_threshold": P_THRESHOLD,
          "fraction_p_above": frac, "required_fraction": pass_rate, "min_p": min(pvals) if pvals else math.nan,
          "p_values": [round(p, 6) for p in pvals], "adjacent_corr": corr, "corr_bound": bound,
          "pairs": int(len(a))}
    return PropertyReport("poisson", PASS if ok and clean else FAIL, ev, {**template.to_dict(), "t": t})


# --- no A behind the front -------------------------------------------------

def _behind_front_replica(spec: ProcessSpec, replica: int, t: float, radius: float):
    res = _quiet_run(spec, snapshot_times=(t,))
    tl = res.layers[0]
    pos = res.positions_at(t)
    isA = tl.members & (tl.theta > t)
    inside = np.abs(pos).max(axis=1) <= radius
    return replica, res.containment_ok, int(np.sum(isA & inside))


def check_no_A_behind_front(template: ProcessSpec, t: float, replicas: int, shrink: float = 0.5,
                            lambda_min: float | None = None, pass_rate: float = 0.9,
                            workers: int | None = None) -> PropertyReport:
    """No A-particle inside the cube of radius shrink * lambda_min * t / sqrt(d) at time t.

    Without ``lambda_min`` the axis speeds are estimated from an independent bank.
    """
    if not 0 < shrink < 1:
        raise ValueError("shrink must lie in (0, 1)")
    d = template.d
    spec_t = _spec_for(template, t, FullSpace(), template.seed)
    if lambda_min is None:
        dirs = [Direction.axis(i, d, s) for i in range(d) for s in (1, -1)]
        n_last = max(int(t), 1)
        sched = Schedule(0.0, n_last, (n_last,))
        est = estimate_lambdas(dirs, spec_t, sched, 16, workers, bank="front-speed")
        lambda_min = min(e.point for e in est)
    radius = shrink * lambda_min * t / math.sqrt(d)
    jobs = [(spec_t.replace(seed=rep.replica_seed(template.seed, i, "behind-front")), i, float(t), radius)
            for i in range(replicas)]
    out = rep.map_replicas(_behind_front_replica, jobs, workers)
    clean = [o for o in out if o[1]]
    zero = sum(1 for o in clean if o[2] == 0)
    rate = zero / len(clean) if clean else 0.0
    ev = {"replicas": replicas, "excluded_flagged": replicas - len(clean), "lambda_min": lambda_min,
          "cube_radius": radius, "vacuous": radius < 1, "fraction_clean_interior": rate,
          "required_fraction": pass_rate, "interior_A_counts": [o[2] for o in clean]}
    return PropertyReport("front", PASS if clean and rate >= pass_rate else FAIL, ev,
                          {**spec_t.to_dict(), "t": t, "shrink": shrink})


# --- superconvolutivity ----------------------------------------------------

def h_star_horizon(s: float, c5: float) -> float:
    return c5 * kappa(s)


def _hstar_replica(spec: ProcessSpec, replica: int, u: Direction):
    res = _quiet_run(spec)
    pts = b_positions(res, spec.horizon)
    return replica, res.containment_ok, float((pts @ u.as_array()).max())


def h_star_bank(template: ProcessSpec, u: Direction, s: float, replicas: int, c5: float = 1.0,
                bank: str = "hstar", workers: int | None = None) -> tuple[np.ndarray, int]:
    """Samples of h*(s, u): extents at time s of half-space processes offset by c5 * kappa(s).

    Returns (clean samples in replica order, number of flagged replicas).
    """
    mode = HalfSpaceStart(u, c5 * kappa(s))
    jobs = [(_spec_for(template, s, mode, rep.replica_seed(template.seed, i, bank)), i, u) for i in range(replicas)]
    out = rep.map_replicas(_hstar_replica, jobs, workers)
    clean = np.array([o[2] for o in out if o[1]])
    return clean, replicas - len(clean)


def dominance_check(left: np.ndarray, h1: np.ndarray, h2: np.ndarray, grid_points: int = 201):
    """ECDF survival of ``left`` against that of h1 + h2 (all pairs), with 2-SE slack on each side.

    Returns (ok, worst margin, grid).
    """
    left, h1, h2 = (np.sort(np.asarray(a, dtype=float)) for a in (left, h1, h2))
    sums = np.sort((h1[:, None] + h2[None, :]).ravel())
    lo = min(left[0], sums[0]) - 1.0
    hi = max(left[-1], sums[-1]) + 1.0
    grid = np.linspace(lo, hi, grid_points)
    sl = 1.0 - np.searchsorted(left, grid, side="left") / len(left)
    sr = 1.0 - np.searchsorted(sums, grid, side="left") / len(sums)
    n_r = min(len(h1), len(h2))
    se_l = np.sqrt(sl * (1 - sl) / len(left))
    se_r = np.sqrt(sr * (1 - sr) / n_r)
    margin = (sl + 2 * se_l) - (sr - 2 * se_r)
    return bool(np.all(margin >= -1e-12)), float(margin.min()), grid


def check_superconvolutivity(template: ProcessSpec, u: Direction, s: float, t: float, replicas: int,
                             c5: float = 1.0, c6: float = 4.0, workers: int | None = None) -> PropertyReport:
    """P{h*(s+t+c6 kappa(t)) >= a} >= P{h1*(s) + h2*(t) >= a} up to sampling slack, for all a."""
    if s > t:
        raise ValueError("need s <= t")
    if replicas < 200:
        raise InsufficientReplicas("at least 200 replicas per bank are required")
    big = s + t + c6 * kappa(t)
    left, fl = h_star_bank(template, u, big, replicas, c5, "conv-left", workers)
    h1, f1 = h_star_bank(template, u, s, replicas, c5, "conv-h1", workers)
    h2, f2 = h_star_bank(template, u, t, replicas, c5, "conv-h2", workers)
    if min(len(left), len(h1), len(h2)) == 0:
        return PropertyReport("superconv", FLAGGED, {"flagged": [fl, f1, f2]}, template.to_dict())
    ok, worst, grid = dominance_check(left, h1, h2)
    ev = {"replicas_per_bank": replicas, "excluded_flagged": [fl, f1, f2], "left_time": big,
          "mean_left": float(left.mean()), "mean_h1": float(h1.mean()), "mean_h2": float(h2.mean()),
          "grid_points": len(grid), "worst_margin": worst}
    return PropertyReport("superconv", PASS if ok else FAIL, ev,
                          {**template.to_dict(), "u": list(u.components), "s": s, "t": t, "c5": c5, "c6": c6})


# --- positive speed --------------------------------------------------------

def _speed_replica(spec: ProcessSpec, replica: int, u: Direction, schedule: tuple, c5: float):
    """One path ensemble carrying a full-space layer and one half-space layer per schedule time."""
    pop = build_population(spec)
    layers = [default_layer(pop, designated_sites(spec, pop), name="full")]
    for n in schedule:
        li, _ = _nesting_layers(pop, u, c5 * kappa(n))
        layers.append(li)
    res = _quiet_run(spec, layers=layers, population=pop, snapshot_times=schedule)
    hs = []
    for k, n in enumerate(schedule):
        pts = b_positions(res, float(n), k + 1)
        hs.append(float((pts @ u.as_array()).max()) / n)
    g = growth_of(res, 0)
    full = b_positions(res, float(schedule[-1]), 0)
    lam_full = float((full @ u.as_array()).max()) / schedule[-1]
    return replica, res.containment_ok, hs, g.c_upper, lam_full


def check_positive_speed(template: ProcessSpec, u: Direction, schedule: Schedule, replicas: int, c5: float = 1.0,
                         workers: int | None = None) -> PropertyReport:
    """5th percentile of h*(n_last)/n_last is positive and the 95th stays below 2 sqrt(d) c_upper."""
    spec = _spec_for(template, float(schedule.last), FullSpace(), template.seed)
    jobs = [(spec.replace(seed=rep.replica_seed(template.seed, i, "speed")), i, u, schedule.times, c5)
            for i in range(replicas)]
    out = rep.map_replicas(_speed_replica, jobs, workers)
    clean = [o for o in out if o[1]]
    if not clean:
        return PropertyReport("speed", FLAGGED, {"replicas": replicas, "excluded_flagged": replicas},
                              spec.to_dict())
    last = np.array([o[2][-1] for o in clean])
    c_up = float(np.median([o[3] for o in clean]))
    p5, p95 = float(np.percentile(last, 5)), float(np.percentile(last, 95))
    d = template.d
    upper = 2 * math.sqrt(d) * c_up
    lam = np.array([o[4] for o in clean])
    lam_hat, lam_se = float(lam.mean()), float(lam.std(ddof=1) / math.sqrt(len(lam))) if len(lam) > 1 else 0.0
    ok = p5 > 0 and p95 < upper
    ev = {"replicas": replicas, "excluded_flagged": replicas - len(clean), "schedule": list(schedule.times),
          "p5": p5, "p95": p95, "c_upper_median": c_up, "upper_gate": upper,
          "lambda_full": lam_hat, "lambda_full_se": lam_se,
          "upper_consistent": lam_hat <= math.sqrt(d) * c_up + 3 * lam_se}
    return PropertyReport("speed", PASS if ok else FAIL, ev, {**spec.to_dict(), "u": list(u.components), "c5": c5})


# --- suite -----------------------------------------------------------------

PROPERTIES = ("coupling", "nesting", "poisson", "front", "superconv", "speed")


@dataclass
class SuiteOptions:
    replicas: int | None = None
    t: float | None = None
    u: Direction | None = None
    r1: float = 2.0
    r2: float = 8.0
    shrink: float = 0.5
    c5: float = 1.0
    c6: float = 4.0
    eta: float = 0.25
    n0: int = 32
    kmax: int = 3
    workers: int | None = None


def run_property(name: str, template: ProcessSpec, opt: SuiteOptions) -> PropertyReport:
    d = template.d
    u = opt.u or Direction.axis(0, d)
    T = template.horizon
    if name == "coupling":
        return check_monotone_coupling(template, opt.replicas or 100, workers=opt.workers)
    if name == "nesting":
        return check_halfspace_nesting(template, u, opt.r1, opt.r2, opt.replicas or 100, workers=opt.workers)
    if name == "poisson":
        return check_poisson_marginals(template, opt.t if opt.t is not None else 8.0, opt.replicas or 50,
                                       workers=opt.workers)
    if name == "front":
        return check_no_A_behind_front(template, opt.t if opt.t is not None else T, opt.replicas or 30,
                                       opt.shrink, workers=opt.workers)
    if name == "superconv":
        s = opt.t if opt.t is not None else 40.0
        return check_superconvolutivity(template, u, s, s, max(opt.replicas or 200, 200), opt.c5, opt.c6,
                                        workers=opt.workers)
    if name == "speed":
        sched = geometric_schedule(opt.eta, opt.n0, opt.kmax)
        return check_positive_speed(template, u, sched, opt.replicas or 30, opt.c5, workers=opt.workers)
    raise KeyError(name)


def run_suite(names: Sequence[str], template: ProcessSpec, opt: SuiteOptions | None = None) -> list[PropertyReport]:
    opt = opt or SuiteOptions()
    unknown = [n for n in names if n not in PROPERTIES]
    if unknown:
        raise KeyError(f"unknown properties: {unknown}")
    reports = [run_property(n, template, opt) for n in names]
    return sorted(reports, key=lambda r: r.property_id)


def suite_text(reports: Sequence[PropertyReport]) -> str:
    return "\n".join(r.text() for r in reports) + "\n"


def suite_csv(reports: Sequence[PropertyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["property", "verdict", "summary"])
    for r in reports:
        summary = ";".join(f"{k}={v}" for k, v in r.evidence.items() if not isinstance(v, (list, dict)))
        w.writerow([r.property_id, r.verdict, summary])
    return buf.getvalue()
