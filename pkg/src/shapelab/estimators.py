"""Speed, growth and shape estimation from replica banks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import replicas as rep
from .geometry import Direction
from .observables import radii_series
from .shape import ShapeEstimate, build_shape
from .simulator import FullSpace, ProcessSpec, run

RATIO_TOL = 1e-9


class ScheduleInfeasible(ValueError):
    pass


class AllReplicasFlagged(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    eta: float
    n0: int
    times: tuple[int, ...]

    @property
    def last(self) -> int:
        return self.times[-1]


def geometric_schedule(eta: float, n0: int, k_max: int) -> Schedule:
    """n_k = floor(n0 (1+eta)^k) for k = 0..k_max, duplicates removed."""
    if not eta > 0 or n0 < 1:
        raise ScheduleInfeasible("need eta > 0 and n0 >= 1")
    if n0 * eta < 2:
        raise ScheduleInfeasible(f"n0*eta = {n0 * eta:g} < 2")
    if k_max < 1:
        raise ScheduleInfeasible("k_max must be >= 1")
    times: list[int] = []
    for k in range(k_max + 1):
        # the small nudge keeps exact products like 20*1.1 from rounding down
        n = math.floor(n0 * (1 + eta) ** k + 1e-9)
        if not times or n != times[-1]:
            times.append(n)
    for a, b in zip(times, times[1:]):
        if not (1 < b / a <= 1 + eta + RATIO_TOL):
            raise ScheduleInfeasible(f"ratio {b}/{a} outside (1, 1+eta]")
    return Schedule(float(eta), int(n0), tuple(times))


@dataclass
class LambdaEstimate:
    u: Direction
    point: float
    stderr: float
    samples: list[tuple[int, float, float]]  # (replica, time, extent/time)
    flagged_replicas: list[int]
    n_last: float
    replicas_used: int
    cauchy_gap: float = math.nan  # |mean H(T)/T - mean H(T/2)/(T/2)|
    extra: dict = field(default_factory=dict)

    @property
    def cauchy_ok(self) -> bool:
        return self.cauchy_gap < 0.1 * abs(self.point)


@dataclass
class ReplicaExtents:
    replica: int
    seed: int
    ok: bool
    times: np.ndarray
    extents: np.ndarray  # (len(times), n_dirs)
    n_events: int


def _extent_replica(spec: ProcessSpec, replica: int, times: tuple, U: np.ndarray) -> ReplicaExtents:
    import warnings
    from .observables import b_positions

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run(spec, snapshot_times=times)
    ext = np.empty((len(times), len(U)))
    for i, t in enumerate(times):
        pts = b_positions(res, t)
        ext[i] = (pts @ U.T).max(axis=0)
    return ReplicaExtents(replica, spec.seed, res.containment_ok, np.asarray(times, float), ext, res.n_events)


def extent_bank(template: ProcessSpec, directions: Sequence[Direction], times: Sequence[float], replicas: int,
                bank: str = "lambda", workers: int | None = None) -> list[ReplicaExtents]:
    """FullSpace replicas of ``template`` with extents H(t, u) at the given times."""
    U = np.array([u.components for u in directions], dtype=float)
    times = tuple(sorted(set(float(t) for t in times)))
    jobs = []
    for i in range(replicas):
        spec = template.replace(mode=FullSpace(), seed=rep.replica_seed(template.seed, i, bank))
        jobs.append((spec, i, times, U))
    out = rep.map_replicas(_extent_replica, jobs, workers)
    return sorted(out, key=lambda r: r.replica)


def lambdas_from_bank(bank: Sequence[ReplicaExtents], directions: Sequence[Direction], schedule: Schedule,
                      horizon: float) -> list[LambdaEstimate]:
    bank = sorted(bank, key=lambda r: r.replica)
    good = [r for r in bank if r.ok]
    flagged = [r.replica for r in bank if not r.ok]
    if not good:
        raise AllReplicasFlagged(f"all {len(bank)} replicas were flagged")
    out = []
    n_last = float(schedule.last)
    for j, u in enumerate(directions):
        samples = []
        last, full, half = [], [], []
        for r in good:
            times = list(r.times)
            for t in schedule.times:
                samples.append((r.replica, float(t), float(r.extents[times.index(float(t)), j] / t)))
            last.append(r.extents[times.index(n_last), j] / n_last)
            full.append(r.extents[times.index(float(horizon)), j] / horizon)
            half.append(r.extents[times.index(horizon / 2), j] / (horizon / 2))
        last = np.array(last)
        point = float(math.fsum(last) / len(last))
        sd = float(np.std(last, ddof=1)) if len(last) > 1 else 0.0
        gap = abs(math.fsum(full) / len(full) - math.fsum(half) / len(half))
        out.append(LambdaEstimate(u, point, sd / math.sqrt(len(last)), samples, flagged, n_last, len(good), gap))
    return out


def estimate_lambdas(directions: Sequence[Direction], template: ProcessSpec, schedule: Schedule, replicas: int,
                     workers: int | None = None, bank: str = "lambda") -> list[LambdaEstimate]:
    """Directional speeds from one shared bank of FullSpace replicas.

    The point estimate is the replica mean of H(n_last, u) / n_last; the
    Cauchy gap compares H(T)/T with H(T/2)/(T/2) on the same replicas.
    """
    if replicas < 8:
        raise ValueError("need at least 8 replicas")
    if template.horizon < schedule.last:
        raise ValueError("horizon shorter than the last schedule time")
    T = float(template.horizon)
    times = list(schedule.times) + [T, T / 2]
    b = extent_bank(template, directions, times, replicas, bank, workers)
    return lambdas_from_bank(b, directions, schedule, T)


def estimate_lambda(u: Direction, template: ProcessSpec, schedule: Schedule, replicas: int,
                    workers: int | None = None) -> LambdaEstimate:
    return estimate_lambdas([u], template, schedule, replicas, workers)[0]


def shape_from_estimates(estimates: Sequence[LambdaEstimate]) -> ShapeEstimate:
    shape = build_shape([e.u for e in estimates], [e.point for e in estimates], [e.stderr for e in estimates])
    shape.meta["replicas_used"] = [e.replicas_used for e in estimates]
    return shape


# --- growth constants ------------------------------------------------------

@dataclass
class GrowthFit:
    c_lower: float
    c_upper: float
    r_squared: float
    slope: float
    n_points: int


def growth_fit(times: Sequence[float], r_out: Sequence[float], r_in: Sequence[float], horizon: float,
               min_points: int = 10) -> GrowthFit:
    """Linear-growth summary of radius series on t >= horizon/4.

    c_upper = max r_out/t, c_lower = min r_in/t, and r_squared is that of the
    least-squares line r_out ~ a + b t. A series with no spread counts as a
    perfect fit.
    """
    t = np.asarray(times, dtype=float)
    ro = np.asarray(r_out, dtype=float)
    ri = np.asarray(r_in, dtype=float)
    keep = (t >= horizon / 4) & (t > 0)
    t, ro, ri = t[keep], ro[keep], ri[keep]
    if len(t) < min_points:
        raise ValueError(f"need >= {min_points} time points past burn-in, got {len(t)}")
    c_upper = float((ro / t).max())
    c_lower = float((ri / t).min())
    b, a = np.polyfit(t, ro, 1)
    resid = ro - (a + b * t)
    ss_tot = float(((ro - ro.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return GrowthFit(c_lower, c_upper, r2, float(b), len(t))


def growth_of(result, layer: int = 0, n_points: int = 40) -> GrowthFit:
    """growth_fit on an evenly spaced grid over [T/4, T] for one run."""
    T = result.spec.horizon
    times = np.linspace(T / 4, T, n_points)
    tl = result.layers[layer]
    r_out, r_in = radii_series(tl.visited_sites, tl.visited_times, times)
    return growth_fit(times, r_out, r_in, T)
