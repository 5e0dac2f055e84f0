"""Read-only functionals of a finished run.

Most functions take a ``RunResult`` plus a layer index; the ``*_of`` helpers
work on raw point arrays so hand-built configurations can be tested directly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Cylinder, Direction, LatticePoint, perp_component, MEMBERSHIP_TOL, ORTHO_TOL
from .simulator import RunResult

TIE_TOL = 1e-9


class NoBParticles(ValueError):
    pass


@dataclass
class ArgmaxRecord:
    site: LatticePoint
    h_star: float
    m_star: tuple[float, ...]


@dataclass
class FrontRecord:
    t: float
    extents: dict[int, float] = field(default_factory=dict)
    undefined: set[int] = field(default_factory=set)


def kappa(s: float) -> float:
    """Offset scale sqrt((s+1) log(s+1)) used for half-space starts."""
    if s < 0:
        raise ValueError("kappa needs s >= 0")
    return math.sqrt((s + 1.0) * math.log1p(s))


def b_positions(result: RunResult, t: float, layer: int = 0) -> np.ndarray:
    """Positions at time ``t`` of the layer's B-particles (with repeats)."""
    tl = result.layers[layer]
    mask = tl.members & (tl.theta <= t)
    return result.positions_at(t)[mask]


def extent_of(points: np.ndarray, u: Direction) -> float:
    points = np.asarray(points)
    if len(points) == 0:
        raise NoBParticles("no B-particle present")
    return float((points @ u.as_array()).max())


def argmax_of(points: np.ndarray, u: Direction) -> ArgmaxRecord:
    """Lex-least B site among those maximizing <x,u> (within TIE_TOL)."""
    points = np.unique(np.asarray(points, dtype=np.int64), axis=0)
    if len(points) == 0:
        raise NoBParticles("no B-particle present")
    proj = points @ u.as_array()
    top = points[proj >= proj.max() - TIE_TOL]
    site = tuple(int(c) for c in top[np.lexsort(top.T[::-1])[0]])
    h = math.fsum(a * b for a, b in zip(site, u.components))
    return ArgmaxRecord(site, h, perp_component(site, u))


def directional_extent(result: RunResult, t: float, u: Direction, layer: int = 0) -> float:
    """max <x,u> over sites holding a B-particle at time t."""
    return extent_of(b_positions(result, t, layer), u)


def argmax_site(result: RunResult, s: float, u: Direction, layer: int = 0) -> ArgmaxRecord:
    return argmax_of(b_positions(result, s, layer), u)


def front_records(result: RunResult, times: Sequence[float], directions: Sequence[Direction],
                  layer: int = 0) -> list[FrontRecord]:
    out = []
    U = np.array([u.components for u in directions], dtype=float)
    for t in times:
        rec = FrontRecord(float(t))
        pts = b_positions(result, t, layer)
        if len(pts) == 0:
            rec.undefined = set(range(len(directions)))
        else:
            ext = (pts @ U.T).max(axis=0)
            rec.extents = {i: float(e) for i, e in enumerate(ext)}
        out.append(rec)
    return out


class FattenedSet:
    """B(t) = B~(t) + [-1/2, 1/2]^d, represented by its lattice core."""

    def __init__(self, sites: np.ndarray):
        self.sites = np.asarray(sites, dtype=np.int64)
        self._set = {tuple(int(c) for c in s) for s in self.sites}

    def __contains__(self, point) -> bool:
        # sup-distance <= 1/2 to some core site
        opts = []
        for c in point:
            lo, hi = math.ceil(c - 0.5), math.floor(c + 0.5)
            opts.append(range(lo, hi + 1))
        return any(x in self._set for x in itertools.product(*opts))

    def __len__(self):
        return len(self._set)


def b_sets(result: RunResult, t: float, layer: int = 0) -> tuple[np.ndarray, FattenedSet]:
    tilde = result.layers[layer].b_tilde(t)
    return tilde, FattenedSet(tilde)


def count_fields(result: RunResult, t: float, layer: int = 0) -> tuple[dict, dict]:
    """N_A(., t) and N_B(., t) as sparse site -> count maps (layer members only)."""
    tl = result.layers[layer]
    pos = result.positions_at(t)[tl.members]
    isB = (tl.theta <= t)[tl.members]
    nA: dict[LatticePoint, int] = {}
    nB: dict[LatticePoint, int] = {}
    for x, b in zip(pos.tolist(), isB.tolist()):
        target = nB if b else nA
        x = tuple(x)
        target[x] = target.get(x, 0) + 1
    return nA, nB


def cylinder_hit_of(points: np.ndarray, g: Cylinder) -> bool:
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return False
    u = g.u.as_array()
    proj = points @ u
    ok = proj >= g.alpha - MEMBERSHIP_TOL
    if not math.isinf(g.beta):
        perp = points - proj[:, None] * u[None, :]
        ok &= np.abs(perp - np.asarray(g.gamma)[None, :]).max(axis=1) <= g.beta + ORTHO_TOL
    return bool(ok.any())


def cylinder_hit(result: RunResult, g: Cylinder, t: float, layer: int = 0) -> bool:
    """Is some B-particle inside the cylinder at time t?"""
    return cylinder_hit_of(b_positions(result, t, layer), g)


# --- radii of the visited set ----------------------------------------------

def radii_series(visited_sites: np.ndarray, visited_times: np.ndarray, times: Sequence[float]):
    """Outer sup-norm radius of B~(t) and the largest fully visited cube radius.

    Returns two arrays aligned with ``times``. The inner radius is the largest
    k with every site of [-k, k]^d visited by t (0 when none qualifies).
    """
    times = np.asarray(times, dtype=float)
    sites = np.asarray(visited_sites, dtype=np.int64)
    vt = np.asarray(visited_times, dtype=float)
    if len(sites) == 0:
        z = np.zeros(len(times))
        return z, z.copy()
    norm = np.abs(sites).max(axis=1)
    order = np.argsort(vt, kind="stable")
    running = np.maximum.accumulate(norm[order])
    idx = np.searchsorted(vt[order], times, side="right")
    outer = np.where(idx > 0, running[np.maximum(idx - 1, 0)], 0).astype(float)

    d = sites.shape[1]
    K = int(norm.max())
    # shell_time[k]: time by which shell k is completely visited (inf if never)
    shell_size = np.array([(2 * k + 1) ** d - (2 * k - 1) ** d if k else 1 for k in range(K + 1)])
    seen = np.bincount(norm, minlength=K + 1)
    shell_time = np.full(K + 1, np.inf)
    worst = np.full(K + 1, -np.inf)
    np.maximum.at(worst, norm, vt)
    full = seen == shell_size
    shell_time[full] = worst[full]
    cube_time = np.maximum.accumulate(shell_time)
    inner = np.zeros(len(times))
    for i, t in enumerate(times):
        k = np.searchsorted(cube_time, t, side="right") - 1
        inner[i] = max(k, 0)
    return outer, inner
