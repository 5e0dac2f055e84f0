"""Process construction and the coupled event-driven run.

A run evolves one ensemble of particle paths and tracks any number of *type
layers* on top of it. Each layer is one process variant (original, full-space,
half-space, restarted): a set of member particles, a set of initial
B-particles and a switch-on time. Because all layers share the paths, order
relations between them can be checked particle by particle.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from . import _kernels, reference, streams
from .geometry import Direction, HalfSpace, LatticePoint, cube_sites, nearest_site
from .streams import ParticleId

log = logging.getLogger(__name__)

INF = math.inf
DEFAULT_C_GUARD = 4.0
WINDOW_EVENTS = 1 << 20


class SimulationError(RuntimeError):
    pass


class NoOccupiedSite(SimulationError):
    pass


class ContainmentBreach(UserWarning):
    pass


# --- process modes ---------------------------------------------------------

@dataclass(frozen=True)
class Original:
    """Poisson field plus explicitly added B-particles (default: one at the origin)."""

    added_B: tuple[tuple[LatticePoint, int], ...] | None = None

    def resolved(self, d: int) -> tuple[tuple[LatticePoint, int], ...]:
        if self.added_B is None:
            return (((0,) * d, 1),)
        return tuple((tuple(int(c) for c in x), int(n)) for x, n in self.added_B)


@dataclass(frozen=True)
class FullSpace:
    pass


@dataclass(frozen=True)
class HalfSpaceStart:
    u: Direction
    r: float

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("half-space starts need r >= 0; use StartedAt for r < 0")

    @property
    def restriction(self) -> HalfSpace:
        return HalfSpace(self.u, -self.r)


@dataclass(frozen=True)
class StartedAt:
    """Types reset at time ``t``: B at the eligible occupied site nearest to ``x``."""

    x: LatticePoint
    t: float
    base: HalfSpace | None = None


ProcessMode = Union[Original, FullSpace, HalfSpaceStart, StartedAt]


def restriction_of(mode: ProcessMode) -> HalfSpace | None:
    if isinstance(mode, HalfSpaceStart):
        return mode.restriction
    if isinstance(mode, StartedAt):
        return mode.base
    return None


def guard_margin(horizon: float) -> int:
    return 10 * math.ceil(math.sqrt(max(horizon, 0.0)))


def guard_box(horizon: float, c_guard: float = DEFAULT_C_GUARD) -> int:
    """Smallest initial box radius the guard rule accepts for ``horizon``."""
    return math.ceil(c_guard * horizon) + guard_margin(horizon)


@dataclass(frozen=True)
class ProcessSpec:
    d: int
    mu_A: float
    D: float
    horizon: float
    init_box_L: int
    mode: ProcessMode = field(default_factory=FullSpace)
    seed: int = 0
    c_guard: float = DEFAULT_C_GUARD

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if not self.mu_A > 0:
            raise ValueError("mu_A must be positive")
        if not self.D > 0:
            raise ValueError("jump rate D must be positive")
        if not self.horizon >= 0:
            raise ValueError("horizon must be nonnegative")
        if self.init_box_L < 0:
            raise ValueError("init_box_L must be nonnegative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        u = getattr(self.mode, "u", None) or getattr(getattr(self.mode, "base", None), "u", None)
        if u is not None and u.d != self.d:
            raise ValueError("direction dimension does not match d")

    @property
    def guard_ok(self) -> bool:
        return self.init_box_L >= guard_box(self.horizon, self.c_guard)

    @property
    def breach_threshold(self) -> int:
        """B-particles at sup-norm >= this value sit in the guard band."""
        return self.init_box_L - guard_margin(self.horizon) + 1

    def replace(self, **kw) -> "ProcessSpec":
        return ProcessSpec(**{**self.__dict__, **kw})

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "mu_A": self.mu_A,
            "D": self.D,
            "horizon": self.horizon,
            "init_box_L": self.init_box_L,
            "mode": mode_to_dict(self.mode),
            "seed": str(self.seed),
            "c_guard": self.c_guard,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def mode_to_dict(mode: ProcessMode) -> dict:
    if isinstance(mode, Original):
        added = None if mode.added_B is None else [[list(x), n] for x, n in mode.added_B]
        return {"kind": "original", "added_B": added}
    if isinstance(mode, FullSpace):
        return {"kind": "full"}
    if isinstance(mode, HalfSpaceStart):
        return {"kind": "half", "u": list(mode.u.components), "r": mode.r}
    if isinstance(mode, StartedAt):
        base = None if mode.base is None else {"u": list(mode.base.u.components), "c": mode.base.c}
        return {"kind": "started_at", "x": list(mode.x), "t": mode.t, "base": base}
    raise TypeError(mode)


def mode_from_dict(obj: dict) -> ProcessMode:
    kind = obj["kind"]
    if kind == "original":
        added = obj.get("added_B")
        return Original(None if added is None else tuple((tuple(x), n) for x, n in added))
    if kind == "full":
        return FullSpace()
    if kind == "half":
        return HalfSpaceStart(Direction(tuple(obj["u"])), float(obj["r"]))
    if kind == "started_at":
        b = obj.get("base")
        base = None if b is None else HalfSpace(Direction(tuple(b["u"])), float(b["c"]))
        return StartedAt(tuple(obj["x"]), float(obj["t"]), base)
    raise ValueError(f"unknown mode {kind!r}")


# --- population ------------------------------------------------------------

class Population:
    """All particles of a run, ordered by ParticleId (origin lex, then index).

    ``ordinal`` positions in this order are what the engines index by; the
    order is preserved under restriction, so coupled processes break ties the
    same way.
    """

    def __init__(self, d: int, origins: np.ndarray, index: np.ndarray, added: np.ndarray, seed: int):
        order = np.lexsort((index,) + tuple(origins[:, j] for j in range(d - 1, -1, -1)))
        self.d = d
        self.origins = np.ascontiguousarray(origins[order], dtype=np.int64).reshape(-1, d)
        self.index = np.ascontiguousarray(index[order], dtype=np.int64)
        self.added = np.ascontiguousarray(added[order], dtype=bool)
        self.seed = seed
        self.keys = _kernels.particle_keys(
            np.uint64(streams.path_seed(seed)), self.origins, self.index
        )

    def __len__(self):
        return len(self.index)

    def pid(self, p: int) -> ParticleId:
        return ParticleId(tuple(int(c) for c in self.origins[p]), int(self.index[p]))

    @cached_property
    def pids(self) -> list[ParticleId]:
        return [self.pid(p) for p in range(len(self))]

    @cached_property
    def _lookup(self) -> dict[ParticleId, int]:
        return {pid: p for p, pid in enumerate(self.pids)}

    def ordinal(self, pid: ParticleId) -> int:
        return self._lookup[ParticleId(tuple(pid.origin), pid.index)]

    def ordinals(self, pids) -> np.ndarray:
        return np.array([self.ordinal(p) for p in pids], dtype=np.int64)

    def at_sites(self, sites, positions: np.ndarray | None = None) -> np.ndarray:
        """Ordinals of particles located at any of ``sites``."""
        pos = self.origins if positions is None else positions
        sites = np.asarray(list(sites), dtype=np.int64).reshape(-1, self.d)
        mask = np.zeros(len(self), dtype=bool)
        for s in sites:
            mask |= np.all(pos == s, axis=1)
        return np.flatnonzero(mask)

    def restriction_mask(self, h: HalfSpace | None) -> np.ndarray:
        if h is None:
            return np.ones(len(self), dtype=bool)
        return h.mask(self.origins)


def field_counts(spec: ProcessSpec, sites: np.ndarray) -> np.ndarray:
    return _kernels.site_counts(np.uint64(streams.init_seed(spec.seed)), sites, float(spec.mu_A))


def box_sites(spec: ProcessSpec) -> np.ndarray:
    sites = cube_sites(spec.init_box_L, spec.d)
    h = restriction_of(spec.mode)
    if h is not None:
        sites = sites[h.mask(sites)]
    return sites


def build_population(spec: ProcessSpec, counts: Mapping[LatticePoint, int] | None = None) -> Population:
    """Place N_A(x, 0-) particles on every site of the (restricted) initial box.

    ``counts`` overrides the Poisson field (sites absent from it are empty);
    intended for hand-built instances.
    """
    sites = box_sites(spec)
    if counts is None:
        n = field_counts(spec, sites)
    else:
        n = np.array([int(counts.get(tuple(int(c) for c in s), 0)) for s in sites], dtype=np.int64)
    origins = np.repeat(sites, n, axis=0)
    index = np.concatenate([np.arange(k, dtype=np.int64) for k in n]) if len(n) else np.zeros(0, np.int64)
    added = np.zeros(len(index), dtype=bool)
    if isinstance(spec.mode, Original):
        base = {tuple(int(c) for c in s): int(k) for s, k in zip(sites, n) if k}
        extra_o, extra_i = [], []
        for x, cnt in spec.mode.resolved(spec.d):
            if len(x) != spec.d or cnt < 1:
                raise ValueError(f"bad added_B entry {(x, cnt)}")
            first = base.get(x, 0)
            for j in range(cnt):
                extra_o.append(x)
                extra_i.append(first + j)
            base[x] = first + cnt
        origins = np.concatenate([origins.reshape(-1, spec.d), np.array(extra_o, dtype=np.int64).reshape(-1, spec.d)])
        index = np.concatenate([index, np.array(extra_i, dtype=np.int64)])
        added = np.concatenate([added, np.ones(len(extra_i), dtype=bool)])
    return Population(spec.d, origins.reshape(-1, spec.d), index, added, spec.seed)


# --- states and layers -----------------------------------------------------

class WorldState:
    """Positions of every particle at time ``now``, with sparse occupancy views."""

    def __init__(self, population: Population, positions: np.ndarray, now: float, containment_ok: bool = True):
        self.population = population
        self.positions_array = positions
        self.now = now
        self.containment_ok = containment_ok

    @cached_property
    def positions(self) -> dict[ParticleId, LatticePoint]:
        return {pid: tuple(int(c) for c in x) for pid, x in zip(self.population.pids, self.positions_array)}

    @cached_property
    def occupancy_ordinals(self) -> dict[LatticePoint, list[int]]:
        occ: dict[LatticePoint, list[int]] = {}
        for p, x in enumerate(self.positions_array.tolist()):
            occ.setdefault(tuple(x), []).append(p)
        return occ

    @property
    def occupancy(self) -> dict[LatticePoint, set[ParticleId]]:
        pids = self.population.pids
        return {s: {pids[p] for p in ps} for s, ps in self.occupancy_ordinals.items()}

    def particle_count(self) -> int:
        return len(self.positions_array)


@dataclass
class LayerInit:
    """Initial condition of one type layer.

    ``initial_B`` holds particle ordinals; ``members`` (None: every particle)
    marks which particles belong to this layer's process at all.
    """

    initial_B: np.ndarray
    start: float = 0.0
    members: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.initial_B = np.asarray(self.initial_B, dtype=np.int64).ravel()

    def member_mask(self, n: int) -> np.ndarray:
        if self.members is None:
            return np.ones(n, dtype=bool)
        return np.asarray(self.members, dtype=bool)

    def b_mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.initial_B] = True
        return m

    @classmethod
    def from_pids(cls, population: Population, pids, **kw) -> "LayerInit":
        return cls(population.ordinals(pids), **kw)


@dataclass
class TypeTimeline:
    layer_id: int
    name: str
    initial_B: np.ndarray
    start: float
    members: np.ndarray
    theta: np.ndarray
    visited_sites: np.ndarray
    visited_times: np.ndarray

    def theta_of(self, p: int) -> float:
        return float(self.theta[p])

    @cached_property
    def visited_B(self) -> dict[LatticePoint, float]:
        return {tuple(int(c) for c in s): float(t) for s, t in zip(self.visited_sites, self.visited_times)}

    def b_tilde(self, t: float) -> np.ndarray:
        """Sites visited by a B-particle during [0, t], as an (n, d) array."""
        return self.visited_sites[self.visited_times <= t]

    def is_B(self, t: float) -> np.ndarray:
        return self.theta <= t


def _sparse_visited(visited: np.ndarray, R: int, d: int):
    idx = np.flatnonzero(np.isfinite(visited))
    W = 2 * R + 1
    coords = np.empty((len(idx), d), dtype=np.int64)
    rem = idx.copy()
    for j in range(d - 1, -1, -1):
        coords[:, j] = rem % W - R
        rem //= W
    return coords, visited[idx]


@dataclass
class RunResult:
    spec: ProcessSpec
    population: Population
    layers: list[TypeTimeline]
    final: WorldState
    n_events: int
    containment_ok: bool
    snapshots: dict[float, np.ndarray]
    designated: list[LatticePoint] = field(default_factory=list)

    def positions_at(self, t: float) -> np.ndarray:
        if t in self.snapshots:
            return self.snapshots[t]
        if t > self.spec.horizon:
            raise ValueError("query beyond horizon")
        pos = _kernels.replay_positions(self.population.origins, self.population.keys, float(self.spec.D), float(t))
        self.snapshots[t] = pos
        return pos

    def state_at(self, t: float) -> WorldState:
        return WorldState(self.population, self.positions_at(t), t, self.containment_ok)

    @property
    def layer(self) -> TypeTimeline:
        return self.layers[0]


# --- building and running --------------------------------------------------

def designated_sites(spec: ProcessSpec, population: Population) -> list[LatticePoint]:
    """Sites whose particles are B at time 0 (empty for StartedAt)."""
    mode = spec.mode
    if isinstance(mode, Original):
        return [x for x, _ in mode.resolved(spec.d)]
    if isinstance(mode, StartedAt):
        return []
    if len(population) == 0:
        raise NoOccupiedSite("no occupied site in the initial box")
    occupied = np.unique(population.origins, axis=0)
    i = nearest_site(occupied, (0,) * spec.d)
    return [tuple(int(c) for c in occupied[i])]


def build_initial_state(spec: ProcessSpec, counts: Mapping[LatticePoint, int] | None = None):
    """Initial WorldState and the designated B sites for ``spec.mode``."""
    pop = build_population(spec, counts)
    designated = designated_sites(spec, pop)
    return WorldState(pop, pop.origins.copy(), 0.0, spec.guard_ok), designated


def default_layer(population: Population, designated, start: float = 0.0, members=None, name="") -> LayerInit:
    """Layer whose B-particles are all particles at the designated sites."""
    at = population.at_sites(designated)
    if members is not None:
        at = at[np.asarray(members, dtype=bool)[at]]
    return LayerInit(at, start=start, members=members, name=name)


def reset_types_at(state: WorldState, layer: LayerInit | TypeTimeline | None, x, restriction: HalfSpace | None = None,
                   name: str = "") -> LayerInit:
    """Restart at ``state.now``: B at the eligible occupied site nearest to ``x``.

    Eligible particles are members of ``layer`` (all particles if None) whose
    origin lies in ``restriction``. Everything else eligible is A from now on.
    """
    pop = state.population
    n = len(pop)
    eligible = np.ones(n, dtype=bool) if layer is None else (
        layer.member_mask(n) if isinstance(layer, LayerInit) else np.asarray(layer.members, dtype=bool))
    eligible = eligible & pop.restriction_mask(restriction)
    cand = np.flatnonzero(eligible)
    if len(cand) == 0:
        raise NoOccupiedSite("no eligible particle")
    pos = state.positions_array[cand]
    i = nearest_site(pos, x)
    site = pos[i]
    chosen = cand[np.all(pos == site, axis=1)]
    return LayerInit(chosen, start=state.now, members=eligible, name=name or f"reset@{state.now}")


def expected_event_count(spec: ProcessSpec) -> float:
    """Mean number of jump events: D * horizon * (mean particle count)."""
    n_sites = len(box_sites(spec))
    extra = 0
    if isinstance(spec.mode, Original):
        extra = sum(c for _, c in spec.mode.resolved(spec.d))
    return spec.D * spec.horizon * (spec.mu_A * n_sites + extra)


def _grid_radius(spec: ProcessSpec, population: Population, extra_sites=()) -> int:
    r = spec.init_box_L
    if len(population):
        r = max(r, int(np.abs(population.origins).max()))
    for s in extra_sites:
        r = max(r, max(abs(int(c)) for c in s))
    pad = int(math.ceil(8.0 * math.sqrt(spec.D * spec.horizon))) + 8
    return r + pad


def _timelines(population, inits, theta, visited_list):
    out = []
    n = len(population)
    for l, li in enumerate(inits):
        sites, times = visited_list[l]
        out.append(TypeTimeline(l, li.name, li.initial_B, li.start, li.member_mask(n), theta[l], sites, times))
    return out


def run(
    spec: ProcessSpec,
    layers: Sequence[LayerInit] | None = None,
    listeners: Sequence[Callable] = (),
    snapshot_times: Sequence[float] = (),
    population: Population | None = None,
    engine: str = "auto",
    counts: Mapping[LatticePoint, int] | None = None,
) -> RunResult:
    """Run ``spec`` to its horizon, tracking every layer on one path ensemble.

    Without explicit layers the mode's own layer is used (for StartedAt the
    reset is resolved first by replaying positions to the restart time).
    ``engine`` is "fast" (compiled), "reference" (pure Python, supports
    per-event listeners) or "auto".
    """
    if population is None:
        population = build_population(spec, counts)
    n = len(population)
    designated: list = []
    if layers is None:
        if isinstance(spec.mode, StartedAt):
            mode = spec.mode
            if mode.t > spec.horizon:
                raise ValueError("restart time beyond horizon")
            pos = _kernels.replay_positions(population.origins, population.keys, float(spec.D), float(mode.t))
            li = reset_types_at(WorldState(population, pos, mode.t), None, mode.x, mode.base)
            designated = [tuple(int(c) for c in pos[li.initial_B[0]])]
            layers = [li]
        else:
            designated = designated_sites(spec, population)
            layers = [default_layer(population, designated)]
    if not layers:
        raise ValueError("at least one layer is required")
    for li in layers:
        if len(li.initial_B) and (li.initial_B.min() < 0 or li.initial_B.max() >= n):
            raise ValueError("initial_B refers to unknown particles")
    snapshot_times = sorted(set(float(t) for t in snapshot_times) | {float(spec.horizon)})
    if snapshot_times[-1] > spec.horizon:
        raise ValueError("snapshot beyond horizon")

    if engine == "auto":
        engine = "reference" if listeners else "fast"
    if engine == "fast":
        if listeners:
            raise ValueError("per-event listeners need the reference engine")
        theta, visited, snaps, n_events, breach = _run_fast(spec, population, layers, snapshot_times)
    elif engine == "reference":
        theta, visited, snaps, n_events, breach = _run_reference(spec, population, layers, snapshot_times, listeners)
    else:
        raise ValueError(f"unknown engine {engine!r}")

    ok = spec.guard_ok and not breach
    if not ok:
        why = "initial box below the guard rule" if not spec.guard_ok else "B-particle entered the guard band"
        warnings.warn(f"containment flag raised: {why}", ContainmentBreach, stacklevel=2)
    final = WorldState(population, snaps[float(spec.horizon)], float(spec.horizon), ok)
    return RunResult(spec, population, _timelines(population, layers, theta, visited), final, n_events, ok,
                     snaps, designated)


def _run_fast(spec, population, layers, snapshot_times):
    n = len(population)
    member = np.array([li.member_mask(n) for li in layers], dtype=np.bool_).reshape(len(layers), n)
    init_B = np.array([li.b_mask(n) for li in layers], dtype=np.bool_).reshape(len(layers), n)
    start = np.array([li.start for li in layers], dtype=np.float64)
    snap = np.array(snapshot_times, dtype=np.float64)
    R = _grid_radius(spec, population)
    window = max(spec.horizon, 1e-9) if n == 0 else max(WINDOW_EVENTS / (n * spec.D), 1e-6)
    while True:
        status, theta, visited, snaps, n_events, breach = _kernels.simulate(
            population.origins, population.keys, float(spec.D), float(spec.horizon), R,
            spec.breach_threshold, member, init_B, start, snap, float(window))
        if status == _kernels.OK:
            break
        log.info("grid overflow at R=%d, doubling", R)
        R *= 2
    vis = [_sparse_visited(visited[l], R, spec.d) for l in range(len(layers))]
    snapd = {t: snaps[i].astype(np.int64) for i, t in enumerate(snapshot_times)}
    return theta, vis, snapd, int(n_events), bool(breach)


def _run_reference(spec, population, layers, snapshot_times, listeners, events=None):
    n = len(population)
    members = [li.member_mask(n) for li in layers]
    init_B = [li.b_mask(n) for li in layers]
    start = [li.start for li in layers]
    origins = population.origins.tolist()
    if events is None:
        events = reference.stream_events(origins, [int(k) for k in population.keys], spec.D, spec.horizon)
    eng, snaps = reference.run_events(origins, events, members, init_B, start, spec.horizon,
                                      spec.breach_threshold, snapshot_times, listeners)
    theta = np.array(eng.theta, dtype=float).reshape(len(layers), n)
    vis = []
    for l in range(len(layers)):
        items = sorted(eng.visited[l].items())
        sites = np.array([s for s, _ in items], dtype=np.int64).reshape(-1, spec.d)
        times = np.array([t for _, t in items], dtype=float)
        vis.append((sites, times))
    snapd = {t: np.array(v, dtype=np.int64).reshape(-1, spec.d) for t, v in snaps.items()}
    return theta, vis, snapd, eng.n_events, eng.breach


def run_event_log(spec: ProcessSpec, population: Population, events, layers: Sequence[LayerInit],
                  snapshot_times: Sequence[float] = (), listeners=()) -> RunResult:
    """Run the reference engine on a hand-written event sequence instead of the streams."""
    snapshot_times = sorted(set(float(t) for t in snapshot_times) | {float(spec.horizon)})
    theta, vis, snaps, n_events, breach = _run_reference(spec, population, layers, snapshot_times, listeners, events)
    ok = spec.guard_ok and not breach
    final = WorldState(population, snaps[float(spec.horizon)], float(spec.horizon), ok)
    return RunResult(spec, population, _timelines(population, layers, theta, vis), final, n_events, ok, snaps)
