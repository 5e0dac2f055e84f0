"""Pure-Python event engine.

Slow but transparent: a heap of per-particle clocks over a sparse occupancy
dict. It serves as the independent route against which the compiled engine is
checked, drives per-event listeners, and replays hand-written event logs.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import streams

INF = math.inf


@dataclass(frozen=True)
class JumpEvent:
    time: float
    who: int  # particle ordinal
    src: tuple[int, ...]
    dst: tuple[int, ...]


class EngineView:
    """Read-only view handed to listeners after every event."""

    def __init__(self, engine: "ReferenceEngine"):
        self._e = engine

    @property
    def now(self) -> float:
        return self._e.now

    def position(self, p: int) -> tuple[int, ...]:
        return self._e.pos[p]

    def occupants(self, site) -> frozenset[int]:
        return frozenset(self._e.occ.get(tuple(site), ()))

    def theta(self, layer: int, p: int) -> float:
        return self._e.theta[layer][p]

    def b_sites(self, layer: int) -> set[tuple[int, ...]]:
        return {s for s, c in self._e.nB[layer].items() if c > 0}

    def sites(self):
        return self._e.occ.keys()


class ReferenceEngine:
    def __init__(self, origins: Sequence[Sequence[int]], members, init_B, start, thr: int):
        self.pos = [tuple(int(c) for c in o) for o in origins]
        self.n = len(self.pos)
        self.members = [list(map(bool, m)) for m in members]
        self.init_B = [list(map(bool, b)) for b in init_B]
        self.start = [float(s) for s in start]
        self.nl = len(self.start)
        self.thr = thr
        self.occ: dict[tuple[int, ...], set[int]] = {}
        for p, x in enumerate(self.pos):
            self.occ.setdefault(x, set()).add(p)
        self.theta = [[INF] * self.n for _ in range(self.nl)]
        self.nB: list[dict] = [{} for _ in range(self.nl)]
        self.visited: list[dict] = [{} for _ in range(self.nl)]
        self.breach = False
        self.now = 0.0
        self.n_events = 0

    def _mark(self, l: int, site, t: float):
        if site not in self.visited[l]:
            self.visited[l][site] = t
            if max((abs(c) for c in site), default=0) >= self.thr:
                self.breach = True

    def _infect(self, l: int, site, t: float):
        for q in sorted(self.occ.get(site, ())):
            if self.members[l][q] and self.theta[l][q] == INF:
                self.theta[l][q] = t
                self.nB[l][site] = self.nB[l].get(site, 0) + 1

    def activate(self, t: float):
        for l in range(self.nl):
            if self.start[l] != t:
                continue
            for p in range(self.n):
                if self.init_B[l][p] and self.members[l][p] and self.theta[l][p] == INF:
                    self.theta[l][p] = t
                    site = self.pos[p]
                    self.nB[l][site] = self.nB[l].get(site, 0) + 1
                    self._mark(l, site, t)
            for p in range(self.n):
                if self.init_B[l][p] and self.members[l][p]:
                    self._infect(l, self.pos[p], t)

    def apply(self, ev: JumpEvent):
        p = ev.who
        if self.pos[p] != tuple(ev.src):
            raise ValueError(f"event {ev} does not start at particle {p}'s position {self.pos[p]}")
        if sum(abs(a - b) for a, b in zip(ev.src, ev.dst)) != 1:
            raise ValueError(f"event {ev} is not a nearest-neighbour step")
        if ev.time < self.now:
            raise ValueError("events must be time ordered")
        t = ev.time
        old, new = tuple(ev.src), tuple(ev.dst)
        self.occ[old].discard(p)
        if not self.occ[old]:
            del self.occ[old]
        self.occ.setdefault(new, set()).add(p)
        self.pos[p] = new
        self.now = t
        self.n_events += 1
        for l in range(self.nl):
            if not self.members[l][p]:
                continue
            nB = self.nB[l]
            if self.theta[l][p] <= t:
                nB[old] -= 1
                had = nB.get(new, 0)
                nB[new] = had + 1
                if had == 0:
                    self._infect(l, new, t)
                self._mark(l, new, t)
            elif nB.get(new, 0) > 0:
                self.theta[l][p] = t
                nB[new] += 1


def stream_events(origins, keys: Sequence[int], D: float, horizon: float) -> Iterable[JumpEvent]:
    """Merge every particle's jump stream into one time-ordered event sequence.

    Ties in time resolve by particle ordinal.
    """
    d = len(origins[0]) if len(origins) else 0
    pos = [tuple(int(c) for c in o) for o in origins]
    heap = []
    for p, key in enumerate(keys):
        w, _ = streams.jump_at(key, 0, D, d)
        if w <= horizon:
            heap.append((w, p, 0))
    heapq.heapify(heap)
    while heap:
        t, p, k = heapq.heappop(heap)
        _, j = streams.jump_at(keys[p], k, D, d)
        step = streams.step_vector(j, d)
        src = pos[p]
        dst = tuple(a + b for a, b in zip(src, step))
        pos[p] = dst
        yield JumpEvent(t, p, src, dst)
        w, _ = streams.jump_at(keys[p], k + 1, D, d)
        tn = t + w
        if tn <= horizon:
            heapq.heappush(heap, (tn, p, k + 1))


def run_events(
    origins,
    events: Iterable[JumpEvent],
    members,
    init_B,
    start,
    horizon: float,
    thr: int,
    snapshot_times: Sequence[float] = (),
    listeners: Sequence[Callable[[JumpEvent, EngineView], None]] = (),
):
    """Drive the reference engine with an explicit event sequence.

    Returns (engine, snapshots) where snapshots maps each requested time to a
    list of positions.
    """
    eng = ReferenceEngine(origins, members, init_B, start, thr)
    view = EngineView(eng)
    marks = sorted(set(list(eng.start) + list(snapshot_times)))
    marks = [m for m in marks if m <= horizon]
    snaps = {}
    snapset = set(snapshot_times)
    mi = 0

    def flush(upto: float, inclusive: bool):
        nonlocal mi
        while mi < len(marks) and (marks[mi] < upto or (inclusive and marks[mi] <= upto)):
            m = marks[mi]
            eng.activate(m)
            if m in snapset:
                snaps[m] = list(eng.pos)
            mi += 1

    for ev in events:
        if ev.time > horizon:
            break
        flush(ev.time, inclusive=False)
        eng.apply(ev)
        for cb in listeners:
            cb(ev, view)
    flush(horizon, inclusive=True)
    eng.now = horizon
    return eng, snaps
