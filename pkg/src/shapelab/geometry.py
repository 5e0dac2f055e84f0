"""Lattice points, directions and the half-space / cube / cylinder predicates.

Lattice points are plain tuples of ints. Directions are tuples of floats with
unit Euclidean norm. The unqualified norm ``||x||`` is the sup-norm throughout.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

LatticePoint = tuple[int, ...]

DIRECTION_TOL = 1e-12
ORTHO_TOL = 1e-9
# slack for closed half-space membership under float rounding of <x,u>
MEMBERSHIP_TOL = 1e-12


class GeometryError(ValueError):
    pass


def sup_norm(x: Sequence[float]) -> float:
    return max((abs(c) for c in x), default=0)


def dot(x: Sequence[float], u: Sequence[float]) -> float:
    if len(x) != len(u):
        raise GeometryError(f"dimension mismatch: {len(x)} vs {len(u)}")
    return math.fsum(a * b for a, b in zip(x, u))


@dataclass(frozen=True)
class Direction:
    components: tuple[float, ...]

    def __post_init__(self):
        norm = math.sqrt(math.fsum(c * c for c in self.components))
        if abs(norm - 1.0) > DIRECTION_TOL:
            raise GeometryError(f"direction {self.components} has norm {norm}, not 1")

    @classmethod
    def of(cls, v: Iterable[float]) -> "Direction":
        """Normalize ``v`` to a unit direction."""
        v = tuple(float(c) for c in v)
        norm = math.sqrt(math.fsum(c * c for c in v))
        if norm == 0.0 or not math.isfinite(norm):
            raise GeometryError(f"cannot normalize {v}")
        return cls(tuple(c / norm for c in v))

    @classmethod
    def parse(cls, text: str) -> "Direction":
        """Parse comma-separated decimals, e.g. ``"1,0"`` or ``"0.6, -0.8"``."""
        try:
            parts = [float(p) for p in text.split(",") if p.strip()]
        except ValueError as exc:
            raise GeometryError(f"bad direction {text!r}") from exc
        if not parts:
            raise GeometryError("empty direction")
        return cls.of(parts)

    @classmethod
    def axis(cls, i: int, d: int, sign: int = 1) -> "Direction":
        v = [0.0] * d
        v[i] = float(sign)
        return cls(tuple(v))

    @property
    def d(self) -> int:
        return len(self.components)

    def __neg__(self) -> "Direction":
        return Direction(tuple(-c for c in self.components))

    def __iter__(self):
        return iter(self.components)

    def __len__(self):
        return len(self.components)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=float)

    def text(self) -> str:
        return ",".join(repr(c) for c in self.components)


@dataclass(frozen=True)
class HalfSpace:
    """Closed half-space {x : <x,u> >= c}."""

    u: Direction
    c: float

    def contains(self, x: Sequence[float]) -> bool:
        return dot(x, self.u.components) >= self.c - MEMBERSHIP_TOL

    def mask(self, points: np.ndarray) -> np.ndarray:
        """Vectorized membership for an (n, d) array of points."""
        return np.asarray(points, dtype=float) @ self.u.as_array() >= self.c - MEMBERSHIP_TOL


@dataclass(frozen=True)
class Cube:
    """[-r, r]^d."""

    r: float

    def __post_init__(self):
        if self.r < 0:
            raise GeometryError("cube radius must be nonnegative")

    def contains(self, x: Sequence[float]) -> bool:
        return sup_norm(x) <= self.r


@dataclass(frozen=True)
class Cylinder:
    """{x : <x,u> >= alpha, ||x_perp - gamma|| <= beta}, gamma orthogonal to u."""

    alpha: float
    beta: float
    gamma: tuple[float, ...]
    u: Direction

    def __post_init__(self):
        if self.beta < 0:
            raise GeometryError("cylinder radius beta must be nonnegative")
        if len(self.gamma) != self.u.d:
            raise GeometryError("gamma and u differ in dimension")
        if abs(dot(self.gamma, self.u.components)) > ORTHO_TOL:
            raise GeometryError("gamma must be orthogonal to the cylinder axis")


def perp_component(v: Sequence[float], u: Direction) -> tuple[float, ...]:
    """Part of ``v`` orthogonal to ``u``: v - <v,u> u."""
    s = dot(v, u.components)
    return tuple(a - s * b for a, b in zip(v, u.components))


def lex_less(x: Sequence[int], y: Sequence[int]) -> bool:
    if len(x) != len(y):
        raise GeometryError(f"dimension mismatch: {len(x)} vs {len(y)}")
    return tuple(x) < tuple(y)


def shell_sites(k: int, d: int) -> list[LatticePoint]:
    """Sites with sup-norm exactly ``k``, in lexicographic order."""
    if k < 0:
        raise GeometryError("shell index must be nonnegative")
    if k == 0:
        return [(0,) * d]
    rng = range(-k, k + 1)
    return [p for p in itertools.product(rng, repeat=d) if max(abs(c) for c in p) == k]


def cube_sites(k: int, d: int) -> np.ndarray:
    """All lattice points of the cube of radius ``k`` as an (n, d) array, lex ordered."""
    axis = np.arange(-k, k + 1, dtype=np.int64)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def in_halfspace(x: Sequence[float], h: HalfSpace) -> bool:
    return h.contains(x)


def in_cube(x: Sequence[float], c: Cube) -> bool:
    return c.contains(x)


def in_cylinder(x: Sequence[float], g: Cylinder) -> bool:
    if dot(x, g.u.components) < g.alpha - MEMBERSHIP_TOL:
        return False
    if math.isinf(g.beta):
        return True
    xp = perp_component(x, g.u)
    return sup_norm([a - b for a, b in zip(xp, g.gamma)]) <= g.beta + ORTHO_TOL


def nearest_site(candidates: np.ndarray, x: Sequence[int]) -> int | None:
    """Row index of the candidate nearest to ``x`` in sup-norm, lex-least on ties.

    Equivalent to scanning shells around ``x`` in order and taking the first
    occupied site of the first nonempty shell.
    """
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        return None
    x = np.asarray(x, dtype=np.int64)
    dist = np.abs(candidates - x).max(axis=1)
    best = np.flatnonzero(dist == dist.min())
    if len(best) == 1:
        return int(best[0])
    sub = candidates[best]
    order = np.lexsort(sub.T[::-1])
    return int(best[order[0]])


def symmetry_images(v: Sequence[float]) -> list[tuple[float, ...]]:
    """Images of ``v`` under coordinate permutations and sign flips (2^d d! maps)."""
    d = len(v)
    out = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            out.append(tuple(signs[i] * v[perm[i]] for i in range(d)))
    return out


def direction_grid(d: int, m: int = 64) -> list[Direction]:
    """Default finite direction family for shape estimation."""
    if d == 1:
        return [Direction((1.0,)), Direction((-1.0,))]
    if d == 2:
        if m < 4 or m % 4:
            raise GeometryError("d=2 grids need a multiple of 4 directions (axes included)")
        out = []
        for i in range(m):
            if (4 * i) % m == 0:
                q = 4 * i // m
                out.append(Direction(((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[q]))
            else:
                a = 2 * math.pi * i / m
                out.append(Direction((math.cos(a), math.sin(a))))
        return out
    if d == 3:
        seen = []
        for v in itertools.product((-1, 0, 1), repeat=3):
            if any(v):
                seen.append(Direction.of(v))
        return seen
    raise GeometryError(f"no default direction grid for d={d}")
