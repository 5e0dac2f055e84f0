"""Counter-based random streams.

Every random quantity in a run is a pure function of the master seed and an
address: a site (for the initial Poisson field) or a particle id plus an event
counter (for jump waits and directions). Two processes built from the same
master seed therefore give every shared particle the same path, without any
path being stored.

This module is the pure-Python rendition. ``shapelab._kernels`` carries the
compiled twin used by the fast engine; the two must agree bit for bit.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

STREAM_ALGORITHM = "splitmix64-ctr"
STREAM_VERSION = 1

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
ABSORB_MUL = 0xD1B54A32D192ED03
ABSORB_ADD = 0x632BE59BD9B4E019
DIR_SALT = 0xA0761D6478BD642F
TWO_M53 = 2.0 ** -53


class ParticleId(NamedTuple):
    origin: tuple[int, ...]
    index: int


def mix64(z: int) -> int:
    """SplitMix64 finalizer."""
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def absorb(h: int, v: int) -> int:
    return mix64(((h ^ (v & MASK)) * ABSORB_MUL + ABSORB_ADD) & MASK)


def substream(seed: int, label: bytes | str) -> int:
    """Derive an independent 64-bit seed for ``label`` (blake2b based)."""
    if isinstance(label, str):
        label = label.encode()
    digest = hashlib.blake2b((seed & MASK).to_bytes(8, "little") + label, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def init_seed(seed: int) -> int:
    return substream(seed, b"init")


def path_seed(seed: int) -> int:
    return substream(seed, b"paths")


def site_key(seed_init: int, x: Sequence[int]) -> int:
    h = seed_init
    for c in x:
        h = absorb(h, c)
    return h


def particle_key(seed_paths: int, pid: ParticleId) -> int:
    h = seed_paths
    for c in pid.origin:
        h = absorb(h, c)
    return absorb(h, pid.index)


def unit_open_closed(bits: int) -> float:
    """Map 64 random bits to a double in (0, 1]."""
    return ((bits >> 11) + 1) * TWO_M53


def poisson_inverse(u: float, mu: float) -> int:
    """Smallest k with F(k) > u for the Poisson(mu) cdf, by sequential search."""
    k = 0
    p = math.exp(-mu)
    cdf = p
    while u >= cdf:
        k += 1
        p = p * mu / k
        if p == 0.0:
            break
        cdf += p
    return k


def initial_count(seed: int, x: Sequence[int], mu_A: float) -> int:
    """Number of particles initially at ``x``; Poisson(mu_A), independent over sites."""
    if not mu_A > 0:
        raise ValueError("mu_A must be positive")
    bits = mix64(site_key(init_seed(seed), x))
    u = (bits >> 11) * TWO_M53
    return poisson_inverse(u, mu_A)


def draw_bits(pkey: int, k: int) -> tuple[int, int]:
    c = mix64((pkey + (k + 1) * GOLDEN) & MASK)
    return c, mix64(c ^ DIR_SALT)


def jump_at(pkey: int, k: int, D: float, d: int) -> tuple[float, int]:
    """Wait and direction index of the k-th jump of the particle keyed ``pkey``.

    Direction index j means a step of sign (-1 if j even else +1) along axis j // 2.
    """
    wbits, dbits = draw_bits(pkey, k)
    wait = -math.log(unit_open_closed(wbits)) / D
    return wait, dbits % (2 * d)


def step_vector(j: int, d: int) -> tuple[int, ...]:
    v = [0] * d
    v[j // 2] = 1 if j % 2 else -1
    return tuple(v)


@dataclass
class PathStream:
    """Jump stream of one particle. ``next_jump`` advances the cursor."""

    owner: ParticleId
    seed: int
    cursor: int = 0
    _key: int = field(init=False, repr=False)

    def __post_init__(self):
        self._key = particle_key(path_seed(self.seed), self.owner)

    @property
    def key(self) -> int:
        return self._key

    def peek(self, k: int, D: float) -> tuple[float, tuple[int, ...]]:
        """Random access to draw ``k`` without moving the cursor."""
        if not D > 0:
            raise ValueError("jump rate D must be positive")
        d = len(self.owner.origin)
        wait, j = jump_at(self._key, k, D, d)
        return wait, step_vector(j, d)

    def next_jump(self, D: float) -> tuple[float, tuple[int, ...]]:
        out = self.peek(self.cursor, D)
        self.cursor += 1
        return out
