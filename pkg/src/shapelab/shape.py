"""Finite half-space approximations of the limit shape.

A shape is {z : <z, u_i> <= lambda_i for all i}. In d = 2 the vertex list is
computed by clipping a bounding square against each half-plane in turn.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .geometry import Direction, cube_sites

VERTEX_TOL = 1e-9


class ShapeError(ValueError):
    pass


class EmptyInterior(ShapeError):
    pass


class Unbounded(ShapeError):
    pass


class DimensionUnsupported(ShapeError):
    pass


@dataclass
class ShapeEstimate:
    directions: list[Direction]
    lambdas: np.ndarray
    stderr: np.ndarray | None = None
    vertices: np.ndarray | None = None  # d == 2: counterclockwise polygon
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.directions[0].d

    @property
    def U(self) -> np.ndarray:
        return np.array([u.components for u in self.directions], dtype=float)

    def contains(self, z, scale: float = 1.0, slack: float = 0.0) -> np.ndarray:
        """Membership of point(s) z in scale * shape (with additive slack per constraint)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.all(z @ self.U.T <= scale * self.lambdas[None, :] + slack + VERTEX_TOL, axis=1)

    def sup_radius(self) -> float:
        """max ||z||_inf over the shape."""
        if self.vertices is not None:
            return float(np.abs(self.vertices).max())
        if self.d == 1:
            return float(max(self.lambdas))
        best = 0.0
        for i in range(self.d):
            for sgn in (1.0, -1.0):
                c = np.zeros(self.d)
                c[i] = -sgn
                res = linprog(c, A_ub=self.U, b_ub=self.lambdas, bounds=[(None, None)] * self.d)
                if res.status != 0:
                    raise Unbounded("shape is unbounded")
                best = max(best, -res.fun)
        return best

    def to_document(self) -> dict:
        doc = {
            "d": self.d,
            "directions": [list(u.components) for u in self.directions],
            "lambda": [float(x) for x in self.lambdas],
            "stderr": None if self.stderr is None else [float(x) for x in self.stderr],
            "vertices": None if self.vertices is None else self.vertices.tolist(),
        }
        doc.update(self.meta)
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True, default=_num)


def _num(x):
    return float(x)


def _positively_spanning(U: np.ndarray) -> bool:
    d = U.shape[1]
    if d == 1:
        return bool((U[:, 0] > 0).any() and (U[:, 0] < 0).any())
    if len(U) < d + 1:
        return False
    try:
        hull = ConvexHull(U)
    except QhullError:
        return False
    return bool(np.all(hull.equations[:, -1] < -1e-12))


def _clip(poly: list[np.ndarray], a: np.ndarray, b: float) -> list[np.ndarray]:
    """Sutherland-Hodgman step: keep the part of ``poly`` with <z,a> <= b."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp, fq = p @ a - b, q @ a - b
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            s = fp / (fp - fq)
            out.append(p + s * (q - p))
    return out


def _clean(poly: list[np.ndarray], scale: float) -> np.ndarray:
    tol = VERTEX_TOL * max(scale, 1.0)
    pts: list[np.ndarray] = []
    for p in poly:
        if not pts or np.abs(p - pts[-1]).max() > tol:
            pts.append(p)
    if len(pts) > 1 and np.abs(pts[0] - pts[-1]).max() <= tol:
        pts.pop()
    changed = True
    while changed and len(pts) > 2:
        changed = False
        for i in range(len(pts)):
            a, b, c = pts[i - 1], pts[i], pts[(i + 1) % len(pts)]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if abs(cross) <= tol * max(1.0, np.abs(c - a).max()):
                pts.pop(i)
                changed = True
                break
    arr = np.array(pts)
    # counterclockwise, starting from the smallest polar angle in [0, 2pi)
    ang = np.mod(np.arctan2(arr[:, 1], arr[:, 0]), 2 * np.pi)
    ang[np.isclose(ang, 2 * np.pi, atol=1e-12)] = 0.0
    order = np.argsort(ang, kind="stable")
    return arr[order]


def build_shape(directions: Sequence[Direction], lambdas: Sequence[float], stderr=None) -> ShapeEstimate:
    """Half-space intersection {z : <z,u_i> <= lambda_i}."""
    directions = list(directions)
    lam = np.asarray(lambdas, dtype=float)
    if len(directions) != len(lam) or not directions:
        raise ShapeError("need one lambda per direction")
    if np.any(lam <= 0):
        raise EmptyInterior("every lambda must be positive")
    U = np.array([u.components for u in directions], dtype=float)
    if not _positively_spanning(U):
        raise Unbounded("directions do not positively span the space")
    shape = ShapeEstimate(directions, lam, None if stderr is None else np.asarray(stderr, dtype=float))
    if U.shape[1] == 2:
        R = 4.0 * float(lam.max()) / max(_min_support(U), 1e-12) + 1.0
        poly = [np.array(v, dtype=float) for v in ((R, R), (-R, R), (-R, -R), (R, -R))]
        for a, b in zip(U, lam):
            poly = _clip(poly, a, b)
            if not poly:
                raise EmptyInterior("empty intersection")
        shape.vertices = _polish(_clean(poly, float(lam.max())), U, lam)
    return shape


def _polish(V: np.ndarray, U: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Recompute each vertex as the exact intersection of its two tightest constraints."""
    out = V.copy()
    for i, v in enumerate(V):
        order = np.argsort(np.abs(lam - U @ v), kind="stable")
        a = order[0]
        for b in order[1:]:
            M = U[[a, b]]
            if abs(np.linalg.det(M)) > 1e-9:
                w = np.linalg.solve(M, lam[[a, b]])
                if np.abs(w - v).max() < 1e-6 * max(1.0, np.abs(v).max()):
                    out[i] = w
                break
    return out


def _min_support(U: np.ndarray) -> float:
    """Smallest max_i <v, u_i> over unit v (how well the directions span); d=2 only."""
    ang = np.linspace(0, 2 * np.pi, 721)
    V = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return float((V @ U.T).max(axis=1).min())


def exposed_points(shape: ShapeEstimate) -> np.ndarray:
    """Vertices that are unique maximizers of some linear functional."""
    if shape.d == 1:
        return np.array([[float(shape.lambdas[np.argmax(shape.U[:, 0])])],
                         [-float(shape.lambdas[np.argmin(shape.U[:, 0])])]])
    if shape.d != 2:
        raise DimensionUnsupported("exposed points are computed for d <= 2 only")
    V = shape.vertices
    n = len(V)
    out = []
    for i in range(n):
        prev, cur, nxt = V[i - 1], V[i], V[(i + 1) % n]
        e1, e2 = cur - prev, nxt - cur
        n1 = np.array([e1[1], -e1[0]]) / np.linalg.norm(e1)
        n2 = np.array([e2[1], -e2[0]]) / np.linalg.norm(e2)
        a = n1 + n2
        vals = V @ a
        others = np.delete(vals, i)
        if np.all(vals[i] > others + VERTEX_TOL):
            out.append(cur)
    return np.array(out)


def shape_sandwich_check_sites(tilde: np.ndarray, t: float, shape: ShapeEstimate, eps: float) -> tuple[bool, bool]:
    """Inner and outer inclusions for a visited set ``tilde`` at time ``t``.

    inner: every lattice point of t(1-eps) * shape is visited.
    outer: every visited site, fattened by 1/2 in sup-norm, lies in t(1+eps) * shape.
    """
    tilde = np.asarray(tilde, dtype=np.int64).reshape(-1, shape.d)
    U, lam = shape.U, shape.lambdas
    # outer: the cell x + [-1/2, 1/2]^d lies in the half-space iff <x,u> + 1/2 ||u||_1 <= t(1+eps) lambda
    if len(tilde):
        half = 0.5 * np.abs(U).sum(axis=1)
        outer = bool(np.all(tilde @ U.T + half[None, :] <= t * (1 + eps) * lam[None, :] + VERTEX_TOL))
    else:
        outer = True
    k = int(math.floor(t * (1 - eps) * shape.sup_radius() + VERTEX_TOL))
    pts = cube_sites(max(k, 0), shape.d)
    inside = pts[shape.contains(pts, scale=t * (1 - eps))]
    if len(inside) == 0:
        return True, outer
    if len(tilde) == 0:
        return False, outer
    lo = np.minimum(tilde.min(axis=0), inside.min(axis=0))
    span = np.maximum(tilde.max(axis=0), inside.max(axis=0)) - lo + 1
    grid = np.zeros(tuple(int(s) for s in span), dtype=bool)
    grid[tuple((tilde - lo).T)] = True
    inner = bool(grid[tuple((inside - lo).T)].all())
    return inner, outer


def shape_sandwich_check(result, t: float, shape: ShapeEstimate, eps: float, layer: int = 0) -> tuple[bool, bool]:
    """Sandwich test of the run's visited set B~(t) against ``shape``."""
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    if t > result.spec.horizon:
        raise ValueError("t beyond horizon")
    return shape_sandwich_check_sites(result.layers[layer].b_tilde(t), t, shape, eps)
