"""Capsule collision primitive and separating-halfspace linearization.

Everything here is planar. A capsule is a segment ``p0 -> p1`` inflated by
``radius``; its clearance to another capsule is the segment-segment distance
minus the two radii, so a negative value is a penetration depth.

The array functions broadcast over leading dimensions so a whole horizon of
capsule pairs can be evaluated at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float).reshape(2))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float).reshape(2))
        if not self.radius > 0:
            raise ValueError(f"capsule radius must be positive, got {self.radius}")

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.p1 - self.p0)))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.p0 + self.p1)

    def transformed(self, rotation: np.ndarray, translation) -> "Capsule":
        t = np.asarray(translation, dtype=float)
        return Capsule(rotation @ self.p0 + t, rotation @ self.p1 + t, self.radius)


@dataclass(frozen=True)
class CapsuleShape:
    """Footprint template: segment length (m) and inflation radius (m)."""

    length: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.length < 0:
            raise ValueError("length must be non-negative")

    def at(self, center, heading: float) -> Capsule:
        p0, p1 = pose_segments(np.asarray(center, dtype=float), np.asarray(heading, dtype=float), self.length)
        return Capsule(p0, p1, self.radius)


@dataclass(frozen=True, eq=False)
class Halfspace:
    """Separating line ``normal . p = offset``; the normal points from b toward a."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(2)
        if abs(np.hypot(*n) - 1.0) > 1e-12:
            raise ValueError("halfspace normal must be a unit vector")
        object.__setattr__(self, "normal", n)

    def a_satisfied(self, capsule: Capsule, tol: float = 0.0) -> bool:
        lo = min(self.normal @ capsule.p0, self.normal @ capsule.p1)
        return lo >= self.offset + capsule.radius - tol

    def b_satisfied(self, capsule: Capsule, tol: float = 0.0) -> bool:
        hi = max(self.normal @ capsule.p0, self.normal @ capsule.p1)
        return hi <= self.offset - capsule.radius + tol


def pose_segments(center, heading, length):
    """Segment endpoints for capsules centered at ``center`` along ``heading``."""
    center = np.asarray(center, dtype=float)
    heading = np.asarray(heading, dtype=float)
    half = 0.5 * np.asarray(length, dtype=float)
    d = np.stack([np.cos(heading), np.sin(heading)], axis=-1) * half[..., None]
    return center - d, center + d


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _dot(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1]


def point_segment_closest(p, s0, s1):
    """Closest point on segment ``s0-s1`` to ``p``; returns (distance, point)."""
    d = s1 - s0
    dd = _dot(d, d)
    safe = np.where(dd > _EPS, dd, 1.0)
    t = np.clip(_dot(p - s0, d) / safe, 0.0, 1.0)
    t = np.where(dd > _EPS, t, 0.0)
    q = s0 + t[..., None] * d
    diff = p - q
    return np.sqrt(_dot(diff, diff)), q


def segment_distance(a0, a1, b0, b1):
    """Distance between planar segments plus witness points on each.

    Returns ``(dist, wa, wb)``. The distance is symmetric in the two
    segments bit for bit: both orderings evaluate the same four
    point-to-segment distances and the same crossing test.
    """
    a0, a1, b0, b1 = (np.asarray(v, dtype=float) for v in (a0, a1, b0, b1))
    a0, a1, b0, b1 = np.broadcast_arrays(a0, a1, b0, b1)

    if np.array_equal(a0, a1) and np.array_equal(b0, b1):
        # circles only (robots): plain point distance
        diff = a0 - b0
        return np.sqrt(_dot(diff, diff)), a0.copy(), b0.copy()

    d_a0, q_a0 = point_segment_closest(a0, b0, b1)
    d_a1, q_a1 = point_segment_closest(a1, b0, b1)
    d_b0, q_b0 = point_segment_closest(b0, a0, a1)
    d_b1, q_b1 = point_segment_closest(b1, a0, a1)

    cand = np.stack([d_a0, d_a1, d_b0, d_b1], axis=-1)
    idx = np.argmin(cand, axis=-1)
    dist = np.take_along_axis(cand, idx[..., None], axis=-1)[..., 0]

    wa = np.stack([a0, a1, q_b0, q_b1], axis=-2)
    wb = np.stack([q_a0, q_a1, b0, b1], axis=-2)
    wa = np.take_along_axis(wa, idx[..., None, None], axis=-2)[..., 0, :]
    wb = np.take_along_axis(wb, idx[..., None, None], axis=-2)[..., 0, :]

    # proper crossings: the endpoint distances above miss them
    da = a1 - a0
    db = b1 - b0
    o1 = _cross(da, b0 - a0)
    o2 = _cross(da, b1 - a0)
    o3 = _cross(db, a0 - b0)
    o4 = _cross(db, a1 - b0)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    if np.any(crossing):
        denom = _cross(da, db)
        safe = np.where(np.abs(denom) > 0, denom, 1.0)
        t = _cross(b0 - a0, db) / safe
        x = a0 + t[..., None] * da
        dist = np.where(crossing, 0.0, dist)
        wa = np.where(crossing[..., None], x, wa)
        wb = np.where(crossing[..., None], x, wb)
    return dist, wa, wb


def clearance(a0, a1, ra, b0, b1, rb):
    """Vectorized capsule clearance: segment distance minus radius sum."""
    dist, _, _ = segment_distance(a0, a1, b0, b1)
    return dist - (np.asarray(ra, dtype=float) + np.asarray(rb, dtype=float))


def capsule_clearance(a: Capsule, b: Capsule) -> float:
    """Signed clearance between two capsules (negative means penetration)."""
    return float(clearance(a.p0, a.p1, a.radius, b.p0, b.p1, b.radius))


def clearance_along_plans(plan_i, plan_j, shape_i: CapsuleShape, shape_j: CapsuleShape) -> np.ndarray:
    """Per-step clearance between two plans posed with their capsule templates.

    Each plan must expose ``positions`` (N, 2) and ``headings`` (N,); the
    capsule segment is centered on the position and aligned with the heading.
    """
    pi, pj = np.asarray(plan_i.positions), np.asarray(plan_j.positions)
    if pi.shape != pj.shape:
        raise ValueError(f"horizon mismatch: {pi.shape[0]} vs {pj.shape[0]} steps")
    a0, a1 = pose_segments(pi, plan_i.headings, np.full(len(pi), shape_i.length))
    b0, b1 = pose_segments(pj, plan_j.headings, np.full(len(pj), shape_j.length))
    return clearance(a0, a1, shape_i.radius, b0, b1, shape_j.radius)


def _interval(points0, points1, n):
    s0 = _dot(points0, n)
    s1 = _dot(points1, n)
    return np.minimum(s0, s1), np.maximum(s0, s1)


def separating_halfspaces(a0, a1, ra, b0, b1, rb):
    """Vectorized separating lines for capsule pairs.

    Returns ``(normals, offsets)``. Normals point from b toward a. When the
    segments are apart the line passes midway between the witness points;
    when they touch or cross, the axis with the smallest separating push
    among the two segment normals and the center difference is used.
    Keeping ``n.p >= offset + ra`` on every point of a's segment and
    ``n.q <= offset - rb`` on b's guarantees non-negative clearance.
    """
    a0, a1, b0, b1 = (np.asarray(v, dtype=float) for v in (a0, a1, b0, b1))
    a0, a1, b0, b1 = np.broadcast_arrays(a0, a1, b0, b1)
    ra = np.broadcast_to(np.asarray(ra, dtype=float), a0.shape[:-1])
    rb = np.broadcast_to(np.asarray(rb, dtype=float), a0.shape[:-1])

    dist, wa, wb = segment_distance(a0, a1, b0, b1)
    diff = wa - wb
    safe = np.where(dist > _EPS, dist, 1.0)
    normals = diff / safe[..., None]
    offsets = _dot(normals, 0.5 * (wa + wb))

    touching = dist <= 1e-9
    if np.any(touching):
        ca = 0.5 * (a0 + a1)
        cb = 0.5 * (b0 + b1)
        cd = ca - cb
        cdn = np.sqrt(_dot(cd, cd))
        x_axis = np.zeros_like(cd)
        x_axis[..., 0] = 1.0

        def unit_normal(d):
            n = np.stack([-d[..., 1], d[..., 0]], axis=-1)
            nn = np.sqrt(_dot(n, n))
            return np.where(nn[..., None] > _EPS, n / np.where(nn > _EPS, nn, 1.0)[..., None], x_axis), nn > _EPS

        n_a, ok_a = unit_normal(a1 - a0)
        n_b, ok_b = unit_normal(b1 - b0)
        n_c = np.where(cdn[..., None] > _EPS, cd / np.where(cdn > _EPS, cdn, 1.0)[..., None], x_axis)
        ok_c = cdn > _EPS

        best_push = np.full(dist.shape, np.inf)
        best_n = np.array(x_axis)
        best_off = np.zeros(dist.shape)
        for n, ok in ((n_c, ok_c), (n_a, ok_a), (n_b, ok_b)):
            # orient from b toward a
            sgn = np.where(_dot(n, cd) < 0, -1.0, 1.0)
            n = n * sgn[..., None]
            lo_a, _ = _interval(a0, a1, n)
            _, hi_b = _interval(b0, b1, n)
            push = (hi_b + rb) - (lo_a - ra)
            better = ok & (push < best_push - 1e-15)
            best_push = np.where(better, push, best_push)
            best_n = np.where(better[..., None], n, best_n)
            best_off = np.where(better, 0.5 * (lo_a + hi_b), best_off)

        # coincident centers: fixed world x-axis
        degenerate = ~ok_c
        if np.any(degenerate):
            lo_a, _ = _interval(a0, a1, x_axis)
            _, hi_b = _interval(b0, b1, x_axis)
            best_n = np.where(degenerate[..., None], x_axis, best_n)
            best_off = np.where(degenerate, 0.5 * (lo_a + hi_b), best_off)

        normals = np.where(touching[..., None], best_n, normals)
        offsets = np.where(touching, best_off, offsets)
    return normals, offsets


def separating_halfspace(a: Capsule, b: Capsule) -> Halfspace:
    n, off = separating_halfspaces(a.p0, a.p1, a.radius, b.p0, b.p1, b.radius)
    n = np.asarray(n, dtype=float)
    n = n / np.hypot(*n)
    return Halfspace(n, float(off))
