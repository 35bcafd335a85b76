"""Motion models, reference paths, tracking cost and the local trajectory solver.

Plans are stored row-per-step: row ``k`` is the predicted state after the
``k``-th input of the horizon. For the kinematic bicycle a row is
``[x, y, v, a, beta]`` (the input that produced it rides along) and the body
heading is kept in a separate array; for the holonomic robot a row is
``[x, y, vx, vy]``.

The local solver is a projected Gauss-Newton method over the input sequence
(single shooting), with an exact box-constrained Newton step per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


@dataclass
class TrajectoryPlan:
    states: np.ndarray
    dt: float
    headings: np.ndarray
    model: str = "bicycle"

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.headings = np.asarray(self.headings, dtype=float).reshape(-1)
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise ValueError("a plan needs at least two horizon steps")
        if self.headings.shape[0] != self.states.shape[0]:
            raise ValueError("one heading per horizon step required")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def flat(self) -> np.ndarray:
        return self.states.ravel()

    def with_states(self, states) -> "TrajectoryPlan":
        return TrajectoryPlan(np.asarray(states, dtype=float).reshape(self.states.shape), self.dt,
                              self.headings.copy(), self.model)

    def copy(self) -> "TrajectoryPlan":
        return TrajectoryPlan(self.states.copy(), self.dt, self.headings.copy(), self.model)


# --------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class BicycleModel:
    """Kinematic bicycle with slip-angle input, forward-Euler discretized.

    Physical state ``[x, y, psi, v]``, input ``[a, beta]``. Speed is held
    at zero instead of going negative, in plans as in the plant; a planner
    that may reverse finds turning-on-the-spot tricks the vehicle cannot do.
    """

    l_r: float = 1.5
    a_min: float = -4.0
    a_max: float = 2.5
    beta_max: float = 0.45

    name = "bicycle"
    state_dim = 4
    input_dim = 2
    row_dim = 5

    @property
    def input_lower(self):
        return np.array([self.a_min, -self.beta_max])

    @property
    def input_upper(self):
        return np.array([self.a_max, self.beta_max])

    def step(self, s, u, dt):
        x, y, psi, v = s
        a, beta = u
        h = psi + beta
        return np.array([
            x + dt * v * math.cos(h),
            y + dt * v * math.sin(h),
            psi + dt * v / self.l_r * math.sin(beta),
            v + dt * a,
        ])

    def integrate(self, s, u, duration, substeps):
        h = duration / substeps
        s = np.asarray(s, dtype=float)
        for _ in range(substeps):
            s = self.step(s, u, h)
            if s[3] < 0:  # no reversing
                s[3] = 0.0
        return s

    def rollout(self, s0, U, dt):
        N = U.shape[0]
        x, y, psi, v = (float(c) for c in s0)
        S = np.empty((N + 1, 4))
        S[0] = (x, y, psi, v)
        lr = self.l_r
        for k in range(N):
            a, beta = U[k]
            h = psi + beta
            x, y, psi, v = (x + dt * v * math.cos(h), y + dt * v * math.sin(h),
                            psi + dt * v / lr * math.sin(beta), max(v + dt * a, 0.0))
            S[k + 1] = (x, y, psi, v)
        return S

    def rows(self, S, U):
        return np.column_stack([S[1:, 0], S[1:, 1], S[1:, 3], U[:, 0], U[:, 1]])

    def headings(self, S, U):
        # the footprint follows the body yaw, not the velocity direction psi + beta
        return S[1:, 2].copy()

    def row_jacobian(self, S, U, dt):
        """d rows / d U as a dense ``(N*5, N*2)`` matrix."""
        N = U.shape[0]
        nu = 2 * N
        sens = np.zeros((4, nu))
        J = np.zeros((N, 5, nu))
        lr = self.l_r
        for k in range(N):
            _, _, psi, v = S[k]
            a, beta = U[k]
            h = psi + beta
            c, s = math.cos(h), math.sin(h)
            A = np.array([
                [1.0, 0.0, -dt * v * s, dt * c],
                [0.0, 1.0, dt * v * c, dt * s],
                [0.0, 0.0, 1.0, dt / lr * math.sin(beta)],
                [0.0, 0.0, 0.0, 1.0],
            ])
            sens = A @ sens
            sens[0, 2 * k + 1] += -dt * v * s
            sens[1, 2 * k + 1] += dt * v * c
            sens[2, 2 * k + 1] += dt * v / lr * math.cos(beta)
            sens[3, 2 * k] += dt
            if v + dt * a < 0.0:  # speed held at zero, no reversing
                sens[3] = 0.0
            J[k, 0] = sens[0]
            J[k, 1] = sens[1]
            J[k, 2] = sens[3]
            J[k, 3, 2 * k] = 1.0
            J[k, 4, 2 * k + 1] = 1.0
        return J.reshape(N * 5, nu)

    def final_heading_gradient(self, S, U, dt):
        """d psi_N / d U, flattened like ``U``."""
        N = U.shape[0]
        g = np.zeros(2 * N)
        dv = np.zeros(2 * N)  # d v_k / d U
        lr = self.l_r
        for k in range(N):
            v = S[k, 3]
            a, beta = U[k]
            g += dt / lr * math.sin(beta) * dv
            g[2 * k + 1] += dt * v / lr * math.cos(beta)
            dv[2 * k] += dt
            if v + dt * a < 0.0:
                dv[:] = 0.0
        return g

    def speed(self, s):
        return float(s[3])

    def velocity_heading(self, s, u):
        return float(s[2] + u[1])


@dataclass(frozen=True)
class HolonomicModel:
    """Planar double integrator: state ``[x, y, vx, vy]``, input ``[ax, ay]``."""

    a_max: float = 1.5

    name = "holonomic"
    state_dim = 4
    input_dim = 2
    row_dim = 4

    @property
    def input_lower(self):
        return np.array([-self.a_max, -self.a_max])

    @property
    def input_upper(self):
        return np.array([self.a_max, self.a_max])

    def step(self, s, u, dt):
        s = np.asarray(s, dtype=float)
        return np.array([s[0] + dt * s[2], s[1] + dt * s[3], s[2] + dt * u[0], s[3] + dt * u[1]])

    def integrate(self, s, u, duration, substeps):
        h = duration / substeps
        s = np.asarray(s, dtype=float)
        for _ in range(substeps):
            s = self.step(s, u, h)
        return s

    def rollout(self, s0, U, dt):
        N = U.shape[0]
        S = np.empty((N + 1, 4))
        S[0] = s0
        v = np.asarray(s0[2:], dtype=float) + dt * np.cumsum(U, axis=0)
        S[1:, 2:] = v
        vel_prev = np.vstack([np.asarray(s0[2:], dtype=float), v[:-1]])
        S[1:, :2] = np.asarray(s0[:2], dtype=float) + dt * np.cumsum(vel_prev, axis=0)
        return S

    def rows(self, S, U):
        return S[1:].copy()

    def headings(self, S, U):
        return np.arctan2(S[1:, 3], S[1:, 2])

    def row_jacobian(self, S, U, dt):
        N = U.shape[0]
        J = np.zeros((N, 4, N, 2))
        for k in range(N):
            for j in range(k + 1):
                for c in range(2):
                    J[k, 2 + c, j, c] = dt
                    J[k, c, j, c] = dt * dt * (k - j)
        return J.reshape(N * 4, N * 2)

    def speed(self, s):
        return float(np.hypot(s[2], s[3]))

    def velocity_heading(self, s, u):
        return float(math.atan2(s[3], s[2]))


# --------------------------------------------------------------------------
# reference paths


class ReferencePath:
    """Densely sampled planar polyline with arc-length parametrization."""

    def __init__(self, points, length: Optional[float] = None):
        pts = np.asarray(points, dtype=float)
        keep = np.r_[True, np.hypot(*np.diff(pts, axis=0).T) > 1e-9]
        self.points = pts[keep]
        seg = np.diff(self.points, axis=0)
        self._seg = seg
        self._seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self._seg_len2 = self._seg_len ** 2
        self.s = np.r_[0.0, np.cumsum(self._seg_len)]
        self._tan = seg / self._seg_len[:, None]
        self.length = float(self.s[-1]) if length is None else float(length)

    @classmethod
    def from_pieces(cls, start, heading, pieces, ds=0.25, length=None):
        """Build from ``("straight", L)`` and ``("arc", radius, signed_angle)`` pieces."""
        p = np.asarray(start, dtype=float)
        h = float(heading)
        out = [p.copy()]
        for piece in pieces:
            if piece[0] == "straight":
                L = piece[1]
                n = max(1, int(math.ceil(L / ds)))
                t = np.linspace(0, L, n + 1)[1:]
                d = np.array([math.cos(h), math.sin(h)])
                out.extend(p + t[:, None] * d)
                p = p + L * d
            elif piece[0] == "arc":
                R, ang = piece[1], piece[2]
                sgn = 1.0 if ang > 0 else -1.0
                center = p + sgn * R * np.array([-math.sin(h), math.cos(h)])
                n = max(2, int(math.ceil(abs(ang) * R / ds)))
                phis = h - sgn * math.pi / 2 + np.linspace(0, ang, n + 1)[1:]
                out.extend(center + R * np.column_stack([np.cos(phis), np.sin(phis)]))
                h += ang
                p = center + R * np.array([math.cos(h - sgn * math.pi / 2), math.sin(h - sgn * math.pi / 2)])
            else:
                raise ValueError(f"unknown path piece {piece[0]!r}")
        return cls(np.array(out), length=length)

    def point_at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.s[-1])
        x = np.interp(s, self.s, self.points[:, 0])
        y = np.interp(s, self.s, self.points[:, 1])
        return np.stack([x, y], axis=-1)

    def tangent_at(self, s):
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self._tan) - 1)
        return self._tan[i]

    def heading_at(self, s):
        t = self.tangent_at(s)
        return np.arctan2(t[..., 1], t[..., 0])

    def project(self, P, s_lo: float = -np.inf, s_hi: float = np.inf):
        """Closest-point projection of points ``P`` (K, 2).

        Returns ``(s, lateral, tangent, normal)``; lateral is positive to the
        left of the direction of travel. ``s_lo``/``s_hi`` restrict the search.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        i0 = max(0, int(np.searchsorted(self.s, s_lo, side="right")) - 2)
        i1 = min(len(self._seg), int(np.searchsorted(self.s, s_hi, side="left")) + 2)
        if i1 <= i0:
            i0, i1 = 0, len(self._seg)
        a = self.points[i0:i1]
        d = self._seg[i0:i1]
        rel = P[:, None, :] - a[None, :, :]
        t = np.clip((rel * d[None]).sum(-1) / self._seg_len2[i0:i1][None], 0.0, 1.0)
        q = a[None] + t[..., None] * d[None]
        dist2 = ((P[:, None, :] - q) ** 2).sum(-1)
        j = np.argmin(dist2, axis=1)
        rows = np.arange(P.shape[0])
        tan = self._tan[i0:i1][j]
        normal = np.column_stack([-tan[:, 1], tan[:, 0]])
        foot = q[rows, j]
        lat = ((P - foot) * normal).sum(-1)
        # beyond either end of the searched stretch the offset is the full
        # distance to that end point, so leaving the window is never free
        tj = t[rows, j]
        off_end = ((j == 0) & (tj <= 0.0)) | ((j == i1 - i0 - 1) & (tj >= 1.0))
        if np.any(off_end):
            gap = P[off_end] - foot[off_end]
            dist = np.sqrt((gap * gap).sum(-1))
            ok = dist > 1e-9
            sub = np.flatnonzero(off_end)[ok]
            normal[sub] = gap[ok] / dist[ok, None]
            lat[sub] = dist[ok]
        s = self.s[i0:i1][j] + tj * self._seg_len[i0:i1][j]
        return s, lat, tan, normal


# --------------------------------------------------------------------------
# local problem


@dataclass
class TrackingWeights:
    q_v: float = 1.0
    q_lat: float = 1.0
    r_a: float = 0.1
    r_beta: float = 0.5
    q_neg_speed: float = 50.0
    q_over_speed: float = 50.0  # one-sided, keeps the speed at or below v_ref
    q_progress: float = 0.1  # lag behind a point moving along the path at v_ref
    q_heading_end: float = 10.0  # heading misalignment at the end of the horizon


@dataclass
class LocalProblem:
    """Reference-tracking objective and feasible set for one agent."""

    model: object
    path: ReferencePath
    v_ref: float
    horizon: int
    dt: float
    weights: TrackingWeights = field(default_factory=TrackingWeights)
    state: Optional[np.ndarray] = None  # current physical state
    s_hint: float = 0.0  # current arc length, narrows the path search

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")

    @property
    def lower(self):
        return np.tile(self.model.input_lower, self.horizon)

    @property
    def upper(self):
        return np.tile(self.model.input_upper, self.horizon)

    def rollout(self, U):
        U = np.asarray(U, dtype=float).reshape(self.horizon, self.model.input_dim)
        S = self.model.rollout(self.state, U, self.dt)
        return S, self.model.rows(S, U), self.model.headings(S, U)

    def plan_from_inputs(self, U) -> TrajectoryPlan:
        U = np.asarray(U, dtype=float).reshape(self.horizon, self.model.input_dim)
        S, rows, heads = self.rollout(U)
        return TrajectoryPlan(rows, self.dt, heads, self.model.name)

    def _window(self):
        reach = self.horizon * self.dt * (max(self.v_ref, 1.0) * 2.0) + 5.0
        return self.s_hint - 1.0, self.s_hint + reach

    def tracking_residuals(self, rows, U, S=None):
        """Residual vector ``e`` with ``J = |e|^2`` and its Jacobians.

        Returns ``(e, de_drows, de_dU)`` with dense Jacobians over the
        flattened rows and inputs. ``S`` is the rolled-out physical state;
        it is recomputed from ``U`` when omitted.
        """
        w = self.weights
        N = self.horizon
        rd = self.model.row_dim
        lo, hi = self._window()
        s_proj, lat, tan, normal = self.path.project(rows[:, :2], lo, hi)
        sq = math.sqrt
        if self.model.name == "bicycle":
            v = rows[:, 2]
            neg = np.minimum(v, 0.0)
            over = np.maximum(v - self.v_ref, 0.0)
            e = np.concatenate([
                sq(w.q_v) * (v - self.v_ref),
                sq(w.q_lat) * lat,
                sq(w.r_a) * rows[:, 3],
                sq(w.r_beta) * rows[:, 4],
                sq(w.q_neg_speed) * neg,
                sq(w.q_over_speed) * over,
                sq(w.q_progress) * (s_proj - self.s_hint - self.v_ref * self.dt * np.arange(1, N + 1)),
            ])
            # terminal heading: chord length 2 sin(d/2) of the angle to the path tangent
            Um = np.asarray(U, dtype=float).reshape(N, -1)
            if S is None:
                S = self.model.rollout(self.state, Um, self.dt)
            dpsi = S[-1, 2] - math.atan2(tan[-1, 1], tan[-1, 0])
            e = np.append(e, sq(w.q_heading_end) * 2.0 * math.sin(0.5 * dpsi))
            Jr = np.zeros((7 * N + 1, N * rd))
            idx = np.arange(N)
            Jr[idx, idx * rd + 2] = sq(w.q_v)
            Jr[N + idx, idx * rd + 0] = sq(w.q_lat) * normal[:, 0]
            Jr[N + idx, idx * rd + 1] = sq(w.q_lat) * normal[:, 1]
            Jr[2 * N + idx, idx * rd + 3] = sq(w.r_a)
            Jr[3 * N + idx, idx * rd + 4] = sq(w.r_beta)
            Jr[4 * N + idx, idx * rd + 2] = sq(w.q_neg_speed) * (v < 0)
            Jr[5 * N + idx, idx * rd + 2] = sq(w.q_over_speed) * (v > self.v_ref)
            Jr[6 * N + idx, idx * rd + 0] = sq(w.q_progress) * tan[:, 0]
            Jr[6 * N + idx, idx * rd + 1] = sq(w.q_progress) * tan[:, 1]
            JU = np.zeros((7 * N + 1, U.size))
            JU[-1] = sq(w.q_heading_end) * math.cos(0.5 * dpsi) * self.model.final_heading_gradient(S, Um, self.dt)
            return e, Jr, JU
        # holonomic: velocity vector tracks v_ref along the path tangent
        vel = rows[:, 2:4]
        target = self.v_ref * tan
        e = np.concatenate([
            sq(w.q_v) * (vel - target).ravel(),
            sq(w.q_lat) * lat,
            sq(w.r_a) * np.asarray(U, dtype=float).ravel(),
        ])
        Jr = np.zeros((5 * N, N * rd))
        idx = np.arange(N)
        Jr[2 * idx, idx * rd + 2] = sq(w.q_v)
        Jr[2 * idx + 1, idx * rd + 3] = sq(w.q_v)
        Jr[2 * N + idx, idx * rd + 0] = sq(w.q_lat) * normal[:, 0]
        Jr[2 * N + idx, idx * rd + 1] = sq(w.q_lat) * normal[:, 1]
        JU = np.zeros((5 * N, U.size))
        JU[3 * N:, :] = sq(w.r_a) * np.eye(U.size)
        return e, Jr, JU

    def tracking_cost(self, U) -> float:
        U = np.asarray(U, dtype=float).reshape(self.horizon, self.model.input_dim)
        S, rows, _ = self.rollout(U)
        e, _, _ = self.tracking_residuals(rows, U, S)
        return float(e @ e)


# --------------------------------------------------------------------------
# box-constrained quadratic step


def box_newton_qp(H, g, lower, upper, max_iter=50, tol=1e-10):
    """min 0.5 d'Hd + g'd over ``lower <= d <= upper`` (H positive definite).

    Projected Newton with an active set chosen from the gradient sign at
    the bounds and a projected Armijo search.
    """
    n = g.size
    d = np.clip(np.zeros(n), lower, upper)
    q = lambda v: 0.5 * v @ H @ v + g @ v  # noqa: E731
    for _ in range(max_iter):
        grad = H @ d + g
        eps = min(1e-8, np.max(np.abs(d - np.clip(d - grad, lower, upper))))
        act = ((d <= lower + eps) & (grad > 0)) | ((d >= upper - eps) & (grad < 0))
        free = ~act
        pg = d - np.clip(d - grad, lower, upper)
        if np.max(np.abs(pg)) <= tol:
            break
        step = np.zeros(n)
        if np.any(free):
            Hf = H[np.ix_(free, free)]
            step[free] = -np.linalg.solve(Hf, grad[free])
        if np.max(np.abs(step)) == 0:
            step = -grad
        f0 = q(d)
        t = 1.0
        while True:
            cand = np.clip(d + t * step, lower, upper)
            if q(cand) <= f0 + 1e-4 * grad @ (cand - d) or t < 1e-10:
                break
            t *= 0.5
        if np.max(np.abs(cand - d)) < 1e-15:
            break
        d = cand
    return d


@dataclass
class XUpdateResult:
    inputs: np.ndarray
    plan: TrajectoryPlan
    cost: float
    projected_gradient: float
    iterations: int
    degraded: bool = False


def solve_penalized_tracking(local: LocalProblem, target, weight, U0, max_iter=20, tol=1e-6) -> XUpdateResult:
    """Minimize ``J(x(U)) + |sqrt(weight) * (x(U) - target)|^2`` over the input box.

    ``target`` and ``weight`` are (N, row_dim) arrays; the consensus terms
    of the trajectory update reduce to this form after completing the
    square. Projected Gauss-Newton with a backtracking line search.
    """
    N, m = local.horizon, local.model.input_dim
    lower, upper = local.lower, local.upper
    U = np.clip(np.asarray(U0, dtype=float).reshape(-1), lower, upper)
    target = np.asarray(target, dtype=float).ravel()
    sw = np.sqrt(np.asarray(weight, dtype=float).ravel())

    def evaluate(Uf):
        Um = Uf.reshape(N, m)
        S, rows, heads = local.rollout(Um)
        e, Jr, JU = local.tracking_residuals(rows, Um, S)
        c = sw * (rows.ravel() - target)
        res = np.concatenate([e, c])
        return S, rows, heads, res, Jr, JU

    S, rows, heads, res, Jr, JU = evaluate(U)
    F = res @ res
    pg_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        D = local.model.row_jacobian(S, U.reshape(N, m), local.dt)
        J = np.vstack([Jr @ D + JU, sw[:, None] * D])
        grad = J.T @ res
        pg_norm = float(np.max(np.abs(U - np.clip(U - grad, lower, upper))))
        if pg_norm <= tol:
            break
        H = J.T @ J + 1e-9 * np.eye(U.size)
        step = box_newton_qp(H, grad, lower - U, upper - U)
        t = 1.0
        slope = grad @ step
        while True:
            Un = U + t * step
            Sn, rowsn, headsn, resn, Jrn, JUn = evaluate(Un)
            Fn = resn @ resn
            if Fn <= F + 1e-4 * t * slope or t < 1e-6:
                break
            t *= 0.5
        if Fn > F:
            break
        rel = (F - Fn) / max(F, 1e-12)
        U, S, rows, heads, res, Jr, JU, F = Un, Sn, rowsn, headsn, resn, Jrn, JUn, Fn
        if rel < 1e-12:
            break
    plan = TrajectoryPlan(rows, local.dt, heads, local.model.name)
    return XUpdateResult(U.reshape(N, m), plan, float(F), pg_norm, it)
