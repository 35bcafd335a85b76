"""Per-agent OA-ADMM model predictive controller.

Each agent owns its plan ``x_i``, a copy of its own plan ``z_ii`` and a copy
``z_ij`` of every neighbor's plan, with one multiplier and one penalty per
copy. An iteration runs

    x-update   track the reference while staying close to z_ii and to the
               neighbors' copies of this agent (z_ji)
    z-update   pull the copies toward the fresh plans subject to linearized
               capsule separation between z_ii and every z_ij
    lam-update mu * lam + rho * (plan - copy)
    rho-update penalties from the adaptation function of the planned gap

Penalty arrays hold one value per horizon step and are broadcast across
the state components of that step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .geometry import CapsuleShape, clearance, clearance_along_plans, pose_segments, separating_halfspaces
from .mpc import LocalProblem, TrajectoryPlan, XUpdateResult, solve_penalized_tracking

log = logging.getLogger(__name__)


@dataclass
class PhiConfig:
    """Adaptation function parameters.

    ``second_exponent`` applies the shaping exponent again when averaging
    the neighbor penalties into the self penalty; set it False to average
    the neighbor penalties as they are.
    """

    D: float = 1.0
    w: float = 1.0
    a: float = 1.0
    phi_min: float = 0.1
    phi_max: float = 10.0
    second_exponent: bool = True

    def __post_init__(self):
        if not (0 < self.phi_min < self.phi_max):
            raise ValueError("need 0 < phi_min < phi_max")
        if not (self.w > 0 and self.a > 0 and self.D >= 0):
            raise ValueError("need w > 0, a > 0, D >= 0")


@dataclass
class MuConfig:
    eta: float = 0.5
    weights: Optional[tuple] = None  # (w_x, w_z, w_lambda, w_rho)

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (4,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("similarity weights must be four non-negative numbers summing to 1")


# --------------------------------------------------------------------------
# adaptation and similarity functions


def phi_from_clearance(d, cfg: PhiConfig) -> np.ndarray:
    """``w * clamp((D / d)^a, phi_min, phi_max)``; non-positive gaps saturate."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(d > 0, (cfg.D / np.where(d > 0, d, 1.0)) ** cfg.a, np.inf)
    if cfg.D == 0:
        ratio = np.where(d > 0, 0.0, ratio)
    return cfg.w * np.clip(ratio, cfg.phi_min, cfg.phi_max)


def phi_ij(plan_i: TrajectoryPlan, plan_j: TrajectoryPlan, cfg: PhiConfig,
           shape_i: CapsuleShape, shape_j: CapsuleShape) -> np.ndarray:
    """Per-step penalty for the link i->j from the planned capsule clearance."""
    return phi_from_clearance(clearance_along_plans(plan_i, plan_j, shape_i, shape_j), cfg)


def phi_ii(rho_links: Sequence[np.ndarray], cfg: PhiConfig, horizon: Optional[int] = None) -> np.ndarray:
    lo, hi = cfg.w * cfg.phi_min, cfg.w * cfg.phi_max
    if len(rho_links) == 0:
        return np.full(horizon or 1, lo)
    stacked = np.asarray([np.asarray(r, dtype=float) for r in rho_links])
    if cfg.second_exponent:
        stacked = stacked ** cfg.a
    return np.clip(cfg.w * stacked.mean(axis=0), lo, hi)


def mu_filtered(prev_mu, rho_JI, cfg: MuConfig, w_i: float = 1.0) -> np.ndarray:
    """First-order filter toward ``min(rho / w_i, 1)``."""
    target = np.minimum(np.asarray(rho_JI, dtype=float) / w_i, 1.0)
    return cfg.eta * np.asarray(prev_mu, dtype=float) + (1.0 - cfg.eta) * target


class Similarity(NamedTuple):
    value: float
    degenerate: bool


def mu_similarity_estimate(trace_t, trace_next, cfg: MuConfig) -> Similarity:
    """Similarity of two converged control steps from their final iterates.

    ``trace_t``/``trace_next`` expose ``x``, ``z``, ``lam`` and ``rho``
    (arrays of the converged iterate). Each variable contributes
    ``1 - |new - old| / |old|`` with its weight; the sum is clamped to [0, 1].
    """
    weights = cfg.weights if cfg.weights is not None else (1.0, 0.0, 0.0, 0.0)
    total = 0.0
    for w, name in zip(weights, ("x", "z", "lam", "rho")):
        if w == 0:
            continue
        old = np.asarray(_final(trace_t, name), dtype=float).ravel()
        new = np.asarray(_final(trace_next, name), dtype=float).ravel()
        ref = np.linalg.norm(old)
        if ref == 0:
            return Similarity(0.0, True)
        total += w * (1.0 - np.linalg.norm(new - old) / ref)
    return Similarity(float(np.clip(total, 0.0, 1.0)), False)


def _final(trace, name):
    if hasattr(trace, "final"):
        state = trace.final
        return state.rho.rho if name == "rho" else getattr(state, name)
    if isinstance(trace, dict):
        return trace[name]
    return getattr(trace, name)


# --------------------------------------------------------------------------
# link state


@dataclass
class SelfLink:
    z: np.ndarray  # (N, d) copy of own plan
    lam: np.ndarray  # (N, d)
    rho: np.ndarray  # (N,)
    mu: np.ndarray  # (N,)


@dataclass
class NeighborLink:
    neighbor: int
    z_ij: np.ndarray  # this agent's copy of the neighbor plan
    lam_ij: np.ndarray
    rho_ij: np.ndarray
    mu_ij: np.ndarray
    z_ji: np.ndarray  # neighbor's copy of this agent's plan (received)
    lam_ji: np.ndarray
    rho_ji: np.ndarray
    x_j: Optional[TrajectoryPlan] = None  # latest neighbor plan (received)
    shape_j: Optional[CapsuleShape] = None


def _coupling_terms(self_link: SelfLink, links):
    yield self_link.z, self_link.lam, self_link.rho
    for link in links:
        yield link.z_ji, link.lam_ji, link.rho_ji


def consensus_target(self_link: SelfLink, links, coupled: Optional[int] = None) -> tuple:
    """Complete the square over the consensus terms of the trajectory update.

    ``sum_c lam_c'(x - z_c) + |R_c (x - z_c)|^2`` equals
    ``|sqrt(W) (x - target)|^2`` up to a constant with ``W = sum rho_c``.
    With ``coupled`` set, only the leading ``coupled`` components of each
    row carry consensus terms.
    """
    W = np.zeros_like(self_link.z)
    acc = np.zeros_like(self_link.z)
    for z, lam, rho in _coupling_terms(self_link, links):
        r = np.asarray(rho, dtype=float)[:, None]
        W = W + r
        acc = acc + r * z - 0.5 * lam
    target = acc / W
    if coupled is not None:
        W = W.copy()
        W[:, coupled:] = 0.0
        target[:, coupled:] = 0.0
    return target, W


def reduced_lagrangian_x(local: LocalProblem, U, self_link: SelfLink, links, coupled: Optional[int] = None) -> tuple:
    """Trajectory-update Lagrangian and its gradient with respect to the inputs."""
    N, m = local.horizon, local.model.input_dim
    Um = np.asarray(U, dtype=float).reshape(N, m)
    S, rows, _ = local.rollout(Um)
    e, Jr, JU = local.tracking_residuals(rows, Um, S)
    value = float(e @ e)
    g_rows = 2.0 * Jr.T @ e
    g_U = 2.0 * JU.T @ e
    cols = slice(None) if coupled is None else slice(0, coupled)
    for z, lam, rho in _coupling_terms(self_link, links):
        diff = np.zeros_like(rows)
        diff[:, cols] = (rows - z)[:, cols]
        lam_c = np.zeros_like(rows)
        lam_c[:, cols] = lam[:, cols]
        lam = lam_c
        r = np.asarray(rho, dtype=float)[:, None]
        value += float(np.sum(lam * diff) + np.sum(r * diff * diff))
        g_rows = g_rows + (lam + 2.0 * r * diff).ravel()
    D = local.model.row_jacobian(S, Um, local.dt)
    return value, D.T @ g_rows + g_U


def x_update(local: LocalProblem, self_link: SelfLink, links, U0=None, max_iter=20, tol=1e-6,
             coupled: Optional[int] = None, restart_below: float = 0.5) -> XUpdateResult:
    """Trajectory update: minimize tracking cost plus consensus terms over the inputs.

    The neighbor terms use what the neighbors hold about this agent
    (``z_ji``, ``lam_ji``, ``rho_ji``).

    A stopped vehicle warm-started from a braking plan can sit in a local
    minimum of the nonconvex objective. Below ``restart_below`` m/s a
    second solve starts from a gentle constant acceleration and the lower
    objective wins.
    """
    target, W = consensus_target(self_link, list(links), coupled)
    if U0 is None:
        U0 = np.zeros((local.horizon, local.model.input_dim))
    best = solve_penalized_tracking(local, target, W, U0, max_iter=max_iter, tol=tol)
    if local.state is not None and local.model.speed(local.state) < restart_below:
        go = np.zeros((local.horizon, local.model.input_dim))
        go[:, 0] = 0.5 * local.model.input_upper[0]
        alt = solve_penalized_tracking(local, target, W, go, max_iter=max_iter, tol=tol)
        if alt.cost < best.cost:
            best = alt
    return best


# --------------------------------------------------------------------------
# copy update


@dataclass
class ZUpdateResult:
    z_ii: np.ndarray
    z_ij: Dict[int, np.ndarray]
    constrained: bool = False
    violated: bool = False
    n_constraints: int = 0


def _ldp(E, f):
    """Least-distance problem ``min |y|  s.t.  E y >= f`` via NNLS.

    Returns ``y`` or ``None`` when the constraints are infeasible.
    """
    n = E.shape[1]
    M = np.vstack([E.T, f[None, :]])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    u, _ = nnls(M, rhs, maxiter=50 * M.shape[1])
    r = M @ u - rhs
    if abs(r[-1]) < 1e-12 or np.linalg.norm(r) < 1e-12:
        return None
    return -r[:n] / r[-1]


def reduced_lagrangian_z(x_i, x_js: Dict[int, np.ndarray], z_ii, z_ijs: Dict[int, np.ndarray],
                         self_link: SelfLink, links: Dict[int, NeighborLink]) -> tuple:
    """Copy-update Lagrangian and gradients with respect to ``z_ii`` and each ``z_ij``."""
    r = self_link.rho[:, None]
    d = x_i - z_ii
    value = float(np.sum(self_link.lam * d) + np.sum(r * d * d))
    g_ii = -self_link.lam - 2.0 * r * d
    g_ij = {}
    for j, link in links.items():
        rj = link.rho_ij[:, None]
        dj = x_js[j] - z_ijs[j]
        value += float(np.sum(link.lam_ij * dj) + np.sum(rj * dj * dj))
        g_ij[j] = -link.lam_ij - 2.0 * rj * dj
    return value, g_ii, g_ij


def z_update(self_plan: TrajectoryPlan, neighbor_plans: Dict[int, TrajectoryPlan], self_link: SelfLink,
             links: Dict[int, NeighborLink], shape_i: CapsuleShape, shapes: Dict[int, CapsuleShape],
             margin: float = 0.0, slack_weight: float = 100.0, anchor_self=None,
             anchor_neighbors: Optional[Dict[int, np.ndarray]] = None, anchor_below: float = 0.0) -> ZUpdateResult:
    """Copy update with per-step linearized capsule separation.

    The separating direction of every (step, neighbor) pair is taken from
    the incoming plans; the copies must then keep their capsules apart
    along that direction by the radii plus ``margin``. Only positions are
    constrained, so every other component takes its unconstrained value
    ``x + lam / (2 rho)``.

    Where the incoming plans overlap their separating direction is
    ill-defined and tends to flip between iterations. If anchor positions
    are given (typically the previous copies, which were kept apart), the
    direction at those steps is taken from the anchors instead.
    """
    x_i = self_plan.states
    t_ii = x_i + self_link.lam / (2.0 * self_link.rho[:, None])
    t_ij = {j: neighbor_plans[j].states + links[j].lam_ij / (2.0 * links[j].rho_ij[:, None]) for j in links}
    if not links:
        return ZUpdateResult(t_ii, t_ij)

    N = x_i.shape[0]
    order = sorted(links)
    nvar = 2 * N * (1 + len(order))
    rows_G, rows_h = [], []
    ai0, ai1 = pose_segments(self_plan.positions, self_plan.headings, np.full(N, shape_i.length))
    hi_dir = np.column_stack([np.cos(self_plan.headings), np.sin(self_plan.headings)])
    for b, j in enumerate(order):
        pj = neighbor_plans[j]
        sj = shapes[j]
        bj0, bj1 = pose_segments(pj.positions, pj.headings, np.full(N, sj.length))
        n, _ = separating_halfspaces(ai0, ai1, shape_i.radius, bj0, bj1, sj.radius)
        if anchor_self is not None and anchor_neighbors is not None and j in anchor_neighbors:
            d_plan = clearance(ai0, ai1, shape_i.radius, bj0, bj1, sj.radius)
            overlap = d_plan < anchor_below
            if np.any(overlap):
                c0, c1 = pose_segments(np.asarray(anchor_self)[:, :2], self_plan.headings, np.full(N, shape_i.length))
                e0, e1 = pose_segments(np.asarray(anchor_neighbors[j])[:, :2], pj.headings, np.full(N, sj.length))
                n_anchor, _ = separating_halfspaces(c0, c1, shape_i.radius, e0, e1, sj.radius)
                n = np.where(overlap[:, None], n_anchor, n)
        hj_dir = np.column_stack([np.cos(pj.headings), np.sin(pj.headings)])
        gap = (shape_i.radius + sj.radius + margin
               + 0.5 * shape_i.length * np.abs((n * hi_dir).sum(1))
               + 0.5 * sj.length * np.abs((n * hj_dir).sum(1)))
        G = np.zeros((N, nvar))
        k = np.arange(N)
        off_j = 2 * N * (1 + b)
        G[k, 2 * k] = n[:, 0]
        G[k, 2 * k + 1] = n[:, 1]
        G[k, off_j + 2 * k] = -n[:, 0]
        G[k, off_j + 2 * k + 1] = -n[:, 1]
        rows_G.append(G)
        rows_h.append(gap)
    G = np.vstack(rows_G)
    h = np.concatenate(rows_h)

    t_vec = np.concatenate([t_ii[:, :2].ravel()] + [t_ij[j][:, :2].ravel() for j in order])
    w = np.concatenate([np.repeat(self_link.rho, 2)] + [np.repeat(links[j].rho_ij, 2) for j in order])
    sw = np.sqrt(w)
    f = h - G @ t_vec
    if np.all(f <= 0):
        return ZUpdateResult(t_ii, t_ij)

    # weights are diagonal and each constraint touches one horizon step, so
    # the problem splits into one small least-distance problem per step
    E = G / sw[None, :]
    M = len(order)
    y = np.zeros(nvar)
    violated = False
    n_active = 0
    for k in np.flatnonzero((f.reshape(M, N) > 0).any(axis=0)):
        rows = k + N * np.arange(M)
        cols = np.concatenate([[2 * k, 2 * k + 1]]
                              + [[2 * N * (1 + b) + 2 * k, 2 * N * (1 + b) + 2 * k + 1] for b in range(M)])
        Ek, fk = E[np.ix_(rows, cols)], f[rows]
        yk = _ldp(Ek, fk)
        if yk is None:
            # infeasible linearization: soft constraints with penalized slack
            violated = True
            Es = np.hstack([Ek, np.eye(M) / math.sqrt(slack_weight)])
            ys = _ldp(Es, fk)
            yk = ys[:cols.size] if ys is not None else np.zeros(cols.size)
        y[cols] = yk
        n_active += M
    if violated:
        log.warning("z-update linearization infeasible; slack relaxation used")
    z_vec = t_vec + y / sw
    z_ii = t_ii.copy()
    z_ii[:, :2] = z_vec[:2 * N].reshape(N, 2)
    z_ij = {}
    for b, j in enumerate(order):
        zj = t_ij[j].copy()
        off = 2 * N * (1 + b)
        zj[:, :2] = z_vec[off:off + 2 * N].reshape(N, 2)
        z_ij[j] = zj
    return ZUpdateResult(z_ii, z_ij, constrained=True, violated=violated, n_constraints=n_active)


# --------------------------------------------------------------------------
# multiplier update


def lambda_update_agent(self_link: SelfLink, links: Dict[int, NeighborLink], mu_self, mu_links: Dict[int, np.ndarray],
                        x_i, x_js: Dict[int, np.ndarray], z_ii, z_ijs: Dict[int, np.ndarray],
                        first_iteration: bool = True):
    """Multiplier update for the self link and every neighbor link.

    Only the first iteration of a control step applies the forgetting
    factor; later iterations in the same step use ``mu = 1``.
    Returns ``(lam_ii, {j: lam_ij})``.
    """
    def mu_of(mu):
        if not first_iteration:
            return 1.0
        mu = np.asarray(mu, dtype=float)
        if np.any(mu < 0) or np.any(mu > 1):
            raise ValueError("similarity factor must lie in [0, 1]")
        return mu[:, None] if mu.ndim == 1 else mu

    lam_ii = mu_of(mu_self) * self_link.lam + self_link.rho[:, None] * (x_i - z_ii)
    lam_ij = {}
    for j, link in links.items():
        lam_ij[j] = mu_of(mu_links[j]) * link.lam_ij + link.rho_ij[:, None] * (x_js[j] - z_ijs[j])
    return lam_ii, lam_ij


# --------------------------------------------------------------------------
# agent


def _shift_rows(a: np.ndarray, extrapolate_positions: bool = False) -> np.ndarray:
    out = np.empty_like(a)
    out[:-1] = a[1:]
    out[-1] = a[-1]
    if extrapolate_positions and a.ndim == 2 and a.shape[0] >= 2:
        out[-1, :2] = 2 * a[-1, :2] - a[-2, :2]
    return out


@dataclass
class AgentOptions:
    adaptive: bool = True  # False: penalties frozen at their initial value and mu = 1
    margin: float = 0.6
    iterations_per_step: int = 1
    x_max_iter: int = 5
    x_tol: float = 1e-6
    coupled_components: Optional[int] = 2  # leading row components coupled; None couples all
    anchor_linearization: bool = True  # plans closer than anchor_below borrow the direction of the previous copies
    anchor_below: float = 0.3


class OAADMMAgent:
    """One vehicle or robot running the OA-ADMM MPC loop."""

    def __init__(self, agent_id: int, local: LocalProblem, shape: CapsuleShape, phi: PhiConfig,
                 mu: Optional[MuConfig] = None, options: Optional[AgentOptions] = None):
        self.id = agent_id
        self.local = local
        self.shape = shape
        self.phi_cfg = phi
        self.mu_cfg = mu or MuConfig()
        self.options = options or AgentOptions()
        N, m = local.horizon, local.model.input_dim
        self.U = np.zeros((N, m))
        self.plan: Optional[TrajectoryPlan] = None
        self.self_link: Optional[SelfLink] = None
        self.links: Dict[int, NeighborLink] = {}
        self.degraded = False
        self.z_violation = False
        self.k = 0

    # -- setup
    def initial_plan(self) -> TrajectoryPlan:
        N, d = self.local.horizon, self.local.model.row_dim
        zero = np.zeros((N, d))
        res = solve_penalized_tracking(self.local, zero, zero, self.U, max_iter=20)
        self.U, self.plan = res.inputs, res.plan
        lo = self.phi_cfg.w * self.phi_cfg.phi_min
        self.self_link = SelfLink(self.plan.states.copy(), np.zeros((N, d)), np.full(N, lo), np.ones(N))
        return self.plan

    def connect(self, j: int, plan_j: TrajectoryPlan, shape_j: CapsuleShape) -> None:
        N = self.local.horizon
        rho = phi_ij(self.plan, plan_j, self.phi_cfg, self.shape, shape_j)
        if not self.options.adaptive:
            rho = np.full(N, float(rho.max()))
        self.links[j] = NeighborLink(
            neighbor=j, z_ij=plan_j.states.copy(), lam_ij=np.zeros_like(plan_j.states), rho_ij=rho,
            mu_ij=np.ones(N), z_ji=self.plan.states.copy(), lam_ji=np.zeros_like(self.plan.states),
            rho_ji=rho.copy(), x_j=plan_j, shape_j=shape_j)
        self.self_link.rho = phi_ii([l.rho_ij for l in self.links.values()], self.phi_cfg, N)
        if not self.options.adaptive:
            self.self_link.rho = np.full(N, float(self.self_link.rho.max()))

    def disconnect(self, j: int) -> None:
        self.links.pop(j, None)

    # -- one OA-ADMM iteration, split at the communication barriers
    def x_step(self) -> TrajectoryPlan:
        try:
            res = x_update(self.local, self.self_link, self.links.values(), self.U,
                           max_iter=self.options.x_max_iter, tol=self.options.x_tol,
                           coupled=self.options.coupled_components)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.warning("agent %s: trajectory update failed (%s); holding previous plan", self.id, exc)
            self.degraded = True
            return self.plan
        self.degraded = False
        self.U, self.plan = res.inputs, res.plan
        return self.plan

    def receive_plan(self, j: int, plan: TrajectoryPlan) -> None:
        self.links[j].x_j = plan

    def copy_step(self, first_iteration: bool = True) -> None:
        """z-update, multiplier update and penalty update."""
        links = self.links
        plans = {j: l.x_j for j, l in links.items()}
        shapes = {j: l.shape_j for j, l in links.items()}
        anchors = {}
        if self.options.anchor_linearization:
            anchors = {"anchor_self": self.self_link.z, "anchor_neighbors": {j: l.z_ij for j, l in links.items()},
                       "anchor_below": self.options.anchor_below}
        zr = z_update(self.plan, plans, self.self_link, links, self.shape, shapes,
                      margin=self.options.margin, slack_weight=10.0 * self.phi_cfg.phi_max, **anchors)
        self.z_violation = zr.violated

        adaptive = self.options.adaptive
        if adaptive and first_iteration:
            w = self.phi_cfg.w
            self.self_link.mu = mu_filtered(self.self_link.mu, self.self_link.rho, self.mu_cfg, w)
            for l in links.values():
                l.mu_ij = mu_filtered(l.mu_ij, l.rho_ij, self.mu_cfg, w)
        mu_self = self.self_link.mu if adaptive else np.ones(self.local.horizon)
        mu_links = {j: (l.mu_ij if adaptive else np.ones(self.local.horizon)) for j, l in links.items()}
        lam_ii, lam_ij = lambda_update_agent(
            self.self_link, links, mu_self, mu_links, self.plan.states,
            {j: p.states for j, p in plans.items()}, zr.z_ii, zr.z_ij, first_iteration)

        self.self_link.z = zr.z_ii
        self.self_link.lam = lam_ii
        for j, l in links.items():
            l.z_ij = zr.z_ij[j]
            l.lam_ij = lam_ij[j]
        if adaptive:
            for j, l in links.items():
                l.rho_ij = phi_ij(self.plan, plans[j], self.phi_cfg, self.shape, shapes[j])
            self.self_link.rho = phi_ii([l.rho_ij for l in links.values()], self.phi_cfg, self.local.horizon)
        self.k += 1

    def outgoing(self) -> Dict[int, tuple]:
        return {j: (l.z_ij.copy(), l.lam_ij.copy(), l.rho_ij.copy()) for j, l in self.links.items()}

    def receive_copy(self, j: int, z_ji, lam_ji, rho_ji) -> None:
        l = self.links[j]
        l.z_ji, l.lam_ji, l.rho_ji = z_ji, lam_ji, rho_ji

    # -- receding horizon
    def first_input(self) -> np.ndarray:
        return self.U[0].copy()

    def advance(self, state, s_hint: float) -> None:
        """Move to the next control step: new measured state, shifted warm start."""
        self.local.state = np.asarray(state, dtype=float)
        self.local.s_hint = float(s_hint)
        self.U = _shift_rows(self.U)
        sl = self.self_link
        sl.z = _shift_rows(sl.z, True)
        sl.lam = _shift_rows(sl.lam)
        sl.rho = _shift_rows(sl.rho)
        sl.mu = _shift_rows(sl.mu)
        for l in self.links.values():
            l.z_ij = _shift_rows(l.z_ij, True)
            l.lam_ij = _shift_rows(l.lam_ij)
            l.rho_ij = _shift_rows(l.rho_ij)
            l.mu_ij = _shift_rows(l.mu_ij)
            l.z_ji = _shift_rows(l.z_ji, True)
            l.lam_ji = _shift_rows(l.lam_ji)
            l.rho_ji = _shift_rows(l.rho_ji)
