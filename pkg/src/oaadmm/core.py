"""Vector-penalty ADMM for consensus-form problems.

Solves ``min f(x) + g(z)  s.t.  A x + B z = c`` with the iteration

    x+   = argmin_x L(x, z, lam; rho)
    z+   = argmin_z L(x+, z, lam; rho)
    lam+ = mu * lam + rho * r+            (r+ = A x+ + B z+ - c)
    rho+ = adaptation(...)

where ``L`` is the augmented Lagrangian with a diagonal penalty
``R = diag(sqrt(rho))``. ``mu`` is a forgetting factor on the multipliers
and ``rho`` a per-constraint penalty vector; ``mu = 1`` with a constant
``rho`` is classical ADMM with a weighted penalty.

Diagnostics (Lyapunov value, suboptimality bounds, the online dominance
check) live here too, so tests can audit a trace after the fact.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class SubsolverError(RuntimeError):
    """Raised by an x/z subsolver that could not reach its tolerance."""


class SolverError(RuntimeError):
    def __init__(self, iteration: int, cause: BaseException):
        super().__init__(f"subsolver failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


# --------------------------------------------------------------------------
# problem data


class QuadraticObjective:
    """``0.5 x'Px + q'x + const`` restricted to an optional box.

    The box is treated as an indicator: :meth:`value` reports the quadratic
    part, callers are expected to evaluate it at feasible points.
    """

    def __init__(self, P, q, lower=None, upper=None, const: float = 0.0):
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        self.q = np.asarray(q, dtype=float).reshape(-1)
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        self.lower = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,)).copy()
        self.upper = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("empty box")
        self.const = float(const)

    @property
    def dim(self) -> int:
        return self.q.size

    @property
    def bounded(self) -> bool:
        return bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)

    def gradient(self, x) -> np.ndarray:
        return self.P @ np.asarray(x, dtype=float) + self.q

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


@dataclass
class ConsensusProblem:
    f: object
    g: object
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        p = self.c.size
        if self.A.shape[0] != p or self.B.shape[0] != p:
            raise ValueError(f"A is {self.A.shape}, B is {self.B.shape}, c has {p} rows")
        for name, obj, cols in (("f", self.f, self.n), ("g", self.g, self.m)):
            dim = getattr(obj, "dim", None)
            if dim is not None and dim != cols:
                raise ValueError(f"{name} acts on {dim} variables but the coupling matrix has {cols} columns")

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.c.size

    def residual(self, x, z) -> np.ndarray:
        x, z = self._check(x, z)
        return self.A @ x + self.B @ z - self.c

    def objective(self, x, z) -> float:
        return float(self.f.value(x) + self.g.value(z))

    def _check(self, x, z):
        x = np.asarray(x, dtype=float).reshape(-1)
        z = np.asarray(z, dtype=float).reshape(-1)
        if x.size != self.n or z.size != self.m:
            raise ValueError(f"expected x in R^{self.n}, z in R^{self.m}; got {x.size}, {z.size}")
        return x, z


class PenaltyVector:
    """Positive per-constraint penalties with the diagonal view ``R = diag(sqrt(rho))``."""

    __slots__ = ("rho",)

    def __init__(self, rho):
        rho = np.array(rho, dtype=float).reshape(-1)
        if rho.size == 0 or not np.all(np.isfinite(rho)) or np.any(rho <= 0):
            raise ValueError("penalty elements must be finite and strictly positive")
        self.rho = rho

    @classmethod
    def uniform(cls, p: int, value: float) -> "PenaltyVector":
        return cls(np.full(p, float(value)))

    def __len__(self):
        return self.rho.size

    @property
    def R_diag(self) -> np.ndarray:
        return np.sqrt(self.rho)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.R_diag)

    def scale(self, v) -> np.ndarray:
        """``R @ R @ v`` computed as a Hadamard product."""
        return self.rho * np.asarray(v, dtype=float)


@dataclass
class IterateState:
    x: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    rho: PenaltyVector
    k: int = 0
    t: int = 0

    def copy(self) -> "IterateState":
        return IterateState(self.x.copy(), self.z.copy(), self.lam.copy(), PenaltyVector(self.rho.rho), self.k, self.t)


@dataclass
class ResidualPair:
    r: np.ndarray
    s: np.ndarray

    @property
    def primal_inf(self) -> float:
        return float(np.max(np.abs(self.r))) if self.r.size else 0.0

    @property
    def dual_inf(self) -> float:
        return float(np.max(np.abs(self.s))) if self.s.size else 0.0


@dataclass
class SaddlePoint:
    x_star: np.ndarray
    z_star: np.ndarray
    lambda_star: np.ndarray
    p_star: float


def unit_similarity(state: IterateState, k_in_step: int) -> float:
    return 1.0


def constant_adaptation(state: IterateState, residuals: ResidualPair) -> np.ndarray:
    return state.rho.rho


@dataclass
class SolverConfig:
    max_iterations_per_step: int = 1000
    primal_tolerance: float = 1e-6
    dual_tolerance: float = 1e-6
    adaptation_fn: Callable[[IterateState, ResidualPair], np.ndarray] = constant_adaptation
    similarity_fn: Callable[[IterateState, int], object] = unit_similarity

    def __post_init__(self):
        if self.max_iterations_per_step < 1:
            raise ValueError("max_iterations_per_step must be positive")
        if not (self.primal_tolerance > 0 and self.dual_tolerance > 0):
            raise ValueError("tolerances must be strictly positive")


# --------------------------------------------------------------------------
# elementary operations


def augmented_lagrangian(problem: ConsensusProblem, state: IterateState) -> float:
    x, z = problem._check(state.x, state.z)
    lam = np.asarray(state.lam, dtype=float)
    if lam.size != problem.p or len(state.rho) != problem.p:
        raise ValueError("multiplier and penalty must have one entry per constraint")
    r = problem.A @ x + problem.B @ z - problem.c
    Rr = state.rho.R_diag * r
    return float(problem.f.value(x) + problem.g.value(z) + lam @ r + 0.5 * Rr @ Rr)


def augmented_lagrangian_gradient(problem: ConsensusProblem, state: IterateState):
    """Gradients of the augmented Lagrangian in x and in z."""
    x, z = problem._check(state.x, state.z)
    r = problem.A @ x + problem.B @ z - problem.c
    w = state.lam + state.rho.scale(r)
    return problem.f.gradient(x) + problem.A.T @ w, problem.g.gradient(z) + problem.B.T @ w


def compute_residuals(problem: ConsensusProblem, prev: IterateState, nxt: IterateState) -> ResidualPair:
    if prev.k + 1 != nxt.k:
        raise ValueError(f"residuals need consecutive iterates, got k={prev.k} and k={nxt.k}")
    x, z = problem._check(nxt.x, nxt.z)
    r = problem.A @ x + problem.B @ z - problem.c
    s = problem.A.T @ prev.rho.scale(problem.B @ (z - prev.z))
    return ResidualPair(r, s)


def lambda_step(lam, rho: PenaltyVector, r, mu=1.0) -> np.ndarray:
    """Multiplier update with forgetting factor ``mu`` (scalar or per element)."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0) or np.any(mu > 1) or np.any(~np.isfinite(mu)):
        raise ValueError("similarity factor must lie in [0, 1]")
    return mu * np.asarray(lam, dtype=float) + rho.scale(r)


def lyapunov_value(state: IterateState, saddle: SaddlePoint, B) -> float:
    rho = np.asarray(state.rho.rho if isinstance(state.rho, PenaltyVector) else state.rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("penalty elements must be strictly positive")
    R = np.sqrt(rho)
    dl = (np.asarray(state.lam) - saddle.lambda_star) / R
    dz = R * (np.atleast_2d(B) @ (np.asarray(state.z) - saddle.z_star))
    return float(dl @ dl + dz @ dz)


def lyapunov_decrease_gap(prev: IterateState, nxt: IterateState, saddle: SaddlePoint, B, r) -> float:
    """``V(k+1) - V(k) + |R r|^2 + |R B dz|^2``; non-positive when the decrease holds.

    Both Lyapunov values are measured with the penalty in force during the
    step (``prev.rho``).
    """
    B = np.atleast_2d(B)
    R = prev.rho.R_diag
    held = IterateState(nxt.x, nxt.z, nxt.lam, prev.rho, nxt.k, nxt.t)
    v0 = lyapunov_value(prev, saddle, B)
    v1 = lyapunov_value(held, saddle, B)
    Rr = R * r
    Rdz = R * (B @ (nxt.z - prev.z))
    return v1 - v0 + Rr @ Rr + Rdz @ Rdz


def suboptimality_bounds(problem: ConsensusProblem, prev: IterateState, nxt: IterateState, saddle: SaddlePoint):
    """Two-sided bound on ``p(k+1) - p*`` for one iteration.

    Returns ``(lower, gap, upper)`` with ``gap = p(k+1) - p*``. The upper
    bound groups as ``(rho * B dz)' (-r + B (z+ - z*))``.
    """
    r = problem.residual(nxt.x, nxt.z)
    gap = problem.objective(nxt.x, nxt.z) - saddle.p_star
    lower = -float(saddle.lambda_star @ r)
    w = prev.rho.scale(problem.B @ (nxt.z - prev.z))
    upper = -float(nxt.lam @ r) - float(w @ (-r + problem.B @ (nxt.z - saddle.z_star)))
    return lower, gap, upper


# --------------------------------------------------------------------------
# subsolvers


def _solve_box_qp(H, h, lower, upper, x0, tol=1e-12, max_iter=20000):
    """min 0.5 x'Hx + h'x over a box by accelerated projected gradient.

    After the active set settles, the free block is re-solved exactly so the
    result is accurate to rounding.
    """
    if not (np.any(np.isfinite(lower)) or np.any(np.isfinite(upper))):
        return np.linalg.solve(H, -h)
    L = float(np.linalg.eigvalsh(H)[-1])
    if not L > 0:
        raise SubsolverError("subproblem Hessian is not positive")
    step = 1.0 / L
    x = np.clip(x0, lower, upper)
    y = x.copy()
    t = 1.0
    for it in range(max_iter):
        g = H @ y + h
        x_new = np.clip(y - step * g, lower, upper)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if (x_new - x) @ (H @ x_new + h) > 0:  # restart
            t_new = 1.0
            y = x_new.copy()
        else:
            y = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
        g = H @ x + h
        pg = x - np.clip(x - g, lower, upper)
        if np.max(np.abs(pg)) <= 1e-9 * max(1.0, np.max(np.abs(h))):
            break
    else:
        raise SubsolverError(f"projected gradient did not converge in {max_iter} iterations")
    # exact polish on the free variables
    for _ in range(10):
        g = H @ x + h
        at_lo = (x <= lower) & (g > 0)
        at_hi = (x >= upper) & (g < 0)
        free = ~(at_lo | at_hi)
        xp = x.copy()
        xp[at_lo] = lower[at_lo]
        xp[at_hi] = upper[at_hi]
        if np.any(free):
            rhs = -(h[free] + H[np.ix_(free, ~free)] @ xp[~free])
            xp[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.all(xp >= lower) and np.all(xp <= upper):
            g = H @ xp + h
            pg = xp - np.clip(xp - g, lower, upper)
            if np.max(np.abs(pg)) <= tol * max(1.0, np.max(np.abs(h))):
                return xp
            x = xp
        else:
            break
    return x


def quadratic_x_subsolver(problem: ConsensusProblem, z, lam, rho: PenaltyVector):
    """Exact x-step for a :class:`QuadraticObjective` ``f`` (box allowed)."""
    f = problem.f
    A = problem.A
    H = f.P + A.T @ (rho.rho[:, None] * A)
    h = f.q + A.T @ lam + A.T @ rho.scale(problem.B @ z - problem.c)
    return _solve_box_qp(H, h, f.lower, f.upper, np.zeros(problem.n))


def quadratic_z_subsolver(problem: ConsensusProblem, x, lam, rho: PenaltyVector):
    """Exact z-step for a :class:`QuadraticObjective` ``g`` (box allowed)."""
    g = problem.g
    B = problem.B
    H = g.P + B.T @ (rho.rho[:, None] * B)
    h = g.q + B.T @ lam + B.T @ rho.scale(problem.A @ x - problem.c)
    return _solve_box_qp(H, h, g.lower, g.upper, np.zeros(problem.m))


# --------------------------------------------------------------------------
# solver loop


@dataclass
class SolveTrace:
    """Per-iteration record; index 0 holds the initial iterate."""

    states: list = field(default_factory=list)
    residuals: list = field(default_factory=list)  # residuals[k-1] belongs to states[k]
    objective: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> IterateState:
        return self.states[-1]

    @property
    def x(self) -> np.ndarray:
        return np.array([s.x for s in self.states])

    @property
    def z(self) -> np.ndarray:
        return np.array([s.z for s in self.states])

    @property
    def lam(self) -> np.ndarray:
        return np.array([s.lam for s in self.states])

    @property
    def rho(self) -> np.ndarray:
        return np.array([s.rho.rho for s in self.states])

    def rho_changes(self) -> np.ndarray:
        """``|rho(k+1) - rho(k)|_inf`` per iteration, for settling checks."""
        rho = self.rho
        return np.max(np.abs(np.diff(rho, axis=0)), axis=1) if len(rho) > 1 else np.zeros(0)

    def rows(self):
        for k, (state, res, obj) in enumerate(zip(self.states[1:], self.residuals, self.objective[1:]), start=1):
            yield {
                "k": k,
                "primal_inf": res.primal_inf,
                "dual_inf": res.dual_inf,
                "objective": obj,
                "rho_min": float(state.rho.rho.min()),
                "rho_max": float(state.rho.rho.max()),
            }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["k", "primal_inf", "dual_inf", "objective", "rho_min", "rho_max"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def initial_state(problem: ConsensusProblem, rho=1.0, x0=None, z0=None, lam0=None) -> IterateState:
    rho = PenaltyVector(np.broadcast_to(np.asarray(rho, dtype=float), (problem.p,)))
    return IterateState(
        np.zeros(problem.n) if x0 is None else np.asarray(x0, dtype=float).copy(),
        np.zeros(problem.m) if z0 is None else np.asarray(z0, dtype=float).copy(),
        np.zeros(problem.p) if lam0 is None else np.asarray(lam0, dtype=float).copy(),
        rho,
    )


def admm_iteration(problem, state, x_subsolver, z_subsolver, config: SolverConfig, k_in_step: int = 0):
    """One x -> z -> lambda -> rho pass; returns (next_state, residuals)."""
    try:
        x = np.asarray(x_subsolver(problem, state.z, state.lam, state.rho), dtype=float)
        z = np.asarray(z_subsolver(problem, x, state.lam, state.rho), dtype=float)
    except Exception as exc:  # noqa: BLE001 - re-raised with the iteration index
        raise SolverError(state.k + 1, exc) from exc
    nxt = IterateState(x, z, state.lam, state.rho, state.k + 1, state.t)
    res = compute_residuals(problem, state, nxt)
    mu = config.similarity_fn(state, k_in_step)
    nxt.lam = lambda_step(state.lam, state.rho, res.r, mu)
    new_rho = np.asarray(config.adaptation_fn(nxt, res), dtype=float)
    nxt.rho = PenaltyVector(new_rho)  # rejects non-positive output
    return nxt, res


def solve_static(problem: ConsensusProblem, x_subsolver, z_subsolver, config: Optional[SolverConfig] = None,
                 initial: Optional[IterateState] = None) -> SolveTrace:
    """Iterate until both residual infinity norms drop below tolerance.

    Non-convergence is reported through ``trace.converged``; a failing
    subsolver raises :class:`SolverError` carrying the iteration index.
    """
    config = config or SolverConfig()
    state = (initial or initial_state(problem)).copy()
    trace = SolveTrace(states=[state], objective=[problem.objective(state.x, state.z)])
    for k in range(config.max_iterations_per_step):
        state, res = admm_iteration(problem, state, x_subsolver, z_subsolver, config, k_in_step=k)
        trace.states.append(state)
        trace.residuals.append(res)
        trace.objective.append(problem.objective(state.x, state.z))
        if res.primal_inf <= config.primal_tolerance and res.dual_inf <= config.dual_tolerance:
            trace.converged = True
            break
    log.debug("solve_static: %d iterations, converged=%s", trace.iterations, trace.converged)
    return trace


# --------------------------------------------------------------------------
# online diagnostics


@dataclass
class OnlineConvergenceReport:
    x_contraction: float
    x_drift: float
    z_contraction: float
    z_drift: float
    rho_settling: float
    status: str  # "dominating", "not-dominating" or "indeterminate"

    @property
    def dominates(self) -> Optional[bool]:
        if self.status == "indeterminate":
            return None
        return self.status == "dominating"


def online_convergence_monitor(trace_t: SolveTrace, trace_next: SolveTrace) -> OnlineConvergenceReport:
    """Check that progress within a control step outpaces the optimum's drift.

    The final iterate of each step stands in for that step's optimum.
    Contraction is how much closer the step's last iterate is to that proxy
    than its first one; dominance requires it to strictly exceed the drift
    between consecutive proxies, for x and for z.
    """
    nan = float("nan")
    if not trace_t.states or not trace_next.states or trace_t.iterations < 1:
        return OnlineConvergenceReport(nan, nan, nan, nan, nan, "indeterminate")
    first, last = trace_t.states[0], trace_t.states[-1]
    x_star, z_star = last.x, last.z
    x_next, z_next = trace_next.states[-1].x, trace_next.states[-1].z
    if x_next.shape != x_star.shape or z_next.shape != z_star.shape:
        return OnlineConvergenceReport(nan, nan, nan, nan, nan, "indeterminate")
    xc = float(np.linalg.norm(first.x - x_star) - np.linalg.norm(last.x - x_star))
    zc = float(np.linalg.norm(first.z - z_star) - np.linalg.norm(last.z - z_star))
    xd = float(np.linalg.norm(x_next - x_star))
    zd = float(np.linalg.norm(z_next - z_star))
    changes = trace_t.rho_changes()
    settle = float(changes[-1]) if changes.size else 0.0
    ok = xc > xd and zc > zd
    return OnlineConvergenceReport(xc, xd, zc, zd, settle, "dominating" if ok else "not-dominating")


def stack_traces(traces: Sequence[SolveTrace]):
    """Pairwise monitor reports over consecutive control-step traces."""
    return [online_convergence_monitor(a, b) for a, b in zip(traces[:-1], traces[1:])]
