"""Synchronous multi-agent world loop, trace recording and scenario runners.

A control tick runs the protocol (for OA-ADMM: trajectory updates, plan
exchange, copy/multiplier/penalty updates, copy exchange), applies the
first planned input with zero-order hold, and integrates the dynamics with
the physics substep. Messages are plain in-process records; every agent
sees what its neighbors sent at the same barrier.

Vehicles are removed from the world once they cross their finish line.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .agent import AgentOptions, MuConfig, OAADMMAgent, PhiConfig
from .geometry import CapsuleShape, clearance, pose_segments
from .mpc import BicycleModel, HolonomicModel, LocalProblem, ReferencePath, TrackingWeights
from .scenario import ClockConfig, ScenarioSpec

log = logging.getLogger(__name__)

VEHICLE_SHAPE = CapsuleShape(length=4.0, radius=1.0)
ROBOT_SHAPE = CapsuleShape(length=0.0, radius=0.5)


# --------------------------------------------------------------------------
# world


@dataclass
class Body:
    """One simulated vehicle or robot.

    ``kind`` selects the state layout: ``bicycle`` ``[x, y, psi, v]``,
    ``holonomic`` ``[x, y, vx, vy]`` and ``path`` ``[s, v]`` for
    velocity-only vehicles pinned to their reference path.
    """

    id: int
    kind: str
    path: ReferencePath
    finish_s: float
    v_ref: float
    shape: CapsuleShape
    state: np.ndarray
    w_scale: float = 1.0
    s: float = 0.0
    active: bool = True
    done_time: Optional[float] = None
    model: object = None

    def pose(self):
        if self.kind == "path":
            p = self.path.point_at(self.state[0])
            return p, float(self.path.heading_at(self.state[0]))
        if self.kind == "bicycle":
            return self.state[:2].copy(), float(self.state[2])
        v = self.state[2:4]
        if np.hypot(*v) > 1e-6:
            return self.state[:2].copy(), float(math.atan2(v[1], v[0]))
        return self.state[:2].copy(), float(self.path.heading_at(self.s))

    def speed(self) -> float:
        if self.kind == "path":
            return float(self.state[1])
        if self.kind == "bicycle":
            return float(self.state[3])
        return float(np.hypot(self.state[2], self.state[3]))

    def progress(self) -> float:
        if self.kind == "path":
            return float(self.state[0])
        s, _, _, _ = self.path.project(self.state[:2], self.s - 2.0, self.s + 10.0)
        return max(self.s, float(s[0]))  # progress never runs backwards


def _initial_state(kind, path: ReferencePath, v):
    p = path.point_at(0.0)
    h = float(path.heading_at(0.0))
    if kind == "bicycle":
        return np.array([p[0], p[1], h, v])
    if kind == "holonomic":
        return np.array([p[0], p[1], v * math.cos(h), v * math.sin(h)])
    return np.array([0.0, v])


@dataclass
class World:
    bodies: List[Body]
    clock: ClockConfig
    t: float = 0.0
    tick: int = 0
    timed_out: bool = False
    path_accel: tuple = (-6.0, 2.5)  # braking / acceleration limits of path vehicles

    def active(self) -> List[Body]:
        return [b for b in self.bodies if b.active]

    @property
    def done(self) -> bool:
        return self.timed_out or not any(b.active for b in self.bodies)


def _integrate(world: World, body: Body, command, substeps: int, h: float):
    """Integrate one control period; returns the crossing time if the finish is reached."""
    crossed = None
    for k in range(substeps):
        s_prev = body.s
        if body.kind == "path":
            a = float(np.clip(command, *world.path_accel))
            s, v = body.state
            v_new = max(0.0, v + h * a)
            body.state = np.array([s + 0.5 * h * (v + v_new), v_new])
        else:
            body.state = body.model.integrate(body.state, command, h, 1)
        # projecting onto the path is the costly part; only needed near the line
        if body.kind == "path" or k == substeps - 1 or body.s > body.finish_s - 1.5:
            body.s = body.progress()
        if crossed is None and body.s >= body.finish_s > s_prev:
            frac = (body.finish_s - s_prev) / max(body.s - s_prev, 1e-12)
            crossed = world.t + (k + frac) * h
    return crossed


def pair_clearances(bodies: List[Body]) -> np.ndarray:
    """Capsule clearance for every unordered pair (NaN when a body is inactive)."""
    n = len(bodies)
    out = []
    poses = [b.pose() if b.active else None for b in bodies]
    for i in range(n):
        for j in range(i + 1, n):
            if poses[i] is None or poses[j] is None:
                out.append(np.nan)
                continue
            (pi, hi), (pj, hj) = poses[i], poses[j]
            a0, a1 = pose_segments(pi, hi, bodies[i].shape.length)
            b0, b1 = pose_segments(pj, hj, bodies[j].shape.length)
            out.append(float(clearance(a0, a1, bodies[i].shape.radius, b0, b1, bodies[j].shape.radius)))
    return np.array(out)


# --------------------------------------------------------------------------
# trace


@dataclass
class WorldTrace:
    dt: float
    ids: List[int]
    pairs: List[tuple]
    times: List[float] = field(default_factory=list)
    states: List[np.ndarray] = field(default_factory=list)  # (n, 4): x, y, v, heading
    clearances: List[np.ndarray] = field(default_factory=list)
    diagnostics: List[dict] = field(default_factory=list)
    completion_times: Dict[int, Optional[float]] = field(default_factory=dict)
    timed_out: bool = False
    degraded_ticks: int = 0
    label: str = ""
    protocol: str = ""
    seed: int = 0
    timeout_s: float = 30.0

    def record(self, world: World, clear: np.ndarray, diag: Optional[dict]):
        rows = np.full((len(world.bodies), 4), np.nan)
        for k, b in enumerate(world.bodies):
            if b.active:
                p, h = b.pose()
                rows[k] = (p[0], p[1], b.speed(), h)
        self.times.append(world.t)
        self.states.append(rows)
        self.clearances.append(clear)
        if diag is not None:
            self.diagnostics.append(diag)

    def clearance_samples(self) -> np.ndarray:
        if not self.clearances or not self.pairs:
            return np.zeros(0)
        c = np.concatenate(self.clearances)
        return c[np.isfinite(c)]

    @property
    def min_clearance(self) -> float:
        c = self.clearance_samples()
        return float(c.min()) if c.size else math.inf

    @property
    def violated(self) -> bool:
        return self.min_clearance < 0.0

    @property
    def duration(self) -> float:
        done = [t for t in self.completion_times.values() if t is not None]
        if self.timed_out or len(done) < len(self.completion_times):
            return math.inf
        return max(done) if done else 0.0

    @property
    def classification(self) -> str:
        if self.violated:
            return "violation"
        if self.timed_out or self.duration > self.timeout_s:
            return "timeout"
        return "resolved"

    def summary(self) -> dict:
        return {
            "label": self.label,
            "protocol": self.protocol,
            "seed": self.seed,
            "completion_times": {str(k): v for k, v in self.completion_times.items()},
            "timed_out": self.timed_out,
            "min_clearance": self.min_clearance,
            "classification": self.classification,
            "degraded_ticks": self.degraded_ticks,
            "ticks": len(self.times),
        }

    def to_csv(self, path) -> None:
        n = len(self.ids)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["tick", "vehicle", "x", "y", "v", "min_clearance"])
            for k, (rows, clear) in enumerate(zip(self.states, self.clearances)):
                for i in range(n):
                    if not np.isfinite(rows[i, 0]):
                        continue
                    mine = [c for (a, b), c in zip(self.pairs, clear) if i in (a, b) and np.isfinite(c)]
                    mc = min(mine) if mine else float("nan")
                    wr.writerow([k, self.ids[i], f"{rows[i, 0]:.6f}", f"{rows[i, 1]:.6f}",
                                 f"{rows[i, 2]:.6f}", f"{mc:.6f}"])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True, default=float))


# --------------------------------------------------------------------------
# protocols


class Protocol:
    """Interface between the world loop and a conflict-resolution scheme."""

    kind = "path"
    name = "none"

    def setup(self, world: World) -> None:
        pass

    def control(self, world: World) -> Dict[int, object]:
        raise NotImplementedError

    def after_physics(self, world: World) -> None:
        pass

    def on_finish(self, world: World, body: Body) -> None:
        pass

    def diagnostics(self) -> Optional[dict]:
        return None


class FreeDriving(Protocol):
    """Path vehicles that hold their reference speed and ignore each other."""

    name = "none"

    def control(self, world):
        return {b.id: 4.0 * (b.v_ref - b.state[1]) for b in world.active()}


@dataclass
class OAADMMSettings:
    phi: PhiConfig = field(default_factory=lambda: PhiConfig(D=1.0, w=1.0, a=1.0, phi_min=0.1, phi_max=10.0))
    mu: MuConfig = field(default_factory=lambda: MuConfig(eta=0.5))
    options: AgentOptions = field(default_factory=AgentOptions)
    horizon: int = 40
    weights: TrackingWeights = field(default_factory=TrackingWeights)
    comm_range: float = 40.0  # links are created between bodies closer than this


class OAADMMProtocol(Protocol):
    """Decentralized MPC coordinated by OA-ADMM (or fixed-penalty ADMM)."""

    def __init__(self, settings: Optional[OAADMMSettings] = None, kind: str = "bicycle"):
        self.settings = settings or OAADMMSettings()
        self.kind = kind
        self.name = "oa-admm" if self.settings.options.adaptive else "admm"
        self.agents: Dict[int, OAADMMAgent] = {}
        self.messages: List[tuple] = []  # (tick, sender, receiver, kind) of the last barrier
        self._diag: Optional[dict] = None

    def setup(self, world: World) -> None:
        st = self.settings
        for b in world.bodies:
            local = LocalProblem(b.model, b.path, b.v_ref, st.horizon, world.clock.dt, st.weights,
                                 state=b.state.copy(), s_hint=b.s)
            phi = PhiConfig(st.phi.D, st.phi.w * b.w_scale, st.phi.a, st.phi.phi_min, st.phi.phi_max,
                            st.phi.second_exponent)
            ag = OAADMMAgent(b.id, local, b.shape, phi, st.mu, AgentOptions(**vars(st.options)))
            ag.initial_plan()
            self.agents[b.id] = ag
        self._link_new_pairs(world)

    def _link_new_pairs(self, world: World) -> None:
        act = world.active()
        new = []
        for a in act:
            for b in act:
                if a.id >= b.id or b.id in self.agents[a.id].links:
                    continue
                if np.hypot(*(a.pose()[0] - b.pose()[0])) > self.settings.comm_range:
                    continue
                new.append((a.id, b.id))
        for i, j in new:
            ai, aj = self.agents[i], self.agents[j]
            ai.connect(j, aj.plan, aj.shape)
            aj.connect(i, ai.plan, ai.shape)
        if new:
            # initial copies, multipliers and penalties go through one exchange
            touched = sorted({k for p in new for k in p})
            self._exchange_copies(world, touched)

    def _exchange_copies(self, world: World, ids) -> None:
        outbox = {i: self.agents[i].outgoing() for i in ids}
        for i in ids:
            for j, msg in outbox[i].items():
                if j in self.agents and i in self.agents[j].links:
                    self.agents[j].receive_copy(i, *msg)
                    self.messages.append((world.tick, i, j, "copy"))

    def control(self, world: World):
        self.messages = []
        self._link_new_pairs(world)
        ids = [b.id for b in world.active()]
        for it in range(self.settings.options.iterations_per_step):
            plans = {i: self.agents[i].x_step() for i in ids}
            for i in ids:
                for j in self.agents[i].links:
                    self.agents[i].receive_plan(j, plans[j])
                    self.messages.append((world.tick, j, i, "plan"))
            for i in ids:
                self.agents[i].copy_step(first_iteration=(it == 0))
            self._exchange_copies(world, ids)
        self._diag = self._collect(ids)
        return {i: self.agents[i].first_input() for i in ids}

    def _collect(self, ids) -> dict:
        rmax, rho_lo, rho_hi, mu_lo = 0.0, math.inf, 0.0, 1.0
        degraded = 0
        zviol = 0
        for i in ids:
            ag = self.agents[i]
            sl = ag.self_link
            rmax = max(rmax, float(np.max(np.abs(ag.plan.states - sl.z))))
            rhos = [sl.rho] + [l.rho_ij for l in ag.links.values()]
            rho_lo = min(rho_lo, min(float(r.min()) for r in rhos))
            rho_hi = max(rho_hi, max(float(r.max()) for r in rhos))
            mu_lo = min(mu_lo, float(sl.mu.min()))
            degraded += int(ag.degraded)
            zviol += int(ag.z_violation)
        return {"primal_inf": rmax, "rho_min": rho_lo, "rho_max": rho_hi, "mu_min": mu_lo,
                "degraded": degraded, "z_violation": zviol}

    def diagnostics(self):
        return self._diag

    def after_physics(self, world: World) -> None:
        for b in world.active():
            self.agents[b.id].advance(b.state, b.s)

    def on_finish(self, world: World, body: Body) -> None:
        ag = self.agents.pop(body.id, None)
        if ag is None:
            return
        for other in self.agents.values():
            other.disconnect(body.id)


# --------------------------------------------------------------------------
# loop


def step_world(world: World, protocol: Protocol, trace: Optional[WorldTrace] = None) -> World:
    """Advance the world by one control tick."""
    commands = protocol.control(world)
    diag = protocol.diagnostics()
    n_sub = world.clock.substeps
    h = world.clock.dt / n_sub
    finished = []
    for b in world.active():
        cmd = commands.get(b.id)
        if cmd is None:
            cmd = 0.0 if b.kind == "path" else np.zeros(2)
        crossed = _integrate(world, b, cmd, n_sub, h)
        if crossed is not None:
            b.done_time = crossed
            finished.append(b)
    world.t = (world.tick + 1) * world.clock.dt
    world.tick += 1
    protocol.after_physics(world)
    if trace is not None:
        if diag is not None and diag.get("degraded"):
            trace.degraded_ticks += 1
        trace.record(world, pair_clearances(world.bodies), diag)
    for b in finished:
        b.active = False
        protocol.on_finish(world, b)
    if world.t >= world.clock.timeout_s - 1e-9 and any(b.active for b in world.bodies):
        world.timed_out = True
    return world


def run_world(world: World, protocol: Protocol, label="", seed=0) -> WorldTrace:
    n = len(world.bodies)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    trace = WorldTrace(world.clock.dt, [b.id for b in world.bodies], pairs, label=label,
                       protocol=protocol.name, seed=seed, timeout_s=world.clock.timeout_s)
    protocol.setup(world)
    trace.record(world, pair_clearances(world.bodies), None)
    while not world.done:
        step_world(world, protocol, trace)
    trace.completion_times = {b.id: b.done_time for b in world.bodies}
    trace.timed_out = world.timed_out
    return trace


def build_world(spec: ScenarioSpec, clock: Optional[ClockConfig] = None, kind: str = "bicycle") -> World:
    clock = clock or ClockConfig()
    speeds = spec.reference_speeds()
    bodies = []
    for i, (path, finish) in enumerate(spec.paths()):
        model = BicycleModel() if kind == "bicycle" else (HolonomicModel() if kind == "holonomic" else None)
        bodies.append(Body(i, kind, path, finish, float(speeds[i]), VEHICLE_SHAPE,
                           _initial_state(kind, path, float(speeds[i])), model=model))
    return World(bodies, clock)


def make_protocol(spec: ScenarioSpec, settings: Optional[OAADMMSettings] = None) -> Protocol:
    from . import baselines

    if spec.protocol in ("oa-admm", "admm"):
        st = settings or OAADMMSettings()
        if spec.protocol == "admm":
            st = OAADMMSettings(st.phi, st.mu, AgentOptions(**{**vars(st.options), "adaptive": False}),
                                st.horizon, st.weights, st.comm_range)
        return OAADMMProtocol(st, kind="bicycle")
    if spec.protocol == "reactive":
        return baselines.ReactivePriority(spec.fidelity, spec.geometry.half_width)
    if spec.protocol == "timeslot":
        return baselines.TimeslotReservation(spec.fidelity, spec.geometry.half_width)
    return FreeDriving()


def run_scenario(spec: ScenarioSpec, clock: Optional[ClockConfig] = None,
                 settings: Optional[OAADMMSettings] = None) -> WorldTrace:
    """Run a scenario until every vehicle crosses its finish line or the timeout hits."""
    protocol = make_protocol(spec, settings)
    world = build_world(spec, clock, protocol.kind)
    return run_world(world, protocol, label=spec.label, seed=spec.seed)


# --------------------------------------------------------------------------
# four-robot crossing


@dataclass
class RobotCrossing:
    """Layout of the four-robot crossing used for tuning studies."""

    spawn_distance: float = 6.0
    finish_distance: float = 6.0
    lane_offset: float = 0.25  # lanes nearly share the center line, so robots must negotiate
    v_ref: float = 1.0
    horizon: int = 20
    run_out: float = 10.0

    def paths(self):
        # (start, heading, horizontal lane)
        d, o = self.spawn_distance, self.lane_offset
        setups = [
            ((o, -d), math.pi / 2, False),  # northbound
            ((-o, d), -math.pi / 2, False),  # southbound
            ((-d, -o), 0.0, True),  # eastbound
            ((d, o), math.pi, True),  # westbound
        ]
        out = []
        for start, h, horizontal in setups:
            length = self.spawn_distance + self.finish_distance + self.run_out
            path = ReferencePath.from_pieces(start, h, [("straight", length)])
            out.append((path, self.spawn_distance + self.finish_distance, horizontal))
        return out

    @property
    def free_time(self) -> float:
        return (self.spawn_distance + self.finish_distance) / self.v_ref


ROBOT_CLOCK = ClockConfig(control_hz=10.0, physics_hz=40.0, timeout_s=30.0)


def _robot_settings(D: float, w: float, adaptive: bool, layout: RobotCrossing,
                    settings: Optional[OAADMMSettings]) -> OAADMMSettings:
    base = settings or OAADMMSettings(weights=TrackingWeights(q_v=1.0, q_lat=4.0, r_a=0.1),
                                      options=AgentOptions(margin=0.3, coupled_components=None))
    phi = PhiConfig(D, w, base.phi.a, base.phi.phi_min, base.phi.phi_max, base.phi.second_exponent)
    return OAADMMSettings(phi, base.mu, AgentOptions(**{**vars(base.options), "adaptive": adaptive}),
                          layout.horizon, base.weights, base.comm_range)


def four_robot_crossing(D: float, w: float, adaptive: bool = True, clock: Optional[ClockConfig] = None,
                        layout: Optional[RobotCrossing] = None, settings: Optional[OAADMMSettings] = None,
                        double_horizontal: bool = True, robots: Optional[Sequence[int]] = None) -> WorldTrace:
    """Four holonomic robots reach a common crossing at the same time.

    Robots on the horizontal lane get twice the importance weight, which
    breaks the symmetry that otherwise invites deadlock. ``robots`` keeps
    only the listed robots (all four by default).
    """
    clock = clock or ROBOT_CLOCK
    layout = layout or RobotCrossing()
    st = _robot_settings(D, w, adaptive, layout, settings)
    keep = range(4) if robots is None else sorted(set(robots))
    bodies = []
    for i, (path, finish, horizontal) in enumerate(layout.paths()):
        if i not in keep:
            continue
        bodies.append(Body(i, "holonomic", path, finish, layout.v_ref, ROBOT_SHAPE,
                           _initial_state("holonomic", path, layout.v_ref),
                           w_scale=2.0 if (horizontal and double_horizontal) else 1.0, model=HolonomicModel()))
    world = World(bodies, clock)
    proto = OAADMMProtocol(st, kind="holonomic")
    return run_world(world, proto, label=f"D={D:g},w={w:g}", seed=0)


def single_robot_run(index: int, settings: Optional[OAADMMSettings] = None,
                     clock: Optional[ClockConfig] = None, layout: Optional[RobotCrossing] = None) -> float:
    """Completion time of one crossing robot driving alone."""
    tr = four_robot_crossing(1.0, 1.0, True, clock, layout, settings, robots=[index])
    t = tr.completion_times[index]
    return math.inf if t is None else float(t)
