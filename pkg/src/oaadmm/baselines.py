"""Grid-reservation protocols used as comparison baselines.

Both protocols drive velocity-only vehicles pinned to their reference path
over an ``n x n`` grid that covers the intersection box.

* ``ReactivePriority`` locks cells when they come within a short lookahead
  window and stops in front of cells owned by someone else; the earlier
  arrival wins and the lower id breaks ties.
* ``TimeslotReservation`` predicts when each of its cells will be occupied,
  delays itself until its time slots are free of other reservations, and
  shapes a slow-down-then-accelerate speed profile meeting those slots.

These are simplified stand-ins for the reactive and predictive families,
not reproductions of any particular published protocol.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import CapsuleShape

STOP_BUFFER = 0.5  # m kept in front of a contested cell
COMFORT_DECEL = 3.0  # m/s^2 used to shape stops and slow-downs
SLOT_BUFFER = 0.25  # s padding around every time slot


@dataclass
class IntersectionGrid:
    """Square reservation grid centered on the intersection."""

    fidelity: int = 8
    half_width: float = 9.0
    table: Dict[int, List[Tuple[int, float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.fidelity < 1:
            raise ValueError("fidelity must be at least 1")

    @property
    def cell_size(self) -> float:
        return 2.0 * self.half_width / self.fidelity

    def cell_bounds(self) -> np.ndarray:
        """(n*n, 4) array of ``xmin, ymin, xmax, ymax`` in row-major cell order."""
        n, c, h = self.fidelity, self.cell_size, self.half_width
        ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        x0 = -h + c * ix.ravel()
        y0 = -h + c * iy.ravel()
        return np.column_stack([x0, y0, x0 + c, y0 + c])

    # -- reservations
    def reserve(self, cell: int, vid: int, t_in: float, t_out: float) -> None:
        self.table.setdefault(cell, []).append((vid, t_in, t_out))

    def release(self, cell: int, vid: int, t: float) -> None:
        entries = self.table.get(cell, [])
        for k, (v, a, b) in enumerate(entries):
            if v == vid and b > t:
                entries[k] = (v, a, max(a, t))

    def conflicts(self, cell: int, vid: int, t_in: float, t_out: float) -> bool:
        for v, a, b in self.table.get(cell, []):
            if v != vid and a < t_out and t_in < b:
                return True
        return False

    def owner(self, cell: int, t: float) -> Optional[int]:
        for v, a, b in self.table.get(cell, []):
            if a <= t < b:
                return v
        return None

    def exclusive(self) -> bool:
        """True when no cell has two overlapping reservations of different vehicles."""
        for entries in self.table.values():
            for k, (v, a, b) in enumerate(entries):
                for v2, a2, b2 in entries[k + 1:]:
                    if v != v2 and a < b2 and a2 < b:
                        return False
        return True


@total_ordering
@dataclass(frozen=True)
class PriorityTicket:
    vehicle: int
    arrival: float
    tie_break: int = 0

    def _key(self):
        return (self.arrival, self.tie_break, self.vehicle)

    def __lt__(self, other: "PriorityTicket"):
        return self._key() < other._key()

    def __eq__(self, other):
        return isinstance(other, PriorityTicket) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


# --------------------------------------------------------------------------
# path occupancy


def path_occupancy(path, finish_s: float, shape: CapsuleShape, grid: IntersectionGrid,
                   ds: float = 0.1) -> List[Tuple[int, float, float]]:
    """Cells swept by a capsule driving along ``path``.

    Returns ``(cell, s_in, s_out)`` sorted by ``s_in``: the capsule centered
    at arc length ``s`` overlaps the cell exactly for ``s_in <= s <= s_out``
    (up to the sampling step).
    """
    s = np.arange(0.0, finish_s + shape.length + 2 * shape.radius + ds, ds)
    centers = path.point_at(s)
    heads = path.heading_at(s)
    u = np.linspace(-0.5, 0.5, 9) * shape.length
    pts = centers[:, None, :] + u[None, :, None] * np.stack([np.cos(heads), np.sin(heads)], -1)[:, None, :]
    b = grid.cell_bounds()
    dx = np.maximum(np.maximum(b[None, None, :, 0] - pts[..., 0, None], pts[..., 0, None] - b[None, None, :, 2]), 0.0)
    dy = np.maximum(np.maximum(b[None, None, :, 1] - pts[..., 1, None], pts[..., 1, None] - b[None, None, :, 3]), 0.0)
    dist = np.sqrt(dx * dx + dy * dy).min(axis=1)  # (S, cells)
    inside = dist <= shape.radius
    out = []
    for c in np.flatnonzero(inside.any(axis=0)):
        idx = np.flatnonzero(inside[:, c])
        out.append((int(c), float(s[idx[0]]), float(s[idx[-1]])))
    out.sort(key=lambda r: (r[1], r[0]))
    return out


@dataclass
class BaselineVehicle:
    """What a protocol step needs to know about one vehicle."""

    id: int
    s: float
    v: float
    v_ref: float
    occupancy: List[Tuple[int, float, float]]
    ticket: Optional[PriorityTicket] = None
    held: set = field(default_factory=set)


def _stop_speed(distance: float, decel: float = COMFORT_DECEL) -> float:
    return math.sqrt(2.0 * decel * max(distance, 0.0))


# --------------------------------------------------------------------------
# reactive protocol


def reactive_priority_step(vehicle: BaselineVehicle, grid: IntersectionGrid, t: float = 0.0,
                           lookahead_s: float = 1.5) -> float:
    """Speed command for one vehicle under the reactive lock rule.

    Once the first remaining cell of the path comes within the lookahead
    window, the vehicle asks for every remaining cell at once. It gets them
    only if none is owned by another vehicle, and then holds them until it
    leaves each one. Without the lock it stops in front of the first
    contested cell.
    """
    remaining = [(c, a, b) for c, a, b in vehicle.occupancy if b > vehicle.s]
    if not remaining:
        return vehicle.v_ref
    window = max(vehicle.v * lookahead_s, 2.0 * STOP_BUFFER)
    first_in = min(a for _, a, _ in remaining)
    if vehicle.held or first_in - vehicle.s > window:
        return vehicle.v_ref
    contested = [a for c, a, _ in remaining if (o := grid.owner(c, t)) is not None and o != vehicle.id]
    if not contested:
        for c, _, _ in remaining:
            if c not in vehicle.held:
                grid.reserve(c, vehicle.id, t, math.inf)
                vehicle.held.add(c)
        return vehicle.v_ref
    stop_at = min(contested) - STOP_BUFFER
    return min(vehicle.v_ref, _stop_speed(stop_at - vehicle.s))


def release_passed_cells(vehicle: BaselineVehicle, grid: IntersectionGrid, t: float) -> None:
    for c, _, b in vehicle.occupancy:
        if c in vehicle.held and vehicle.s > b:
            grid.release(c, vehicle.id, t)
            vehicle.held.discard(c)


# --------------------------------------------------------------------------
# predictive protocol


@dataclass
class SpeedProfile:
    """Piecewise-constant-acceleration profile ``s(t)`` starting at ``t0``."""

    t0: float
    s0: float
    v0: float
    knots: List[Tuple[float, float]]  # (duration, acceleration) segments; constant speed afterwards

    def state(self, t: float) -> Tuple[float, float, float]:
        """``(s, v, a)`` at absolute time ``t``."""
        tau = max(0.0, t - self.t0)
        s, v = self.s0, self.v0
        for dur, a in self.knots:
            if tau <= dur:
                return s + v * tau + 0.5 * a * tau * tau, v + a * tau, a
            s += v * dur + 0.5 * a * dur * dur
            v += a * dur
            tau -= dur
        return s + v * tau, v, 0.0

    def time_at(self, s_target: float, t_max: float = 600.0) -> float:
        """First time the profile reaches ``s_target``."""
        t, s, v = self.t0, self.s0, self.v0
        if s >= s_target:
            return self.t0
        for dur, a in self.knots:
            s_end = s + v * dur + 0.5 * a * dur * dur
            if s_end >= s_target:
                if abs(a) < 1e-12:
                    return t + (s_target - s) / v
                disc = v * v + 2 * a * (s_target - s)
                return t + (-v + math.sqrt(max(disc, 0.0))) / a
            s, v, t = s_end, v + a * dur, t + dur
        if v <= 1e-9:
            return math.inf
        return min(t + (s_target - s) / v, t_max)

    def speeds(self, times) -> np.ndarray:
        return np.array([self.state(t)[1] for t in times])


def delayed_profile(t0: float, s0: float, v_ref: float, s_gate: float, delay: float,
                    decel: float = COMFORT_DECEL, accel: float = 2.0,
                    crawl_min: float = 0.5) -> Optional[SpeedProfile]:
    """Reach ``s_gate`` ``delay`` seconds later than cruising at ``v_ref``.

    Shape: brake at once to a crawl speed ``vc``, hold it, then accelerate
    back to ``v_ref`` exactly at ``s_gate``. Delays that would need a crawl
    below ``crawl_min`` use a full stop with a dwell instead.
    Returns None when the gate is too close for the requested delay.
    """
    if delay <= 1e-9:
        return SpeedProfile(t0, s0, v_ref, [])
    dist = s_gate - s0
    if dist <= 0:
        return None
    t_target = dist / v_ref + delay

    def build(vc, dwell=0.0):
        t_dec = (v_ref - vc) / decel
        t_acc = (v_ref - vc) / accel
        d_dec = (v_ref + vc) / 2 * t_dec
        d_acc = (v_ref + vc) / 2 * t_acc
        d_cruise = dist - d_dec - d_acc
        if d_cruise < -1e-9:
            return None, math.inf
        t_cruise = d_cruise / vc if vc > 1e-9 else 0.0
        if vc <= 1e-9 and d_cruise > 1e-9:
            # crawl speed zero: the cruise distance is covered before braking
            knots = [(d_cruise / v_ref, 0.0), (t_dec, -decel), (dwell, 0.0), (t_acc, accel)]
            return knots, d_cruise / v_ref + t_dec + dwell + t_acc
        knots = [(t_dec, -decel), (t_cruise, 0.0), (dwell, 0.0), (t_acc, accel)]
        return knots, t_dec + t_cruise + dwell + t_acc

    # total time grows as the crawl speed falls; bisect on vc down to a
    # floor, below which a full stop with a dwell is cheaper to follow
    knots, t_floor = build(crawl_min)
    if knots is None or t_floor <= t_target:
        knots, t_full_stop = build(0.0)
        if knots is None or t_full_stop > t_target:
            return None
        knots, _ = build(0.0, dwell=t_target - t_full_stop)
        return SpeedProfile(t0, s0, v_ref, [k for k in knots if k[0] > 0])
    lo, hi = crawl_min, v_ref
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        _, tm = build(mid)
        if tm > t_target:
            lo = mid
        else:
            hi = mid
    knots, _ = build(hi)
    if knots is None:
        return None
    return SpeedProfile(t0, s0, v_ref, [k for k in knots if k[0] > 0])


def _slot_times(profile: SpeedProfile, occupancy):
    return [(c, profile.time_at(a), profile.time_at(b)) for c, a, b in occupancy]


def timeslot_plan_step(vehicle: BaselineVehicle, grid: IntersectionGrid, t: float = 0.0,
                       max_delay: float = 20.0, step: float = 0.05) -> Optional[SpeedProfile]:
    """Earliest conflict-free slot sequence for one vehicle, reserved on the grid.

    Searches the smallest delay for which every cell interval (padded by
    ``SLOT_BUFFER``) is free, reserves those intervals and returns the
    speed profile that meets them. Returns None if no delay up to
    ``max_delay`` can be realized; the caller then falls back to the
    reactive rule.
    """
    remaining = [(c, a, b) for c, a, b in vehicle.occupancy if b > vehicle.s]
    if not remaining:
        return SpeedProfile(t, vehicle.s, vehicle.v_ref, [])
    gate = min(a for _, a, _ in remaining)
    for k in range(int(round(max_delay / step)) + 1):
        delay = k * step
        prof = delayed_profile(t, vehicle.s, vehicle.v_ref, gate, delay)
        if prof is None:
            return None
        slots = _slot_times(prof, remaining)
        if all(not grid.conflicts(c, vehicle.id, a - SLOT_BUFFER, b + SLOT_BUFFER) for c, a, b in slots):
            for c, a, b in slots:
                grid.reserve(c, vehicle.id, a - SLOT_BUFFER, b + SLOT_BUFFER)
            return prof
    return None


# --------------------------------------------------------------------------
# protocol adapters for the world loop

from .sim import Protocol, World  # noqa: E402  (sim imports this module lazily)

_SPEED_GAIN = 4.0  # 1/s, speed command to acceleration


class _GridProtocol(Protocol):
    kind = "path"

    def __init__(self, fidelity: int = 8, half_width: float = 9.0):
        self.grid = IntersectionGrid(fidelity, half_width)
        self.vehicles: Dict[int, BaselineVehicle] = {}

    def setup(self, world: World) -> None:
        for b in world.bodies:
            occ = path_occupancy(b.path, b.finish_s, b.shape, self.grid)
            gate = occ[0][1] if occ else b.finish_s
            ticket = PriorityTicket(b.id, (gate - b.s) / b.v_ref, b.id)
            self.vehicles[b.id] = BaselineVehicle(b.id, b.s, b.speed(), b.v_ref, occ, ticket)

    def _sync(self, world: World) -> List[BaselineVehicle]:
        out = []
        for b in world.active():
            bv = self.vehicles[b.id]
            bv.s, bv.v = float(b.state[0]), float(b.state[1])
            out.append(bv)
        return sorted(out, key=lambda v: v.ticket)

    def on_finish(self, world: World, body) -> None:
        bv = self.vehicles[body.id]
        for c in list(bv.held):
            self.grid.release(c, bv.id, world.t)
        bv.held.clear()


class ReactivePriority(_GridProtocol):
    name = "reactive"

    def control(self, world: World):
        cmds = {}
        for bv in self._sync(world):
            release_passed_cells(bv, self.grid, world.t)
            v_cmd = reactive_priority_step(bv, self.grid, world.t)
            cmds[bv.id] = _SPEED_GAIN * (v_cmd - bv.v)
        return cmds


class TimeslotReservation(_GridProtocol):
    name = "timeslot"

    def __init__(self, fidelity: int = 8, half_width: float = 9.0):
        super().__init__(fidelity, half_width)
        self.profiles: Dict[int, Optional[SpeedProfile]] = {}

    def setup(self, world: World) -> None:
        super().setup(world)
        for bv in sorted(self.vehicles.values(), key=lambda v: v.ticket):
            self.profiles[bv.id] = timeslot_plan_step(bv, self.grid, world.t)

    def control(self, world: World):
        cmds = {}
        dt = world.clock.dt
        for bv in self._sync(world):
            prof = self.profiles.get(bv.id)
            if prof is None:
                release_passed_cells(bv, self.grid, world.t)
                v_cmd = reactive_priority_step(bv, self.grid, world.t)
                cmds[bv.id] = _SPEED_GAIN * (v_cmd - bv.v)
                continue
            # feed-forward plus feedback on the planned position and speed
            s_p, v_p, _ = prof.state(world.t + dt)
            s_now, _, _ = prof.state(world.t)
            v_cmd = v_p + 2.0 * (s_now - bv.s)
            cmds[bv.id] = (v_cmd - bv.v) / dt
        return cmds
