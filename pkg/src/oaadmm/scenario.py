"""Intersection scenarios: arms, maneuvers, reference paths and case enumeration.

World frame: the intersection center is the origin, x points east and y
north. Traffic keeps right, one lane per direction. An arm names the side a
vehicle arrives from (``S``, ``W``, ``N``, ``E``).

Conflict cases are labelled relative to an ego vehicle arriving from the
south: the other vehicle arrives from the ego's left (west), front (north)
or right (east). A case is ``(ego maneuver, other arm, other maneuver)``
with maneuvers ``L`` (left turn), ``F`` (straight) and ``R`` (right turn).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml

from .mpc import ReferencePath

ARMS = ("S", "W", "N", "E")
MANEUVERS = ("L", "F", "R")
RELATIVE_ARMS = ("L", "F", "R")
PROTOCOLS = ("oa-admm", "admm", "reactive", "timeslot", "none")

# heading of travel when arriving from each arm
_APPROACH_HEADING = {"S": math.pi / 2, "W": 0.0, "N": -math.pi / 2, "E": math.pi}
_RELATIVE_TO_WORLD = {"L": "W", "F": "N", "R": "E"}


@dataclass
class ClockConfig:
    control_hz: float = 20.0
    physics_hz: float = 160.0
    timeout_s: float = 30.0

    def __post_init__(self):
        ratio = self.physics_hz / self.control_hz
        if self.control_hz <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("physics rate must be a positive integer multiple of the control rate")
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz

    @property
    def substeps(self) -> int:
        return int(round(self.physics_hz / self.control_hz))


@dataclass
class VehicleSpec:
    arm: str
    maneuver: str
    v_ref: Optional[float] = None  # drawn from the scenario seed when None

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.maneuver not in MANEUVERS:
            raise ValueError(f"maneuver must be one of {MANEUVERS}, got {self.maneuver!r}")


@dataclass
class IntersectionGeometry:
    lane_width: float = 3.5
    half_width: float = 9.0  # half extent of the reservation area
    spawn_distance: float = 30.0
    finish_distance: float = 15.0
    left_radius: float = 9.0
    right_radius: float = 5.0
    run_out: float = 30.0  # path continues past the finish line for the horizon

    @property
    def lane_offset(self) -> float:
        return 0.5 * self.lane_width

    def path(self, arm: str, maneuver: str) -> Tuple[ReferencePath, float]:
        """Reference path and finish-line arc length for one arm and maneuver."""
        h = _APPROACH_HEADING[arm]
        fwd = np.array([math.cos(h), math.sin(h)])
        right = np.array([math.sin(h), -math.cos(h)])
        off = self.lane_offset
        start = -self.spawn_distance * fwd + off * right
        if maneuver == "F":
            lead = self.spawn_distance + self.finish_distance
            return ReferencePath.from_pieces(start, h, [("straight", lead + self.run_out)]), lead
        if maneuver == "L":
            R = self.left_radius
            approach = self.spawn_distance - (R - off)
            exit_len = self.finish_distance - (R - off)
            pieces = [("straight", approach), ("arc", R, math.pi / 2), ("straight", exit_len + self.run_out)]
        else:
            R = self.right_radius
            approach = self.spawn_distance - (R + off)
            exit_len = self.finish_distance - (R + off)
            pieces = [("straight", approach), ("arc", R, -math.pi / 2), ("straight", exit_len + self.run_out)]
        if approach <= 0 or exit_len <= 0:
            raise ValueError("turn radius does not fit the spawn/finish distances")
        finish = approach + R * math.pi / 2 + exit_len
        return ReferencePath.from_pieces(start, h, pieces), finish


@dataclass
class ScenarioSpec:
    """One simulated situation: vehicles, protocol and random seed.

    Reference speeds are ``v_ref`` plus a uniform perturbation drawn from
    ``seed``; the draw does not depend on the protocol, so the same seed
    yields the same speeds for every protocol.
    """

    vehicles: List[VehicleSpec]
    protocol: str = "oa-admm"
    seed: int = 0
    fidelity: int = 8
    v_ref: float = 4.0
    v_perturbation: float = 0.15
    geometry: IntersectionGeometry = field(default_factory=IntersectionGeometry)
    case: Optional[Tuple[str, str, str]] = None  # (ego maneuver, other arm, other maneuver)

    def __post_init__(self):
        self.vehicles = [v if isinstance(v, VehicleSpec) else VehicleSpec(**v) for v in self.vehicles]
        if isinstance(self.geometry, dict):
            self.geometry = IntersectionGeometry(**self.geometry)
        if self.case is not None:
            self.case = tuple(self.case)
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not self.vehicles:
            raise ValueError("a scenario needs at least one vehicle")
        if len(self.vehicles) > 8:
            raise ValueError("at most 8 vehicles are supported")

    @property
    def label(self) -> str:
        if self.case is not None:
            return "{}|{},{}".format(*self.case)
        return "+".join(f"{v.arm}{v.maneuver}" for v in self.vehicles)

    def reference_speeds(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        draws = rng.uniform(-self.v_perturbation, self.v_perturbation, size=8)[: len(self.vehicles)]
        out = self.v_ref + draws
        for i, v in enumerate(self.vehicles):
            if v.v_ref is not None:
                out[i] = v.v_ref
        return out

    def paths(self):
        return [self.geometry.path(v.arm, v.maneuver) for v in self.vehicles]

    def with_protocol(self, protocol: str, fidelity: Optional[int] = None) -> "ScenarioSpec":
        return ScenarioSpec(list(self.vehicles), protocol, self.seed,
                            self.fidelity if fidelity is None else fidelity,
                            self.v_ref, self.v_perturbation, self.geometry, self.case)

    def single(self, i: int) -> "ScenarioSpec":
        """The same vehicle alone, keeping its drawn reference speed."""
        v = self.vehicles[i]
        speed = float(self.reference_speeds()[i])
        return ScenarioSpec([VehicleSpec(v.arm, v.maneuver, speed)], self.protocol, self.seed,
                            self.fidelity, self.v_ref, self.v_perturbation, self.geometry)

    # -- file I/O
    def to_dict(self) -> dict:
        d = asdict(self)
        d["case"] = list(self.case) if self.case is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d["vehicles"] = [VehicleSpec(**v) for v in d.get("vehicles", [])]
        if "geometry" in d and d["geometry"] is not None:
            d["geometry"] = IntersectionGeometry(**d["geometry"])
        else:
            d.pop("geometry", None)
        return cls(**d)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def conflict_case(ego: str, other_arm: str, other: str, protocol="oa-admm", seed=0, fidelity=8) -> ScenarioSpec:
    vehicles = [VehicleSpec("S", ego), VehicleSpec(_RELATIVE_TO_WORLD[other_arm], other)]
    return ScenarioSpec(vehicles, protocol=protocol, seed=seed, fidelity=fidelity, case=(ego, other_arm, other))


def enumerate_conflict_cases(protocol="oa-admm", seed=0, fidelity=8) -> List[ScenarioSpec]:
    """All two-vehicle cases, rows by ego maneuver and columns by (other arm, other maneuver).

    The follower geometry (both vehicles on one arm) is not part of the set.
    """
    return [conflict_case(e, a, o, protocol, seed, fidelity)
            for e, a, o in itertools.product(MANEUVERS, RELATIVE_ARMS, MANEUVERS)]
