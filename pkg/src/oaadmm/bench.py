"""Benchmark harness: delay metrics, penetration statistics, the (D, w) sweep
and the conflict-case benchmark with its report files.

Delay bookkeeping
-----------------
A vehicle's delay is its completion time minus the completion time of the
same vehicle (same path, same drawn reference speed, same protocol) driving
alone. A case's delay is the sum over its vehicles, which makes it directly
comparable with the geometric estimate, where a single vehicle yields.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .scenario import MANEUVERS, RELATIVE_ARMS, ClockConfig, ScenarioSpec, enumerate_conflict_cases
from .sim import VEHICLE_SHAPE, OAADMMSettings, WorldTrace, four_robot_crossing, run_scenario

log = logging.getLogger(__name__)

CLASSES = ("resolved", "violation", "timeout")


@dataclass
class MetricsRecord:
    """Aggregate over a set of runs.

    ``mean_delay`` and ``mean_added_delay`` are NaN when no run finished.
    Every run falls in exactly one class (violation before timeout).
    """

    runs: int = 0
    mean_time: float = math.nan
    mean_delay: float = math.nan
    mean_added_delay: float = math.nan
    min_clearance: float = math.inf
    msv: float = 0.0
    timeouts: int = 0
    violations: int = 0
    resolved: int = 0

    def __post_init__(self):
        if self.resolved + self.violations + self.timeouts != self.runs:
            raise ValueError("class counts must add up to the number of runs")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# metrics


def msv(trace_or_clearances) -> float:
    """Mean of squared penetration depth over every (tick, pair) sample."""
    c = trace_or_clearances.clearance_samples() if isinstance(trace_or_clearances, WorldTrace) \
        else np.asarray(trace_or_clearances, dtype=float).ravel()
    c = c[np.isfinite(c)]
    if c.size == 0:
        return 0.0
    pen = np.minimum(c, 0.0)
    return float(np.mean(pen * pen))


def added_delay(measured: float, estimated: float) -> float:
    return float(measured) - float(estimated)


class EstimatedDelay(NamedTuple):
    per_vehicle: Tuple[float, ...]
    yielder: Optional[int]
    no_conflict: bool

    @property
    def total(self) -> float:
        return float(sum(self.per_vehicle))


def _occupancy_time(path_p, finish_p, path_y, finish_y, half_width, speed, min_sin, ds):
    """Time the priority path spends crossing the yielder's corridor.

    Only samples where the two paths meet at an angle count; the orthogonal
    displacement divided by the orthogonal speed reduces to arc length over
    speed for each such sample.
    """
    s = np.arange(0.0, finish_p, ds)
    pts = path_p.point_at(s)
    tp = path_p.tangent_at(s)
    sy, lat, ty, _ = path_y.project(pts, 0.0, finish_y)
    # samples whose projection clamps to an end of the yielder path are not beside it
    beside = (sy > 1e-6) & (sy < finish_y - 1e-6)
    inside = beside & (np.abs(lat) <= half_width)
    sin = np.abs(tp[:, 0] * ty[:, 1] - tp[:, 1] * ty[:, 0])
    crossing = inside & (sin >= min_sin)
    return float(np.count_nonzero(crossing) * ds / speed)


def estimated_delay(spec: ScenarioSpec, clearance_margin: float = 0.5, min_angle_deg: float = 15.0,
                    ds: float = 0.05) -> EstimatedDelay:
    """Geometric delay of the cheaper yielding choice in a two-vehicle case.

    The yielder waits while the priority vehicle sweeps across a corridor of
    half-width ``capsule radius + clearance_margin`` around the yielder's
    path. Paths that never come that close, or only run alongside, give zero
    and set ``no_conflict``.
    """
    if len(spec.vehicles) != 2:
        raise ValueError("estimated delay is defined for two-vehicle cases")
    paths = spec.paths()
    speeds = spec.reference_speeds()
    W = VEHICLE_SHAPE.radius + clearance_margin
    min_sin = math.sin(math.radians(min_angle_deg))
    # option k: vehicle k yields to the other one
    cost = []
    for k in (0, 1):
        p = 1 - k
        cost.append(_occupancy_time(paths[p][0], paths[p][1], paths[k][0], paths[k][1],
                                    W, float(speeds[p]), min_sin, ds))
    k = int(np.argmin(cost))
    if cost[k] <= 0.0:
        return EstimatedDelay((0.0, 0.0), None, True)
    per = [0.0, 0.0]
    per[k] = cost[k]
    return EstimatedDelay(tuple(per), k, False)


def classify(trace: WorldTrace) -> str:
    return trace.classification


# --------------------------------------------------------------------------
# tuning sweep


@dataclass
class SweepGrid:
    D_values: Tuple[float, ...] = tuple(round(0.1 * k, 10) for k in range(11))
    w_values: Tuple[float, ...] = tuple(0.25 * k for k in range(1, 21))

    def combinations(self) -> List[Tuple[float, float]]:
        return [(D, w) for D in self.D_values for w in self.w_values]

    def __len__(self) -> int:
        return len(self.D_values) * len(self.w_values)


@dataclass
class SweepRow:
    solver: str
    D: float
    w: float
    classification: str
    delay: float  # mean over robots, NaN when not every robot finished
    msv: float
    min_clearance: float
    wall_s: float = 0.0


SOLVERS = ("oa-admm", "admm")


def _robot_alone_times(settings: Optional[OAADMMSettings]) -> Dict[int, float]:
    """Completion time of each robot with nobody else around (w does not matter alone)."""
    from .sim import single_robot_run

    return {i: single_robot_run(i, settings) for i in range(4)}


def run_sweep(grid: Optional[SweepGrid] = None, solver: str = "oa-admm",
              settings: Optional[OAADMMSettings] = None, progress=None) -> Tuple[List[SweepRow], MetricsRecord]:
    """Run the four-robot crossing for every (D, w) pair with one solver.

    ``solver`` is ``"oa-admm"`` (adaptive penalty and forgetting) or
    ``"admm"`` (penalty frozen, multipliers carried over unchanged). A run
    that raises is logged and counted as a timeout.
    """
    import time

    if solver not in SOLVERS:
        raise ValueError(f"solver must be one of {SOLVERS}")
    grid = grid or SweepGrid()
    alone = _robot_alone_times(settings)
    rows: List[SweepRow] = []
    for D, w in grid.combinations():
        t0 = time.perf_counter()
        try:
            tr = four_robot_crossing(D, w, adaptive=(solver == "oa-admm"), settings=settings)
        except Exception as exc:  # noqa: BLE001 - a failed run is a timeout by definition
            log.warning("sweep run D=%g w=%g (%s) failed: %s", D, w, solver, exc)
            rows.append(SweepRow(solver, D, w, "timeout", math.nan, 0.0, math.nan, time.perf_counter() - t0))
            continue
        done = [(i, t) for i, t in tr.completion_times.items() if t is not None]
        delay = float(np.mean([t - alone[i] for i, t in done])) if len(done) == len(tr.completion_times) \
            else math.nan
        rows.append(SweepRow(solver, D, w, tr.classification, delay, msv(tr), tr.min_clearance,
                             time.perf_counter() - t0))
        if progress is not None:
            progress(rows[-1])
    return rows, sweep_metrics(rows)


def sweep_metrics(rows: Sequence[SweepRow]) -> MetricsRecord:
    counts = {c: sum(r.classification == c for r in rows) for c in CLASSES}
    delays = [r.delay for r in rows if np.isfinite(r.delay)]
    clear = [r.min_clearance for r in rows if np.isfinite(r.min_clearance)]
    return MetricsRecord(
        runs=len(rows),
        mean_delay=float(np.mean(delays)) if delays else math.nan,
        min_clearance=float(min(clear)) if clear else math.inf,
        msv=float(np.mean([r.msv for r in rows])) if rows else 0.0,
        timeouts=counts["timeout"], violations=counts["violation"], resolved=counts["resolved"],
    )


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["solver", "D", "w", "classification", "delay", "msv", "min_clearance"])
        for r in rows:
            wr.writerow([r.solver, f"{r.D:g}", f"{r.w:g}", r.classification, _fmt(r.delay),
                         _fmt(r.msv, 6), _fmt(r.min_clearance)])


# --------------------------------------------------------------------------
# conflict-case benchmark


@dataclass
class CaseResult:
    label: str
    case: Tuple[str, str, str]
    seed: int
    classification: str
    vehicle_times: Tuple[float, ...]
    vehicle_delays: Tuple[float, ...]
    estimated: float
    min_clearance: float
    msv: float

    @property
    def delay(self) -> float:
        return float(sum(self.vehicle_delays))


@dataclass
class BenchmarkResult:
    protocol: str
    fidelity: int
    seeds: Tuple[int, ...]
    cases: List[CaseResult] = field(default_factory=list)
    no_conflict_times: Dict[str, float] = field(default_factory=dict)

    def case_matrix(self) -> Dict[Tuple[str, str, str], float]:
        """Per-case delay averaged over repetitions."""
        acc: Dict[Tuple[str, str, str], List[float]] = {}
        for c in self.cases:
            acc.setdefault(c.case, []).append(c.delay)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def estimated_matrix(self) -> Dict[Tuple[str, str, str], float]:
        acc: Dict[Tuple[str, str, str], List[float]] = {}
        for c in self.cases:
            acc.setdefault(c.case, []).append(c.estimated)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    @property
    def metrics(self) -> MetricsRecord:
        counts = {cl: sum(c.classification == cl for c in self.cases) for cl in CLASSES}
        times = [t for c in self.cases for t in c.vehicle_times if np.isfinite(t)]
        finished = [c for c in self.cases if all(np.isfinite(t) for t in c.vehicle_times)]
        delays = [c.delay for c in finished]
        est = [c.estimated for c in finished]
        mean_delay = float(np.mean(delays)) if delays else math.nan
        return MetricsRecord(
            runs=len(self.cases),
            mean_time=float(np.mean(times)) if times else math.nan,
            mean_delay=mean_delay,
            mean_added_delay=added_delay(mean_delay, float(np.mean(est))) if delays else math.nan,
            min_clearance=min((c.min_clearance for c in self.cases), default=math.inf),
            msv=float(np.mean([c.msv for c in self.cases])) if self.cases else 0.0,
            timeouts=counts["timeout"], violations=counts["violation"], resolved=counts["resolved"],
        )

    @property
    def mean_no_conflict_time(self) -> float:
        return float(np.mean(list(self.no_conflict_times.values()))) if self.no_conflict_times else math.nan

    # -- reports
    def write_case_csv(self, path) -> None:
        """Per-case delay matrix: one row per ego maneuver, one column per (other arm, other maneuver)."""
        mat = self.case_matrix()
        est = self.estimated_matrix()
        cols = [(a, o) for a in RELATIVE_ARMS for o in MANEUVERS]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row"] + [f"{a},{o}" for a, o in cols])
            for label, src in (("est", est), (self.protocol, mat)):
                for e in MANEUVERS:
                    wr.writerow([f"{label} {e}"] + [_fmt(src.get((e, a, o), math.nan)) for a, o in cols])

    def summary(self) -> dict:
        m = self.metrics
        return {
            "protocol": self.protocol,
            "fidelity": self.fidelity,
            "seeds": list(self.seeds),
            "runs": m.runs,
            "mean_time": _round(m.mean_time),
            "mean_no_conflict_time": _round(self.mean_no_conflict_time),
            "mean_delay": _round(m.mean_delay),
            "mean_estimated_delay": _round(float(np.mean(list(self.estimated_matrix().values())))
                                           if self.cases else math.nan),
            "mean_added_delay": _round(m.mean_added_delay),
            "min_clearance": _round(m.min_clearance),
            "msv": _round(m.msv, 8),
            "timeouts": m.timeouts,
            "violations": m.violations,
            "resolved": m.resolved,
        }

    def write_summary(self, csv_path=None, json_path=None) -> None:
        s = self.summary()
        if json_path is not None:
            Path(json_path).write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                wr = csv.writer(fh)
                keys = [k for k in s if k != "seeds"]
                wr.writerow(keys)
                wr.writerow([s[k] for k in keys])

    def write_runs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["case", "seed", "classification", "time_0", "time_1", "delay_0", "delay_1",
                         "estimated", "min_clearance", "msv"])
            for c in self.cases:
                wr.writerow([c.label, c.seed, c.classification, *[_fmt(t) for t in c.vehicle_times],
                             *[_fmt(d) for d in c.vehicle_delays], _fmt(c.estimated),
                             _fmt(c.min_clearance), _fmt(c.msv, 6)])


def _fmt(x: float, digits: int = 4) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{digits}f}"


def _round(x: float, digits: int = 4):
    x = float(x)
    return None if not math.isfinite(x) else round(x, digits)


def run_benchmark(protocol: str = "oa-admm", fidelity: int = 8, repetitions: int = 3, seed: int = 0,
                  clock: Optional[ClockConfig] = None, settings: Optional[OAADMMSettings] = None,
                  cases: Optional[Iterable[Tuple[str, str, str]]] = None, progress=None) -> BenchmarkResult:
    """Run every conflict case ``repetitions`` times for one protocol.

    Repetition ``r`` uses seed ``seed + r``, so reference speeds differ
    between repetitions but match across protocols. No-conflict times are
    measured per protocol by running each vehicle alone.
    """
    seeds = tuple(seed + r for r in range(repetitions))
    wanted = None if cases is None else {tuple(c) for c in cases}
    res = BenchmarkResult(protocol, fidelity, seeds)
    alone: Dict[tuple, float] = {}
    for sd in seeds:
        for spec in enumerate_conflict_cases(protocol, sd, fidelity):
            if wanted is not None and spec.case not in wanted:
                continue
            tr = run_scenario(spec, clock, settings)
            speeds = spec.reference_speeds()
            times, delays = [], []
            for i, v in enumerate(spec.vehicles):
                key = (v.arm, v.maneuver, float(speeds[i]))
                if key not in alone:
                    t_alone = run_scenario(spec.single(i), clock, settings).completion_times[0]
                    alone[key] = math.inf if t_alone is None else float(t_alone)
                t = tr.completion_times.get(i)
                t = math.inf if t is None else float(t)
                times.append(t)
                delays.append(t - alone[key])
            est = estimated_delay(spec).total
            cr = CaseResult(spec.label, spec.case, sd, tr.classification, tuple(times), tuple(delays),
                            est, tr.min_clearance, msv(tr))
            res.cases.append(cr)
            if progress is not None:
                progress(cr)
    res.no_conflict_times = {f"{a}{m}@{v:.6f}": t for (a, m, v), t in sorted(alone.items())}
    return res
