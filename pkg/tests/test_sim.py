import math

import numpy as np
import pytest

from oaadmm.scenario import (
    ClockConfig, ScenarioSpec, VehicleSpec, conflict_case, enumerate_conflict_cases,
)
from oaadmm.sim import (
    OAADMMProtocol, OAADMMSettings, RobotCrossing, build_world, four_robot_crossing, run_scenario, step_world,
)


def test_clock_validation():
    with pytest.raises(ValueError):
        ClockConfig(20.0, 150.0)
    with pytest.raises(ValueError):
        ClockConfig(20.0, 160.0, timeout_s=0.0)
    c = ClockConfig()
    assert c.dt == 0.05 and c.substeps == 8


def test_spec_validation():
    with pytest.raises(ValueError):
        VehicleSpec("Q", "L")
    with pytest.raises(ValueError):
        VehicleSpec("S", "U")
    with pytest.raises(ValueError):
        ScenarioSpec([VehicleSpec("S", "F")], protocol="telepathy")
    with pytest.raises(ValueError):
        ScenarioSpec([])


def test_enumeration():
    cases = enumerate_conflict_cases()
    assert len(cases) == 27
    assert len({c.label for c in cases}) == 27
    for c in cases:
        assert len(c.vehicles) == 2 and c.vehicles[0].arm != c.vehicles[1].arm
    assert "L|R,R" in {c.label for c in cases}


def test_same_seed_same_speeds_across_protocols():
    base = conflict_case("L", "F", "F", seed=5)
    speeds = base.reference_speeds()
    for proto in ("admm", "reactive", "timeslot", "none"):
        assert np.array_equal(base.with_protocol(proto).reference_speeds(), speeds)
    assert np.all(np.abs(speeds - 4.0) <= 0.15)
    assert not np.array_equal(conflict_case("L", "F", "F", seed=6).reference_speeds(), speeds)


def test_single_keeps_drawn_speed():
    spec = conflict_case("F", "L", "F", seed=2)
    assert spec.single(1).reference_speeds()[0] == spec.reference_speeds()[1]


def test_yaml_round_trip(tmp_path):
    spec = conflict_case("R", "L", "F", protocol="timeslot", seed=4, fidelity=4)
    spec.dump(tmp_path / "s.yaml")
    back = ScenarioSpec.load(tmp_path / "s.yaml")
    assert back.to_dict() == spec.to_dict()


def test_paths_end_where_expected():
    g = conflict_case("L", "L", "L").geometry
    for arm in "SWNE":
        for man in "LFR":
            path, finish = g.path(arm, man)
            assert finish < path.length
            # finish line sits finish_distance past the center; the sampled
            # arcs are a little shorter than the true ones
            p = path.point_at(finish)
            assert max(abs(p[0]), abs(p[1])) == pytest.approx(g.finish_distance, abs=1e-2)


# --------------------------------------------------------------------------
# closed loop


def test_free_driving_equals_no_conflict_time():
    spec = ScenarioSpec([VehicleSpec("S", "F")], protocol="none", seed=1)
    tr = run_scenario(spec)
    path, finish = spec.paths()[0]
    v = spec.reference_speeds()[0]
    assert tr.completion_times[0] == pytest.approx(finish / v, abs=0.02)
    both = run_scenario(conflict_case("F", "L", "F", protocol="none", seed=1))
    alone = run_scenario(conflict_case("F", "L", "F", protocol="none", seed=1).single(0))
    assert both.completion_times[0] == alone.completion_times[0]


@pytest.mark.slow
def test_single_vehicle_tracks_reference_speed():
    spec = ScenarioSpec([VehicleSpec("S", "F")], seed=1)
    tr = run_scenario(spec)
    v = np.array([s[0, 2] for s in tr.states if np.isfinite(s[0, 2])])
    ref = spec.reference_speeds()[0]
    assert np.all(np.abs(v[len(v) // 2:] - ref) <= 0.01 * ref)
    lateral = np.array([s[0, 0] for s in tr.states if np.isfinite(s[0, 0])])
    assert np.all(np.abs(lateral - 1.75) < 0.05)


@pytest.mark.slow
def test_physics_rate_barely_matters():
    spec = ScenarioSpec([VehicleSpec("S", "F")], seed=1)
    a = run_scenario(spec, ClockConfig(20, 160)).completion_times[0]
    b = run_scenario(spec, ClockConfig(20, 320)).completion_times[0]
    assert abs(a - b) / a < 0.005


@pytest.mark.slow
def test_out_of_range_vehicles_run_independently():
    st = OAADMMSettings(comm_range=5.0)
    spec = ScenarioSpec([VehicleSpec("S", "R"), VehicleSpec("N", "R")], seed=3)
    both = run_scenario(spec, settings=st)
    assert both.min_clearance > 5.0
    for i in range(2):
        alone = run_scenario(spec.single(i), settings=st)
        assert abs(both.completion_times[i] - alone.completion_times[0]) < 1e-6


@pytest.mark.slow
def test_determinism_bitwise():
    spec = conflict_case("L", "F", "F", seed=0)
    clock = ClockConfig(timeout_s=4.0)
    a = run_scenario(spec, clock)
    b = run_scenario(spec, clock)
    assert len(a.states) == len(b.states)
    assert all(np.array_equal(x, y, equal_nan=True) for x, y in zip(a.states, b.states))
    assert all(np.array_equal(x, y, equal_nan=True) for x, y in zip(a.clearances, b.clearances))


@pytest.mark.slow
def test_link_state_agrees_after_each_barrier():
    spec = conflict_case("L", "F", "F", seed=0)
    world = build_world(spec, ClockConfig())
    proto = OAADMMProtocol(OAADMMSettings())
    proto.setup(world)
    linked_ticks = 0
    while linked_ticks < 20:
        step_world(world, proto)
        linked_ticks += bool(proto.agents[0].links)
        for i, ai in proto.agents.items():
            for j, link in ai.links.items():
                other = proto.agents[j].links[i]
                assert np.array_equal(link.z_ji, other.z_ij)
                assert np.array_equal(link.lam_ji, other.lam_ij)
                assert np.array_equal(link.rho_ji, other.rho_ij)
                assert link.x_j is proto.agents[j].plan
    kinds = {m[3] for m in proto.messages}
    assert kinds == {"plan", "copy"}


def test_trace_exports(tmp_path):
    spec = ScenarioSpec([VehicleSpec("S", "F"), VehicleSpec("N", "F")], protocol="none", seed=0)
    tr = run_scenario(spec, ClockConfig(timeout_s=3.0))
    assert tr.classification == "timeout" and tr.timed_out
    tr.to_csv(tmp_path / "t.csv")
    tr.to_json(tmp_path / "s.json")
    head = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert head == "tick,vehicle,x,y,v,min_clearance"
    assert np.allclose(np.diff(tr.times), tr.dt)
    assert len(tr.states) == len(tr.clearances)


# --------------------------------------------------------------------------
# four robots


def test_robot_layout():
    lay = RobotCrossing()
    paths = lay.paths()
    assert len(paths) == 4
    assert lay.free_time == pytest.approx(12.0)


@pytest.mark.slow
def test_four_robot_run_classified():
    tr = four_robot_crossing(0.5, 2.0)
    assert tr.classification in ("resolved", "violation", "timeout")
    if tr.classification == "resolved":
        assert tr.min_clearance >= 0
    tr0 = four_robot_crossing(0.0, 1.0, clock=ClockConfig(10.0, 40.0, 6.0))
    assert math.isfinite(tr0.min_clearance)
