import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oaadmm.geometry import (
    Capsule, CapsuleShape, Halfspace, capsule_clearance, clearance_along_plans, pose_segments, segment_distance,
    separating_halfspace, separating_halfspaces,
)
from oaadmm.mpc import TrajectoryPlan

from .oracles import dense_segment_distance

coord = st.floats(-20, 20, allow_nan=False)
point = st.tuples(coord, coord)
radius = st.floats(0.05, 3.0)


def capsules():
    return st.builds(Capsule, point, point, radius)


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def plan(xy, heading):
    xy = np.asarray(xy, float)
    states = np.column_stack([xy, np.zeros((len(xy), 3))])
    return TrajectoryPlan(states, 0.05, np.broadcast_to(heading, (len(xy),)).astype(float))


def test_capsule_validation():
    with pytest.raises(ValueError):
        Capsule([0, 0], [1, 0], 0.0)
    with pytest.raises(ValueError):
        CapsuleShape(-1.0, 1.0)
    with pytest.raises(ValueError):
        Halfspace([1.0, 1.0], 0.0)
    assert Capsule([0, 0], [3, 4], 1.0).length == 5.0


def test_point_capsules_three_apart():
    assert capsule_clearance(Capsule([0, 0], [0, 0], 1.0), Capsule([3, 0], [3, 0], 1.0)) == pytest.approx(1.0)


def test_identical_capsules_penetrate_by_both_radii():
    a = Capsule([0, 0], [4, 1], 0.7)
    assert capsule_clearance(a, a) == pytest.approx(-1.4)


def test_crossing_segments_have_zero_distance():
    d, wa, wb = segment_distance([-1, 0], [1, 0], [0, -1], [0, 1])
    assert d == 0.0
    assert np.allclose(wa, 0.0) and np.allclose(wb, 0.0)


def test_parallel_offset_segments():
    assert capsule_clearance(Capsule([0, 0], [4, 0], 0.5), Capsule([1, 3], [6, 3], 0.5)) == pytest.approx(2.0)


def test_matches_sampling_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a0, a1, b0, b1 = rng.uniform(-5, 5, (4, 2))
        ra, rb = rng.uniform(0.1, 2.0, 2)
        ours = capsule_clearance(Capsule(a0, a1, ra), Capsule(b0, b1, rb))
        assert ours == pytest.approx(dense_segment_distance(a0, a1, b0, b1) - ra - rb, abs=1e-3)


@settings(max_examples=300, deadline=None)
@given(capsules(), capsules())
def test_symmetry_is_exact(a, b):
    assert capsule_clearance(a, b) == capsule_clearance(b, a)


@settings(max_examples=300, deadline=None)
@given(capsules(), capsules(), st.floats(-math.pi, math.pi), point)
def test_rigid_motion_invariance(a, b, theta, shift):
    R = rotation(theta)
    before = capsule_clearance(a, b)
    after = capsule_clearance(a.transformed(R, shift), b.transformed(R, shift))
    assert after == pytest.approx(before, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(capsules(), capsules())
def test_clearance_lower_bounds_every_point_pair(a, b):
    # no pair of sampled segment points is closer than the reported distance
    c = capsule_clearance(a, b)
    s = np.linspace(0, 1, 7)
    pa = a.p0 + s[:, None] * (a.p1 - a.p0)
    pb = b.p0 + s[:, None] * (b.p1 - b.p0)
    dmin = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1)).min()
    assert c <= dmin - a.radius - b.radius + 1e-9


# --------------------------------------------------------------------------
# plans


def test_plans_at_lateral_offset_match_single_step():
    shape = CapsuleShape(4.0, 1.0)
    xs = np.linspace(0, 10, 6)
    pi = plan(np.column_stack([xs, np.zeros(6)]), 0.0)
    pj = plan(np.column_stack([xs, np.full(6, 10.0)]), 0.3)
    got = clearance_along_plans(pi, pj, shape, shape)
    for k in range(6):
        ref = capsule_clearance(shape.at(pi.positions[k], 0.0), shape.at(pj.positions[k], 0.3))
        assert got[k] == pytest.approx(ref, abs=1e-12)


def test_identical_plans_penetrate():
    shape = CapsuleShape(4.0, 1.0)
    p = plan(np.column_stack([np.arange(5.0), np.zeros(5)]), 0.0)
    assert np.all(clearance_along_plans(p, p, shape, shape) == pytest.approx(-2.0))


def test_diverging_plans_have_non_decreasing_clearance():
    shape = CapsuleShape(4.0, 1.0)
    t = np.arange(8.0)
    pi = plan(np.column_stack([t, -t]), 0.0)
    pj = plan(np.column_stack([t, t]), 0.0)
    assert np.all(np.diff(clearance_along_plans(pi, pj, shape, shape)) >= 0)


def test_horizon_mismatch_rejected():
    shape = CapsuleShape(0.0, 0.5)
    with pytest.raises(ValueError):
        clearance_along_plans(plan(np.zeros((3, 2)), 0.0), plan(np.zeros((4, 2)), 0.0), shape, shape)


def test_pose_segments_centered():
    p0, p1 = pose_segments(np.array([1.0, 2.0]), np.array(math.pi / 2), np.array(4.0))
    assert np.allclose(p0, [1, 0]) and np.allclose(p1, [1, 4])


# --------------------------------------------------------------------------
# separating halfspaces


def test_discs_on_axis():
    h = separating_halfspace(Capsule([0, 0], [0, 0], 1.0), Capsule([4, 0], [4, 0], 1.0))
    # normal points from b toward a, line at x = 2
    assert np.allclose(h.normal, [-1, 0])
    assert h.offset == pytest.approx(-2.0)


def test_overlapping_discs_use_center_difference():
    h = separating_halfspace(Capsule([0, 0], [0, 0], 1.0), Capsule([0.5, 0.5], [0.5, 0.5], 1.0))
    assert np.allclose(h.normal, -np.array([1, 1]) / math.sqrt(2))


def test_coincident_capsules_fall_back_to_x_axis():
    a = Capsule([1, 1], [1, 1], 1.0)
    h = separating_halfspace(a, a)
    assert np.allclose(h.normal, [1, 0])


def _satisfy(h: Halfspace, a: Capsule, b: Capsule):
    """Shift both capsules along the normal until each sits on its side."""
    n = h.normal
    lo = min(n @ a.p0, n @ a.p1)
    hi = max(n @ b.p0, n @ b.p1)
    da = max(0.0, h.offset + a.radius - lo)
    db = max(0.0, hi - (h.offset - b.radius))
    return Capsule(a.p0 + da * n, a.p1 + da * n, a.radius), Capsule(b.p0 - db * n, b.p1 - db * n, b.radius)


@settings(max_examples=500, deadline=None)
@given(capsules(), capsules())
def test_halfspace_constraint_implies_clearance(a, b):
    h = separating_halfspace(a, b)
    a2, b2 = _satisfy(h, a, b)
    assert h.a_satisfied(a2, 1e-9) and h.b_satisfied(b2, 1e-9)
    assert capsule_clearance(a2, b2) >= -1e-9


def test_halfspace_conservativeness_monte_carlo():
    rng = np.random.default_rng(1)
    n = 10_000
    a0, a1, b0, b1 = rng.uniform(-5, 5, (4, n, 2))
    ra, rb = rng.uniform(0.1, 2.0, (2, n))
    normals, offsets = separating_halfspaces(a0, a1, ra, b0, b1, rb)
    # keep only pairs already on their side, then check they are apart
    dot = lambda p: (p * normals).sum(-1)
    ok_a = np.minimum(dot(a0), dot(a1)) >= offsets + ra
    ok_b = np.maximum(dot(b0), dot(b1)) <= offsets - rb
    sat = ok_a & ok_b
    assert sat.sum() > 100
    d, _, _ = segment_distance(a0[sat], a1[sat], b0[sat], b1[sat])
    assert np.all(d - ra[sat] - rb[sat] >= -1e-9)
    assert np.allclose(np.hypot(normals[..., 0], normals[..., 1]), 1.0)
