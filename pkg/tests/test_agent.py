import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oaadmm.agent import (
    MuConfig, NeighborLink, PhiConfig, SelfLink, lambda_update_agent, mu_filtered, mu_similarity_estimate,
    phi_from_clearance, phi_ii, phi_ij, reduced_lagrangian_x, reduced_lagrangian_z, x_update, z_update,
)
from oaadmm.geometry import CapsuleShape, clearance_along_plans
from oaadmm.mpc import BicycleModel, HolonomicModel, LocalProblem, ReferencePath, TrackingWeights, TrajectoryPlan

from .oracles import central_difference, relative_error

DISC = CapsuleShape(0.0, 0.5)
CAR = CapsuleShape(4.0, 1.0)


def straight_path(start=(-50.0, 0.0), heading=0.0, length=200.0):
    return ReferencePath.from_pieces(start, heading, [("straight", length)])


def holonomic_local(N=6, state=(0.0, 0.0, 1.0, 0.0), v_ref=1.0, weights=None):
    return LocalProblem(HolonomicModel(), straight_path(), v_ref, N, 0.1, weights or TrackingWeights(),
                        state=np.array(state, float), s_hint=50.0 + state[0])


def bicycle_local(N=8, state=(0.0, 0.3, 0.05, 4.0)):
    return LocalProblem(BicycleModel(), straight_path(), 4.0, N, 0.05, TrackingWeights(),
                        state=np.array(state, float), s_hint=50.0 + state[0])


def rows_plan(rows, headings=None, model="holonomic"):
    rows = np.asarray(rows, float)
    h = np.zeros(len(rows)) if headings is None else headings
    return TrajectoryPlan(rows, 0.1, h, model)


def self_link(z, lam=None, rho=None):
    N, d = z.shape
    return SelfLink(z.copy(), np.zeros((N, d)) if lam is None else lam, np.ones(N) if rho is None else rho, np.ones(N))


def neighbor_link(j, z_ij, z_ji, rng=None, rho=1.0):
    N, d = z_ij.shape
    lam = (lambda: rng.normal(size=(N, d))) if rng is not None else (lambda: np.zeros((N, d)))
    rr = (lambda: rng.uniform(0.1, 5.0, N)) if rng is not None else (lambda: np.full(N, rho))
    return NeighborLink(j, z_ij.copy(), lam(), rr(), np.ones(N), z_ji.copy(), lam(), rr())


# --------------------------------------------------------------------------
# adaptation function


def test_phi_examples():
    assert phi_from_clearance(4.0, PhiConfig(D=2, a=2, w=1, phi_min=0.1, phi_max=10)) == pytest.approx(0.25)
    assert phi_from_clearance(100.0, PhiConfig(D=1, a=1, w=2, phi_min=0.1, phi_max=10)) == pytest.approx(0.2)
    assert phi_from_clearance(1e-9, PhiConfig(D=1, a=1, w=1, phi_min=0.1, phi_max=10)) == 10.0


def test_phi_non_positive_gap_saturates():
    cfg = PhiConfig(D=1, a=1, w=3, phi_min=0.1, phi_max=10)
    assert np.all(phi_from_clearance([0.0, -2.0], cfg) == 30.0)


def test_phi_zero_scale_sits_at_lower_clamp():
    cfg = PhiConfig(D=0, a=1, w=1, phi_min=0.1, phi_max=10)
    assert np.all(phi_from_clearance([0.5, 3.0, 100.0], cfg) == 0.1)


def test_phi_config_validates():
    for bad in (dict(phi_min=0.0), dict(phi_min=2.0, phi_max=1.0), dict(w=0.0), dict(a=0.0), dict(D=-1.0)):
        with pytest.raises(ValueError):
            PhiConfig(**bad)


def test_phi_ij_from_plans():
    cfg = PhiConfig(D=2, a=1, w=1, phi_min=0.1, phi_max=10)
    pi = rows_plan(np.column_stack([np.zeros(3), np.zeros(3), np.zeros((3, 2))]))
    pj = rows_plan(np.column_stack([[5.0, 3.0, 1.5], np.zeros(3), np.zeros((3, 2))]))
    d = clearance_along_plans(pi, pj, DISC, DISC)
    assert np.allclose(d, [4.0, 2.0, 0.5])
    assert np.allclose(phi_ij(pi, pj, cfg, DISC, DISC), [0.5, 1.0, 4.0])


@pytest.mark.parametrize("links, cfg, expected", [
    ([[0.5], [2.0]], PhiConfig(a=1, w=1), 1.25),
    ([[10.0]], PhiConfig(a=1, w=1), 10.0),
    ([[1.0], [3.0]], PhiConfig(a=2, w=1, phi_max=100), 5.0),
])
def test_phi_ii_examples(links, cfg, expected):
    assert phi_ii([np.array(l) for l in links], cfg) == pytest.approx([expected])


def test_phi_ii_without_neighbors_and_switch():
    cfg = PhiConfig(w=2, phi_min=0.1)
    assert np.all(phi_ii([], cfg, 4) == pytest.approx(0.2))
    flat = PhiConfig(a=2, w=1, phi_max=100, second_exponent=False)
    assert phi_ii([np.array([1.0]), np.array([3.0])], flat) == pytest.approx([2.0])


phi_cfgs = st.builds(
    lambda D, w, a, lo, span: PhiConfig(D=D, w=w, a=a, phi_min=lo, phi_max=lo * span),
    st.floats(0, 5), st.floats(0.01, 10), st.floats(0.1, 4), st.floats(1e-3, 1), st.floats(1.01, 1e3))


@settings(max_examples=500, deadline=None)
@given(phi_cfgs, st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_phi_bounded(cfg, d):
    out = phi_from_clearance(np.array(d), cfg)
    assert np.all(out >= cfg.w * cfg.phi_min * (1 - 1e-12))
    assert np.all(out <= cfg.w * cfg.phi_max * (1 + 1e-12))
    agg = phi_ii([out, out[::-1]], cfg)
    assert np.all((agg >= cfg.w * cfg.phi_min * (1 - 1e-12)) & (agg <= cfg.w * cfg.phi_max * (1 + 1e-12)))


@settings(max_examples=500, deadline=None)
@given(phi_cfgs, st.floats(1e-6, 100), st.floats(0, 100))
def test_phi_monotone_pressure(cfg, d, extra):
    assert phi_from_clearance(d, cfg) >= phi_from_clearance(d + extra, cfg)


# --------------------------------------------------------------------------
# similarity factor


def test_mu_filtered_examples():
    assert np.allclose(mu_filtered(np.ones(2), [0.4, 2.0], MuConfig(eta=0.5)), [0.7, 1.0])
    assert np.allclose(mu_filtered([0.3, 0.9], [5.0, 0.0], MuConfig(eta=1.0)), [0.3, 0.9])
    assert np.allclose(mu_filtered([1.0], [0.3], MuConfig(eta=0.0)), [0.3])
    assert np.allclose(mu_filtered([1.0], [0.6], MuConfig(eta=0.0), w_i=2.0), [0.3])


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 1), st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1e4)), min_size=1, max_size=8),
       st.floats(0.01, 10))
def test_mu_stays_in_unit_interval(eta, pairs, w):
    prev, rho = np.array(pairs).T
    out = mu_filtered(prev, rho, MuConfig(eta=eta), w)
    assert np.all((out >= 0) & (out <= 1))


def test_mu_config_validates():
    with pytest.raises(ValueError):
        MuConfig(eta=1.5)
    with pytest.raises(ValueError):
        MuConfig(weights=(0.5, 0.5, 0.5, 0.0))


def test_similarity_examples():
    base = dict(x=np.array([1.0, 2.0]), z=np.array([1.0]), lam=np.array([3.0]), rho=np.array([2.0]))
    assert mu_similarity_estimate(base, base, MuConfig(weights=(0.25,) * 4)).value == 1.0
    doubled = dict(base, x=2 * base["x"])
    assert mu_similarity_estimate(base, doubled, MuConfig(weights=(1, 0, 0, 0))).value == 0.0
    tenth = dict(base, x=1.1 * base["x"])
    assert mu_similarity_estimate(base, tenth, MuConfig(weights=(0.25,) * 4)).value == pytest.approx(0.975)
    zero = dict(base, x=np.zeros(2))
    sim = mu_similarity_estimate(zero, base, MuConfig())
    assert sim.value == 0.0 and sim.degenerate


# --------------------------------------------------------------------------
# multiplier update


def test_lambda_update_examples():
    N, d = 3, 4
    x = np.arange(N * d, dtype=float).reshape(N, d)
    sl = self_link(x, lam=np.ones((N, d)), rho=np.full(N, 2.0))
    nl = neighbor_link(1, x, x)
    nl.lam_ij = np.full((N, d), -1.0)
    lam_ii, lam_ij = lambda_update_agent(sl, {1: nl}, np.ones(N), {1: np.ones(N)}, x, {1: x}, x, {1: x})
    assert np.array_equal(lam_ii, sl.lam) and np.array_equal(lam_ij[1], nl.lam_ij)

    z = x - 0.5
    lam_ii, _ = lambda_update_agent(sl, {}, np.zeros(N), {}, x, {}, z, {})
    assert np.allclose(lam_ii, 2.0 * 0.5)


def test_lambda_update_forces_unit_mu_after_first_iteration():
    N, d = 2, 4
    x = np.zeros((N, d))
    sl = self_link(x, lam=np.full((N, d), 3.0))
    lam_ii, _ = lambda_update_agent(sl, {}, np.zeros(N), {}, x, {}, x, {}, first_iteration=False)
    assert np.allclose(lam_ii, 3.0)
    lam_ii, _ = lambda_update_agent(sl, {}, np.zeros(N), {}, x, {}, x, {}, first_iteration=True)
    assert np.allclose(lam_ii, 0.0)
    with pytest.raises(ValueError):
        lambda_update_agent(sl, {}, np.full(N, 2.0), {}, x, {}, x, {})


# --------------------------------------------------------------------------
# copy update


def test_z_update_far_apart_returns_plans():
    N = 5
    xi = np.column_stack([np.linspace(0, 1, N), np.zeros(N), np.ones(N), np.zeros(N)])
    xj = np.column_stack([np.linspace(0, 1, N), np.full(N, 20.0), np.ones(N), np.zeros(N)])
    pi, pj = rows_plan(xi), rows_plan(xj)
    res = z_update(pi, {1: pj}, self_link(xi), {1: neighbor_link(1, xj, xi)}, DISC, {1: DISC})
    assert np.array_equal(res.z_ii, xi) and np.array_equal(res.z_ij[1], xj)
    assert not res.constrained


def test_z_update_single_agent_closed_form():
    rng = np.random.default_rng(0)
    N, d = 4, 5
    x = rng.normal(size=(N, d))
    lam = rng.normal(size=(N, d))
    rho = rng.uniform(0.5, 3.0, N)
    res = z_update(rows_plan(x), {}, self_link(x, lam, rho), {}, CAR, {})
    assert np.allclose(res.z_ii, x + lam / (2 * rho[:, None]))


def test_z_update_head_on_discs_separate():
    N = 6
    t = np.linspace(0, 1, N)
    xi = np.column_stack([-0.3 + t * 0.6, np.zeros(N), np.ones(N), np.zeros(N)])
    xj = np.column_stack([0.3 - t * 0.6, np.full(N, 0.05), -np.ones(N), np.zeros(N)])
    pi, pj = rows_plan(xi), rows_plan(xj, np.full(N, np.pi))
    res = z_update(pi, {1: pj}, self_link(xi), {1: neighbor_link(1, xj, xi)}, DISC, {1: DISC})
    assert res.constrained and not res.violated
    d = clearance_along_plans(rows_plan(res.z_ii), rows_plan(res.z_ij[1]), DISC, DISC)
    assert np.all(d >= -1e-6)
    # only positions move
    assert np.array_equal(res.z_ii[:, 2:], xi[:, 2:])


def test_z_update_respects_margin():
    N = 3
    xi = np.column_stack([np.zeros(N), np.zeros(N), np.zeros((N, 2))])
    xj = np.column_stack([np.full(N, 0.8), np.zeros(N), np.zeros((N, 2))])
    res = z_update(rows_plan(xi), {1: rows_plan(xj)}, self_link(xi), {1: neighbor_link(1, xj, xi)},
                   DISC, {1: DISC}, margin=0.2)
    gap = np.linalg.norm(res.z_ii[:, :2] - res.z_ij[1][:, :2], axis=1)
    assert np.all(gap >= 1.2 - 1e-9)
    # equal weights split the push evenly
    assert np.allclose(res.z_ii[:, 0], -0.2) and np.allclose(res.z_ij[1][:, 0], 1.0)


# --------------------------------------------------------------------------
# trajectory update


def test_x_update_with_dominant_penalty_reproduces_copy():
    local = holonomic_local()
    U = np.tile([0.3, -0.2], (local.horizon, 1))
    z = local.plan_from_inputs(U).states
    res = x_update(local, self_link(z, rho=np.full(local.horizon, 1e6)), [], max_iter=50, tol=1e-10)
    assert np.allclose(res.plan.states, z, atol=1e-4)


def test_x_update_with_weak_penalty_tracks_reference():
    local = holonomic_local(state=(0.0, 0.6, 0.5, 0.0))
    z = np.zeros((local.horizon, 4))
    weak = x_update(local, self_link(z, rho=np.full(local.horizon, 1e-9)), [], max_iter=100, tol=1e-10)
    free = x_update(local, self_link(z, rho=np.full(local.horizon, 1e-12)), [], max_iter=100, tol=1e-10)
    assert np.allclose(weak.inputs, free.inputs, atol=1e-5)
    assert local.tracking_cost(free.inputs) <= local.tracking_cost(np.zeros_like(free.inputs))


def _holonomic_objective_grid(local, U, z_self, rho_self, z_ji, lam_ji, rho_ji):
    """Independent evaluation of the trajectory-update objective for a batch of inputs."""
    w, dt = local.weights, local.dt
    s0 = local.state
    vel = s0[2:] + dt * np.cumsum(U, axis=1)
    prev = np.concatenate([np.broadcast_to(s0[2:], (U.shape[0], 1, 2)), vel[:, :-1]], axis=1)
    pos = s0[:2] + dt * np.cumsum(prev, axis=1)
    rows = np.concatenate([pos, vel], axis=2)
    cost = (w.q_v * ((vel[..., 0] - local.v_ref) ** 2 + vel[..., 1] ** 2).sum(1)
            + w.q_lat * (pos[..., 1] ** 2).sum(1) + w.r_a * (U ** 2).sum((1, 2)))
    cost += (rho_self[None, :, None] * (rows - z_self) ** 2).sum((1, 2))
    diff = rows - z_ji
    cost += (lam_ji * diff).sum((1, 2)) + (rho_ji[None, :, None] * diff ** 2).sum((1, 2))
    return cost


def test_x_update_matches_input_grid_search():
    local = holonomic_local(N=2, state=(0.0, 0.2, 0.8, 0.0))
    N = 2
    z_self = np.array([[0.08, 0.2, 0.9, 0.0], [0.17, 0.2, 1.0, 0.0]])
    z_ji = np.array([[0.05, 0.1, 0.4, -0.3], [0.09, 0.05, 0.3, -0.4]])
    lam_ji = np.array([[0.2, -0.1, 0.0, 0.1], [0.1, 0.0, -0.2, 0.0]])
    rho_self, rho_ji = np.array([1.0, 1.0]), np.array([2.0, 3.0])
    sl = self_link(z_self, rho=rho_self)
    nl = NeighborLink(1, z_ji.copy(), np.zeros_like(z_ji), rho_ji, np.ones(N), z_ji, lam_ji, rho_ji)
    res = x_update(local, sl, [nl], max_iter=100, tol=1e-12)

    h = 0.1
    axis = np.arange(-1.5, 1.5 + h / 2, h)
    grid = np.array(list(itertools.product(axis, repeat=4))).reshape(-1, 2, 2)
    cost = _holonomic_objective_grid(local, grid, z_self, rho_self, z_ji, lam_ji, rho_ji)
    best = grid[np.argmin(cost)]
    assert np.max(np.abs(res.inputs - best)) <= h
    # the continuous minimizer is at least as good as every grid point
    ours = _holonomic_objective_grid(local, res.inputs[None], z_self, rho_self, z_ji, lam_ji, rho_ji)[0]
    assert ours <= cost.min() + 1e-9
    value, _ = reduced_lagrangian_x(local, res.inputs, sl, [nl])
    # reduced Lagrangian drops only the constant lam_ii'(x - z) term, which is zero here
    assert value == pytest.approx(ours, rel=1e-9)


def test_x_update_projected_gradient_small():
    rng = np.random.default_rng(3)
    local = bicycle_local()
    N = local.horizon
    z = local.plan_from_inputs(np.zeros((N, 2))).states + rng.normal(scale=0.1, size=(N, 5))
    sl = self_link(z, rho=np.full(N, 2.0))
    res = x_update(local, sl, [], max_iter=200, tol=1e-8)
    _, g = reduced_lagrangian_x(local, res.inputs, sl, [])
    U = res.inputs.ravel()
    pg = U - np.clip(U - g, local.lower, local.upper)
    assert np.max(np.abs(pg)) < 1e-5


@pytest.mark.parametrize("make, coupled", [(holonomic_local, None), (bicycle_local, None), (bicycle_local, 2)])
def test_reduced_lagrangian_x_gradient(make, coupled):
    rng = np.random.default_rng(7)
    for _ in range(5):
        local = make()
        N, m, d = local.horizon, local.model.input_dim, local.model.row_dim
        U = rng.uniform(0.3, 0.8, (N, m)) * local.model.input_upper
        base = local.plan_from_inputs(U).states
        sl = SelfLink(base + rng.normal(scale=0.2, size=(N, d)), rng.normal(size=(N, d)),
                      rng.uniform(0.1, 5, N), np.ones(N))
        nl = neighbor_link(1, base, base + rng.normal(scale=0.2, size=(N, d)), rng)
        _, g = reduced_lagrangian_x(local, U, sl, [nl], coupled)
        fd = central_difference(lambda u: reduced_lagrangian_x(local, u, sl, [nl], coupled)[0], U.ravel())
        assert relative_error(g, fd) < 1e-5


def test_reduced_lagrangian_z_gradient():
    rng = np.random.default_rng(9)
    N, d = 5, 5
    x_i, z_ii = rng.normal(size=(2, N, d))
    x_js = {1: rng.normal(size=(N, d)), 4: rng.normal(size=(N, d))}
    z_ijs = {j: rng.normal(size=(N, d)) for j in x_js}
    sl = SelfLink(z_ii, rng.normal(size=(N, d)), rng.uniform(0.1, 5, N), np.ones(N))
    links = {j: neighbor_link(j, z_ijs[j], z_ii, rng) for j in x_js}
    _, g_ii, g_ij = reduced_lagrangian_z(x_i, x_js, z_ii, z_ijs, sl, links)
    fd = central_difference(lambda z: reduced_lagrangian_z(x_i, x_js, z, z_ijs, sl, links)[0], z_ii)
    assert relative_error(g_ii, fd) < 1e-5
    for j in x_js:
        def f(z, j=j):
            return reduced_lagrangian_z(x_i, x_js, z_ii, {**z_ijs, j: z}, sl, links)[0]
        assert relative_error(g_ij[j], central_difference(f, z_ijs[j])) < 1e-5
