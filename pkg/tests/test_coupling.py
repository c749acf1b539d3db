from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adjointlab.coupling import (
    CoupledObjective,
    MultiScaleSchedule,
    RockPhysicsMap,
    interpolation_matrix,
    upscale_bilinear,
    upscale_bilinear_adjoint,
    velocity_to_bulk,
)
from adjointlab.dynamics import GridSpec2D, interior_to_field, simulate_hidden, make_params
from adjointlab.inverse import generate_synthetic
from adjointlab.verify import fd_directional, taylor_remainder_test
from adjointlab.wave import wave_misfit

from conftest import mini_problem


def test_schedule():
    s = MultiScaleSchedule(3, 5, 0.01)
    np.testing.assert_allclose(s.obs_times, [0.0, 0.05, 0.1])
    assert s.n_steps == 10
    with pytest.raises(ValueError):
        MultiScaleSchedule(0, 5, 0.01)


def test_upscale_preserves_constants_and_corners(rng):
    c = np.full((5, 7), 3.25)
    np.testing.assert_allclose(upscale_bilinear(c, (13, 20)), 3.25, rtol=1e-15)
    x = rng.standard_normal((5, 7))
    y = upscale_bilinear(x, (13, 20))
    for (i, j), (k, l) in (((0, 0), (0, 0)), ((-1, -1), (-1, -1)), ((0, -1), (0, -1))):
        assert y[k, l] == pytest.approx(x[i, j], abs=1e-15)
    np.testing.assert_array_equal(upscale_bilinear(x, x.shape), x)
    with pytest.raises(ValueError):
        upscale_bilinear(x, (4, 7))
    W = interpolation_matrix(4, 10)
    np.testing.assert_allclose(W.sum(axis=1), 1.0)


@settings(max_examples=30, deadline=None)
@given(nz=st.integers(2, 9), nx=st.integers(2, 9), fz=st.integers(0, 20), fx=st.integers(0, 20),
       seed=st.integers(0, 2**31 - 1))
def test_upscale_adjoint_dot_product(nz, nx, fz, fx, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((nz, nx))
    y = r.standard_normal((nz + fz, nx + fx))
    lhs = np.sum(upscale_bilinear(x, y.shape) * y)
    rhs = np.sum(x * upscale_bilinear_adjoint(y, x.shape))
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_velocity_to_bulk():
    rock = RockPhysicsMap()
    np.testing.assert_array_equal(velocity_to_bulk(np.zeros((3, 3)), rock), 1.225e7)
    m = np.array([[100.0, -50.0]])
    np.testing.assert_allclose(velocity_to_bulk(m, RockPhysicsMap(3500.0, 2.0)),
                               2.0 * (m + 3500.0) ** 2)
    with pytest.raises(ValueError):
        velocity_to_bulk(np.array([-3600.0]), rock)
    with pytest.raises(ValueError):
        RockPhysicsMap(0.0)


def test_true_parameters_give_zero_loss_and_gradient():
    prob = mini_problem()
    obs = generate_synthetic(prob)
    obj = prob.objective(obs)
    f, g = obj.value_and_grad(prob.true_params)
    assert f <= 1e-18
    assert np.linalg.norm(g) <= 1e-9


def test_loss_is_sum_of_phase_misfits_and_counts_solves():
    prob = mini_problem(n_obs=3)
    obs = generate_synthetic(prob)
    obj = prob.objective(obs)
    theta = np.array([7.0, 0.3, 0.1])
    prob.setup.solves = 0
    f = obj.value(theta)
    n_src = len(prob.setup.geometry.sources)
    assert prob.setup.solves == prob.schedule.n_obs * n_src
    snaps, recs = obj.simulate(theta)
    total = sum(wave_misfit(recs[i], obs[i]) for i in range(prob.schedule.n_obs))
    assert f == pytest.approx(total, rel=1e-12)
    prob.setup.solves = 0
    obj.value_and_grad(theta)
    assert prob.setup.solves == prob.schedule.n_obs * n_src


def test_snapshots_follow_the_hidden_dynamics():
    prob = mini_problem(n_obs=3, substeps=2)
    obj = prob.objective()
    snaps, recs = obj.simulate(prob.true_params)
    np.testing.assert_array_equal(snaps[0], prob.m0)
    params = make_params(prob.family, prob.true_params)
    ref = simulate_hidden(prob.m0, prob.family, params, prob.hidden_grid, 4, 2)
    for i in (1, 2):
        np.testing.assert_allclose(snaps[i], ref[i - 1].values, rtol=1e-14, atol=1e-12)
    assert recs.shape == (3, *obj.record_shape)


def test_two_phase_fd_on_mini_problem():
    # 20x20 hidden grid embedded in a 60x60 wave grid
    from adjointlab.coupling import CoupledObjective
    from adjointlab.inverse import InverseProblem, block_field
    from adjointlab.wave import SurveyGeometry, WaveGridSpec, WaveSetup

    hg = GridSpec2D(20, 3.0, 0.01)
    grid = WaveGridSpec(60, 60, 24.0, 0.002, 300, 10)
    geom = SurveyGeometry(((13, 22), (13, 38)), tuple((13, x) for x in range(14, 47, 4)))
    setup = WaveSetup.build(grid, geom, f0=10.0)
    prob = InverseProblem("advection_diffusion", np.array([10.0, 0.1, -0.2]), hg,
                          MultiScaleSchedule(2, 5, 0.01), setup, block_field(hg))
    obj = prob.objective(generate_synthetic(prob))
    theta = np.array([6.0, 0.3, 0.2])
    _, g = obj.value_and_grad(theta)
    d = np.array([1.0, 0.05, -0.04])
    fd = fd_directional(obj.value, theta, d, step=1e-3)
    assert abs(g @ d - fd) <= 1e-4 * abs(fd)


@pytest.mark.parametrize("family,truth,theta", [
    ("advection_diffusion", (10.0, 0.1, -0.2), (6.0, 0.3, 0.1)),
    ("time_fractional", (0.6, 10.0), (0.5, 6.0)),
    ("space_fractional", (0.5, 10.0), (0.4, 6.0)),
])
def test_end_to_end_taylor_slopes(family, truth, theta):
    prob = mini_problem(family, truth)
    obj = prob.objective(generate_synthetic(prob))
    c = np.array(theta)
    _, g = obj.value_and_grad(c)
    d = 0.1 * np.abs(c) * np.array([1.0, -1.0, 1.0][: c.size])
    rep = taylor_remainder_test(obj.value, g, c, d)
    assert abs(rep.first_order_slope - 1.0) <= 0.15
    assert rep.second_order_slope >= 1.9


def test_initial_field_gradient_when_unknown(rng):
    prob = mini_problem(n_obs=2)
    obs = generate_synthetic(prob)
    obj = CoupledObjective(prob.family, prob.hidden_grid, prob.schedule, prob.setup, prob.rock,
                           prob.m0, obs, m0_unknown=True)
    theta = np.array([8.0, 0.2, -0.1])
    m0 = prob.m0 + 5.0 * rng.standard_normal(prob.m0.size)
    f, g_theta, g_m0 = obj.value_and_grad(theta, m0)
    assert g_m0.shape == prob.m0.shape and g_theta.shape == (3,)
    d = rng.standard_normal(prob.m0.size)
    fd = fd_directional(lambda z: obj.value(theta, z), m0, d, step=1e-2)
    assert abs(g_m0 @ d - fd) <= 1e-4 * abs(fd)


def test_objective_input_validation():
    prob = mini_problem()
    with pytest.raises(ValueError):
        CoupledObjective(prob.family, prob.hidden_grid, prob.schedule, prob.setup, prob.rock,
                         prob.m0[:-1])
    with pytest.raises(ValueError):
        CoupledObjective(prob.family, prob.hidden_grid, prob.schedule, prob.setup, prob.rock,
                         prob.m0, observed=np.zeros((1, 2, 3)))
    with pytest.raises(ValueError, match="dtau"):
        CoupledObjective(prob.family, prob.hidden_grid, MultiScaleSchedule(2, 3, 0.02),
                         prob.setup, prob.rock, prob.m0)


def test_embedded_field_has_zero_boundary():
    g = GridSpec2D(8, 3.0, 0.01)
    full = interior_to_field(np.ones(g.size), g)
    up = upscale_bilinear(full, (24, 24))
    assert np.all(up[0] == 0) and np.all(up[:, -1] == 0)
