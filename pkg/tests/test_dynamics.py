from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma

from adjointlab.dynamics import (
    AdvectionDiffusionParams,
    GridSpec2D,
    SpaceFractionalParams,
    TimeFractionalParams,
    ad_step_backward,
    ad_step_forward,
    assemble_operator,
    caputo_row_sums,
    caputo_weights,
    field_to_interior,
    interior_to_field,
    l1_history_weights,
    lowest_eigenvalue,
    make_params,
    operator_parts,
    sfrac_step_backward,
    sfrac_step_forward,
    simulate_hidden,
    spectral_multiplier,
    tfrac_step_backward,
    tfrac_step_forward,
)
from adjointlab.verify import fd_gradient


def _rand(rng, grid):
    return rng.standard_normal(grid.size)


# ---------------------------------------------------------------------------
# grid / params

def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec2D(2, 1.0, 0.1)
    with pytest.raises(ValueError):
        GridSpec2D(8, 0.0, 0.1)
    with pytest.raises(ValueError):
        GridSpec2D(8, 1.0, -0.1)
    g = GridSpec2D(8, 0.5, 0.1)
    assert (g.m, g.size, g.length) == (7, 49, 4.0)


def test_params_validation():
    with pytest.raises(ValueError):
        AdvectionDiffusionParams(-1.0)
    for alpha in (0.0, 1.0, 1.3):
        with pytest.raises(ValueError):
            TimeFractionalParams(alpha, 1.0)
    with pytest.raises(ValueError):
        SpaceFractionalParams(0.0, 1.0)
    SpaceFractionalParams(1.0, 1.0)
    with pytest.raises(ValueError):
        make_params("heat", [1.0])


def test_interior_embedding_round_trip(rng):
    g = GridSpec2D(6, 1.0, 0.1)
    u = _rand(rng, g)
    full = interior_to_field(u, g)
    assert full.shape == (7, 7)
    assert np.all(full[0] == 0) and np.all(full[:, -1] == 0)
    np.testing.assert_array_equal(field_to_interior(full, g), u)


# ---------------------------------------------------------------------------
# advection-diffusion

def test_operator_structure():
    g = GridSpec2D(6, 0.5, 0.3)
    A = assemble_operator(g, AdvectionDiffusionParams(2.0))
    assert abs(A - A.T).max() == 0
    np.testing.assert_allclose(A.diagonal(), 4 * 2.0 / g.h**2)
    A2 = assemble_operator(g.with_dtau(1e-4), AdvectionDiffusionParams(2.0))
    assert abs(A - A2).max() == 0
    Ab = assemble_operator(g, AdvectionDiffusionParams(2.0, 0.5, -0.3))
    assert abs(Ab - Ab.T).max() > 0


def test_ad_step_trivial_cases(rng):
    g = GridSpec2D(6, 1.0, 0.1)
    p = AdvectionDiffusionParams(1.0, 0.3, 0.2)
    np.testing.assert_array_equal(ad_step_forward(np.zeros(g.size), p, g), 0.0)
    u = _rand(rng, g)
    np.testing.assert_allclose(ad_step_forward(u, AdvectionDiffusionParams(0.0), g), u,
                               rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        ad_step_forward(np.zeros(g.size + 1), p, g)


def test_ad_step_scales_lowest_eigenvector():
    g = GridSpec2D(8, 1.0, 0.05)
    p = AdvectionDiffusionParams(1.3)
    A = assemble_operator(g, p).toarray()
    lam, vec = np.linalg.eigh(A)
    v = vec[:, 0]
    np.testing.assert_allclose(lam[0], lowest_eigenvalue(g, 1.3), rtol=1e-12)
    np.testing.assert_allclose(ad_step_forward(v, p, g), v / (1 + g.dtau * lam[0]),
                               rtol=0, atol=1e-13)


def test_ad_step_backward_identity_when_operator_vanishes(rng):
    g = GridSpec2D(5, 1.0, 0.1)
    gu = _rand(rng, g)
    u = _rand(rng, g)
    p = AdvectionDiffusionParams(0.0)
    gx, _ = ad_step_backward(gu, ad_step_forward(u, p, g), u, p, g)
    np.testing.assert_allclose(gx, gu, atol=1e-15)


def test_ad_step_dot_product(rng):
    g = GridSpec2D(12, 0.5, 0.02)
    p = AdvectionDiffusionParams(1.5, 0.7, -0.4)
    x, y = _rand(rng, g), _rand(rng, g)
    Lx = ad_step_forward(x, p, g)
    LTy, _ = ad_step_backward(y, Lx, x, p, g)
    assert abs(y @ Lx - LTy @ x) <= 1e-12 * abs(y @ Lx)


def test_ad_step_parameter_gradient_matches_fd(rng):
    g = GridSpec2D(6, 1.0, 0.05)
    u, w = _rand(rng, g), _rand(rng, g)
    theta = np.array([1.2, 0.4, -0.3])

    def J(th):
        return w @ ad_step_forward(u, AdvectionDiffusionParams(*th), g)

    p = AdvectionDiffusionParams(*theta)
    _, gth = ad_step_backward(w, ad_step_forward(u, p, g), u, p, g)
    fd = fd_gradient(J, theta, 1e-6)
    assert np.linalg.norm(gth - fd) / np.linalg.norm(fd) < 1e-6


def test_pure_diffusion_norm_non_increasing(rng):
    g = GridSpec2D(10, 1.0, 0.1)
    u0 = _rand(rng, g)
    snaps = simulate_hidden(u0, "advection_diffusion", AdvectionDiffusionParams(1.0), g, 20, 1)
    norms = [np.linalg.norm(u0)] + [np.linalg.norm(s.values) for s in snaps]
    assert all(b <= a for a, b in zip(norms, norms[1:]))


# ---------------------------------------------------------------------------
# Caputo / L1

def test_caputo_weights_values():
    G = caputo_weights(0.5, 10).G
    assert G[0] == 1.0
    assert G[1] == pytest.approx(math.sqrt(2) - 1, abs=1e-15)
    assert np.all(G > 0) and np.all(np.diff(G) < 0)
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            caputo_weights(bad, 3)
    with pytest.raises(ValueError):
        caputo_weights(0.5, 0)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.05, 0.95), i_max=st.integers(1, 60))
def test_row_sums_closed_form_and_below_one(alpha, i_max):
    rows = caputo_row_sums(alpha, i_max)
    i = np.arange(1, i_max + 1)
    closed = 1 + (i - 1) ** (1 - alpha) - (i + 1) ** (1 - alpha)
    np.testing.assert_allclose(rows, closed, rtol=0, atol=1e-12)
    assert np.all(rows < 1)


def test_l1_history_weights_sum_to_one():
    # a constant history must be reproduced when the operator vanishes
    for alpha in (0.2, 0.7):
        for n in (0, 1, 5, 30):
            w, _ = l1_history_weights(alpha, n)
            assert w.sum() == pytest.approx(1.0, abs=1e-14)


def test_tfrac_step_trivial_cases(rng):
    g = GridSpec2D(6, 1.0, 0.05)
    p = TimeFractionalParams(0.6, 1.0)
    assert np.all(tfrac_step_forward(np.zeros((4, g.size)), p, g) == 0)
    c = _rand(rng, g)
    hist = np.tile(c, (5, 1))
    np.testing.assert_allclose(tfrac_step_forward(hist, TimeFractionalParams(0.6, 0.0), g), c,
                               atol=1e-14)
    gh, gt = tfrac_step_backward(np.zeros(g.size), np.zeros(g.size), np.zeros((4, g.size)), p, g)
    assert np.all(gh == 0) and np.all(gt == 0)
    with pytest.raises(ValueError):
        tfrac_step_forward(np.zeros((3, g.size + 1)), p, g)


def test_tfrac_first_step_closed_form():
    # on a lowest eigenvector the first step is a scalar division
    g = GridSpec2D(8, 1.0, 1e-3)
    p = TimeFractionalParams(0.4, 1.0)
    A = assemble_operator(g, AdvectionDiffusionParams(1.0)).toarray()
    lam, vec = np.linalg.eigh(A)
    u1 = tfrac_step_forward(vec[:, :1].T, p, g)
    expected = vec[:, 0] / (1 + gamma(2 - 0.4) * g.dtau**0.4 * lam[0])
    np.testing.assert_allclose(u1, expected, atol=1e-13)


def test_tfrac_dot_product(rng):
    g = GridSpec2D(10, 1.0, 0.01)
    p = TimeFractionalParams(0.45, 2.0)
    H = rng.standard_normal((6, g.size))
    y = _rand(rng, g)
    Lx = tfrac_step_forward(H, p, g)
    LTy, _ = tfrac_step_backward(y, Lx, H, p, g)
    lhs, rhs = y @ Lx, np.sum(LTy * H)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_tfrac_parameter_gradient_over_ten_steps(rng):
    g = GridSpec2D(6, 1.0, 0.02)
    u0 = _rand(rng, g)
    theta = np.array([0.6, 1.5])
    w = _rand(rng, g)

    def run(th):
        snaps = simulate_hidden(u0, "time_fractional", th, g, 10, 10)
        return snaps[-1].values

    def J(th):
        return w @ run(th)

    from adjointlab.tape import TapeGraph, backward, forward_eval, record
    from adjointlab.dynamics import hidden_snapshot_nodes

    tg = TapeGraph()
    m0 = tg.placeholder("m0")
    th = tg.placeholder("theta")
    wn = tg.constant(w)
    (snap,) = hidden_snapshot_nodes(tg, m0, th, "time_fractional", g, 1, 10)
    loss = record(tg, "dot", [snap, wn])
    forward_eval(tg, {m0: u0, th: theta})
    grad = backward(tg, loss)[th]
    fd = fd_gradient(J, theta, 1e-6)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-5


# ---------------------------------------------------------------------------
# spectral fractional diffusion

def _dst_matrix(m):
    k = np.arange(1, m + 1)
    return np.sqrt(2.0 / (m + 1)) * np.sin(np.pi * np.outer(k, k) / (m + 1))


def test_sfrac_s_equal_one_matches_dense_spectral_solve(rng):
    # dense oracle: the Dirichlet sine basis with continuum symbol |xi|^2
    g = GridSpec2D(16, 1.0 / 16, 1e-3)
    m = g.m
    S1 = _dst_matrix(m)
    S = np.kron(S1, S1)
    xi = np.pi * np.arange(1, m + 1) / g.length
    sym = (xi[:, None] ** 2 + xi[None, :] ** 2).ravel()
    a = 1.7
    L = S @ np.diag(sym) @ S.T
    u = _rand(rng, g)
    expected = np.linalg.solve(np.eye(g.size) + g.dtau * a * L, u)
    got = sfrac_step_forward(u, SpaceFractionalParams(1.0, a), g)
    np.testing.assert_allclose(got, expected, atol=1e-8 * np.abs(expected).max())


def test_sfrac_dft_lattice_dense_oracle_and_mean(rng):
    g = GridSpec2D(9, 0.5, 0.01)
    m = g.m
    F = np.fft.fft(np.eye(m))
    k = 2 * np.pi * np.fft.fftfreq(m, d=g.h)
    p = SpaceFractionalParams(0.6, 3.0)
    xi = np.hypot(k[:, None], k[None, :])
    mult = np.ones_like(xi)
    mult[xi > 0] = 1 / (1 + g.dtau * p.a * xi[xi > 0] ** (2 * p.s))
    u = _rand(rng, g).reshape(m, m)
    expected = np.real(np.linalg.inv(F) @ (mult * (F @ u @ F.T)) @ np.linalg.inv(F).T)
    got = sfrac_step_forward(u.ravel(), p, g, "dft")
    np.testing.assert_allclose(got, expected.ravel(), atol=1e-12)
    assert got.mean() == pytest.approx(u.mean(), abs=1e-14)
    const = np.full(g.size, 2.5)
    np.testing.assert_allclose(sfrac_step_forward(const, p, g, "dft"), const, atol=1e-13)


def test_sfrac_multiplier_range_and_zero_input():
    g = GridSpec2D(12, 0.2, 0.01)
    for s in (0.2, 0.8):
        mult = spectral_multiplier(SpaceFractionalParams(s, 4.0), g).values
        assert np.all(mult > 0) and np.all(mult <= 1)
    assert np.all(sfrac_step_forward(np.zeros(g.size), SpaceFractionalParams(0.5, 1.0), g) == 0)
    with pytest.raises(ValueError):
        spectral_multiplier(SpaceFractionalParams(0.5, 1.0), g, "fft")


@pytest.mark.parametrize("lattice", ["dst", "dft"])
def test_sfrac_dot_product(rng, lattice):
    g = GridSpec2D(16, 0.1, 0.01)
    p = SpaceFractionalParams(0.35, 2.0)
    x, y = _rand(rng, g), _rand(rng, g)
    Lx = sfrac_step_forward(x, p, g, lattice)
    LTy, _ = sfrac_step_backward(y, Lx, x, p, g, lattice)
    assert abs(y @ Lx - LTy @ x) <= 1e-12 * abs(y @ Lx)


def test_sfrac_constant_field_gives_zero_gradient_on_dft():
    g = GridSpec2D(8, 0.5, 0.01)
    p = SpaceFractionalParams(0.5, 1.0)
    u = np.full(g.size, 3.0)
    _, gt = sfrac_step_backward(np.ones(g.size), sfrac_step_forward(u, p, g, "dft"), u, p, g,
                                "dft")
    np.testing.assert_allclose(gt, 0.0, atol=1e-12)


@pytest.mark.parametrize("lattice", ["dst", "dft"])
def test_sfrac_parameter_gradient_matches_fd(rng, lattice):
    g = GridSpec2D(16, 0.1, 0.01)
    u, w = _rand(rng, g), _rand(rng, g)
    theta = np.array([0.45, 1.3])

    def J(th):
        return w @ sfrac_step_forward(u, SpaceFractionalParams(*th), g, lattice)

    p = SpaceFractionalParams(*theta)
    _, gth = sfrac_step_backward(w, sfrac_step_forward(u, p, g, lattice), u, p, g, lattice)
    fd = fd_gradient(J, theta, 1e-6)
    assert np.linalg.norm(gth - fd) / np.linalg.norm(fd) < 1e-6


# ---------------------------------------------------------------------------
# simulate_hidden

def test_simulate_hidden_matches_manual_stepping(rng):
    g = GridSpec2D(6, 1.0, 0.05)
    u0 = _rand(rng, g)
    p = AdvectionDiffusionParams(1.0, 0.2, -0.1)
    snaps = simulate_hidden(u0, "advection_diffusion", p, g, 6, 2)
    assert [s.time_index for s in snaps] == [2, 4, 6]
    u = u0
    manual = []
    for k in range(6):
        u = ad_step_forward(u, p, g)
        if k % 2 == 1:
            manual.append(u)
    for s, v in zip(snaps, manual):
        np.testing.assert_array_equal(s.values, v)
    assert simulate_hidden(u0, "advection_diffusion", p, g, 0, 1) == []
    with pytest.raises(ValueError):
        simulate_hidden(u0, "advection_diffusion", p, g, 5, 2)


def test_simulate_hidden_fractional_families_run(rng):
    g = GridSpec2D(6, 1.0, 0.05)
    u0 = _rand(rng, g)
    tf = simulate_hidden(u0, "time_fractional", TimeFractionalParams(0.5, 1.0), g, 4, 2)
    sf = simulate_hidden(u0, "space_fractional", SpaceFractionalParams(0.5, 1.0), g, 4, 2)
    assert len(tf) == len(sf) == 2
    assert np.linalg.norm(tf[-1].values) < np.linalg.norm(u0)
    assert np.linalg.norm(sf[-1].values) < np.linalg.norm(u0)


def test_operator_parts_shapes():
    g = GridSpec2D(5, 1.0, 0.1)
    lap, dx, dy = operator_parts(g)
    for M in (lap, dx, dy):
        assert sp.issparse(M) and M.shape == (g.size, g.size)
