from __future__ import annotations

import csv
import io

import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from adjointlab.inverse import (
    InverseProblem,
    OptimizerConfig,
    OptResult,
    block_field,
    default_bounds,
    default_init,
    draw_noise,
    generate_synthetic,
    history_csv,
    invert,
    lbfgs_minimize,
    noise_generator,
    projected_gradient,
    recovery_report,
    report_csv,
    strong_wolfe,
    LineSearchError,
)
from adjointlab.dynamics import GridSpec2D

from conftest import mini_problem


# ---------------------------------------------------------------------------
# optimizer

def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0, 0.5]),
                         config=OptimizerConfig(grad_tol=1e-10, f_rel_tol=0.0))
    assert res.success
    np.testing.assert_allclose(res.x, 1.0, atol=1e-6)
    assert all(b <= a for a, b in zip(res.loss_history, res.loss_history[1:]))
    assert len(res.loss_history) == len(res.grad_norm_history) == res.n_iter + 1


def test_lbfgs_respects_bounds():
    target = np.array([2.0, -3.0, 0.5])

    def fg(x):
        r = x - target
        return 0.5 * r @ r, r

    bounds = [(0.0, 1.0), (-1.0, None), (None, None)]
    res = lbfgs_minimize(fg, np.array([0.5, 0.0, 0.0]), bounds)
    np.testing.assert_allclose(res.x, [1.0, -1.0, 0.5], atol=1e-10)
    for x in res.params_history:
        assert 0.0 <= x[0] <= 1.0 and x[1] >= -1.0
    assert res.success
    lo, hi = np.array([0.0, -1.0, -np.inf]), np.array([1.0, np.inf, np.inf])
    assert np.linalg.norm(projected_gradient(res.x, res.grad, lo, hi)) <= 1e-10


def test_lbfgs_callback_and_max_iter():
    seen = []
    res = lbfgs_minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]),
                         config=OptimizerConfig(max_iter=3),
                         callback=lambda i, x, f, g: seen.append(i))
    assert res.reason == "max_iter" and not res.success
    assert seen == [0, 1, 2, 3]


def test_lbfgs_rejects_nonfinite_start():
    with pytest.raises(ValueError):
        lbfgs_minimize(lambda x: (np.nan, x), np.zeros(2))


def test_line_search_failure_is_reported():
    # an inconsistent gradient makes every trial step fail the sufficient-decrease test
    res = lbfgs_minimize(lambda x: (float(x @ x), -x), np.ones(2),
                         config=OptimizerConfig(max_linesearch=5))
    assert res.reason == "line_search_failed" and not res.success


def test_strong_wolfe_on_quadratic():
    phi = lambda a: ((a - 2.0) ** 2, 2 * (a - 2.0), None)
    a, f, _ = strong_wolfe(phi, 4.0, -4.0, 1.0, np.inf, 1e-4, 0.9, 20)
    assert f <= 4.0 + 1e-4 * a * -4.0
    assert abs(2 * (a - 2.0)) <= 0.9 * 4.0
    with pytest.raises(LineSearchError):
        strong_wolfe(lambda a: (1.0 + a, 1.0, None), 1.0, -1.0, 1.0, np.inf, 1e-4, 0.9, 5)


# ---------------------------------------------------------------------------
# problems and synthetic data

def test_defaults():
    assert default_bounds("time_fractional")[0] == (1e-3, 1 - 1e-3)
    assert default_bounds("advection_diffusion")[2] == (None, None)
    np.testing.assert_allclose(default_init("space_fractional", (0.8, 10.0)), [0.5, 5.0])
    np.testing.assert_allclose(default_init("advection_diffusion", (10.0, 0.1, -0.2)),
                               [5.0, 0.05, -0.1])


def test_problem_validation():
    with pytest.raises(ValueError):
        mini_problem("time_fractional", (1.2, 10.0))
    with pytest.raises(ValueError):
        mini_problem("time_fractional", (0.5, 10.0), init_params=np.array([1.5, 5.0]))
    with pytest.raises(ValueError):
        mini_problem(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        mini_problem("diffusion", (1.0,))


def test_synthetic_data_is_deterministic():
    a = generate_synthetic(mini_problem())
    b = generate_synthetic(mini_problem())
    np.testing.assert_array_equal(a, b)
    n1 = generate_synthetic(mini_problem(noise_sigma=5.0, seed=3))
    n2 = generate_synthetic(mini_problem(noise_sigma=5.0, seed=3))
    n3 = generate_synthetic(mini_problem(noise_sigma=5.0, seed=4))
    np.testing.assert_array_equal(n1, n2)
    assert not np.array_equal(n1, n3) and not np.array_equal(n1, a)
    prob = mini_problem()
    assert a.shape == (prob.schedule.n_obs, 2, len(prob.setup.geometry.receivers),
                       prob.setup.grid.nt)


def test_noise_mean_and_spread():
    sigma = 10.0
    draws = draw_noise(noise_generator(7), sigma, (10000,))
    assert abs(draws.mean()) <= 3 * sigma / 100
    assert draws.std() == pytest.approx(sigma, rel=0.05)
    np.testing.assert_array_equal(draw_noise(noise_generator(7), sigma, (5,)), draws[:5])
    assert np.all(draw_noise(noise_generator(7), 0.0, (5,)) == 0)


def test_block_field_layout():
    g = GridSpec2D(20, 3.0, 0.01)
    f = block_field(g).reshape(g.m, g.m)
    assert f[0, 0] == 0 and f[-1, -1] == 0
    assert set(np.unique(f)) == {0.0, 100.0, 150.0, 200.0, 250.0, 300.0}


def test_mini_inversion_recovers_parameters():
    prob = mini_problem()
    res = invert(prob, generate_synthetic(prob))
    assert res.success
    np.testing.assert_allclose(res.x / prob.true_params, 1.0, atol=1e-4)
    np.testing.assert_allclose(res.params_history[0], prob.init_params)
    assert res.loss_history[-1] < 1e-12 * res.loss_history[0]


# ---------------------------------------------------------------------------
# reports

def _fake_result(x):
    return OptResult(np.asarray(x, float), 1.0, np.zeros(len(x)), [np.asarray(x, float)], [2.0, 1.0],
                     [3.0, 0.5])


def test_recovery_report_conventions():
    truth = (10.0, 0.1, -0.2)
    rows = recovery_report(_fake_result([20.0, 0.2, -0.4]), truth, "advection_diffusion")
    text = report_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert [r["reported"] for r in parsed] == ["2.0000", "2.0000", "2.0000"]
    assert all(r["convention"] == "ratio" for r in parsed)
    rows = recovery_report(_fake_result([0.4, 10.0]), (0.4, 10.0), "time_fractional")
    parsed = list(csv.DictReader(io.StringIO(report_csv(rows))))
    assert parsed[0]["reported"] == "0.4000" and parsed[0]["convention"] == "value"
    assert parsed[1]["reported"] == "1.0000"


def test_history_csv():
    text = history_csv(_fake_result([1.0]))
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["iter", "loss", "grad_norm"]
    assert [float(r[1]) for r in rows[1:]] == [2.0, 1.0]
