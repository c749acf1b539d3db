"""Gradient checks (Taylor remainder, finite differences) and stability diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tape
from .dynamics import (
    MODEL_FAMILIES,
    GridSpec2D,
    caputo_row_sums,
    fractional_coeff,
    implicit_system,
    l1_history_weights,
    make_params,
    operator_parts,
    _multiplier_derivatives,
    _solve,
    apply_spectral,
    frequency_magnitude,
    hidden_snapshot_nodes,
    simulate_hidden,
    spectral_multiplier,
)
from .tape import TapeGraph, record

EPS = np.finfo(np.float64).eps
DEFAULT_GAMMAS = (1e-1, 1e-2, 1e-3, 1e-4)


# ---------------------------------------------------------------------------
# Taylor remainder


@dataclass
class TaylorTestReport:
    gammas: np.ndarray
    first_order_errors: np.ndarray
    second_order_errors: np.ndarray
    first_order_slope: float
    second_order_slope: float
    inner_product: float
    degenerate: bool = False

    def passed(self, first_tol: float = 0.15, second_min: float = 1.9) -> bool:
        return (abs(self.first_order_slope - 1.0) <= first_tol
                and self.second_order_slope >= second_min)


def loglog_slope(x, y, floor: float = 0.0) -> float:
    """Least-squares slope of ``log y`` against ``log x`` over points with ``y > floor``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (y > floor) & np.isfinite(y)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def taylor_remainder_test(f: Callable, grad, c, c_tilde, gammas: Sequence[float] = DEFAULT_GAMMAS
                          ) -> TaylorTestReport:
    """Errors ``|F(c+g d) - F(c)|`` and ``|F(c+g d) - F(c) - g <d, grad F(c)>|``.

    ``grad`` is the gradient at ``c`` (an array) or a callable returning it.
    Errors below ``100 eps`` times the magnitude of ``F`` are cancellation
    noise and are left out of the slope fits. A near-zero directional
    derivative is flagged through ``degenerate``.
    """
    gammas = np.asarray(gammas, dtype=float)
    if np.any(np.diff(gammas) >= 0) or np.any(gammas <= 0):
        raise ValueError("gammas must be positive and strictly decreasing")
    c = np.asarray(c, dtype=float)
    d = np.asarray(c_tilde, dtype=float)
    g = grad(c) if callable(grad) else grad
    f0 = float(f(c))
    if not np.isfinite(f0):
        raise FloatingPointError("functional is not finite at the base point")
    inner = float(np.vdot(d, np.asarray(g, dtype=float)))
    e1 = np.empty(gammas.size)
    e2 = np.empty(gammas.size)
    scale = abs(f0)
    for k, gm in enumerate(gammas):
        fk = float(f(c + gm * d))
        if not np.isfinite(fk):
            raise FloatingPointError(f"functional is not finite at gamma={gm}")
        scale = max(scale, abs(fk))
        e1[k] = abs(fk - f0)
        e2[k] = abs(fk - f0 - gm * inner)
    floor = 100 * EPS * max(scale, 1e-300)
    deg = abs(inner) <= 1e3 * EPS * max(scale, 1e-300) / max(gammas[0], 1e-300)
    return TaylorTestReport(gammas, e1, e2, loglog_slope(gammas, e1, floor),
                            loglog_slope(gammas, e2, floor), inner, bool(deg))


def taylor_rows(name: str, rep: TaylorTestReport):
    return [name, f"{rep.first_order_slope:.6f}", f"{rep.second_order_slope:.6f}",
            repr(rep.inner_product), int(not rep.degenerate)]


TAYLOR_HEADER = ["name", "first_order_slope", "second_order_slope", "inner_product",
                 "nonzero_inner_product"]


def op_taylor_test(op_name: str, seed: int = 0, gammas=DEFAULT_GAMMAS) -> TaylorTestReport:
    """Taylor test of a registered op through ``J = <w, op(x)>`` at its sample point.

    All inputs are perturbed together along a random direction.
    """
    op = tape.get_op(op_name)
    if op.sample is None:
        raise ValueError(f"op {op_name!r} has no sample point")
    rng = np.random.default_rng(seed)
    inputs, attrs = op.sample(rng)
    inputs = [np.asarray(x, dtype=float) for x in inputs]
    out, ctx = op.forward(inputs, **attrs)
    w = rng.standard_normal(np.shape(out))
    grads = op.backward(w, ctx)
    sizes = [x.size for x in inputs]
    shapes = [x.shape for x in inputs]
    flat = np.concatenate([x.ravel() for x in inputs])
    gflat = np.concatenate([np.asarray(gi, dtype=float).ravel() for gi in grads])
    dirs = np.concatenate([rng.standard_normal(n) * max(np.abs(x).max(), 1.0)
                           for n, x in zip(sizes, inputs)])

    def unflat(z):
        parts, k = [], 0
        for n, s in zip(sizes, shapes):
            parts.append(z[k:k + n].reshape(s))
            k += n
        return parts

    def f(z):
        return float(np.vdot(w, op.forward(unflat(z), **attrs)[0]))

    # keep the perturbation well inside the op's admissible region (e.g. 0<alpha<1)
    d = dirs * 0.02
    return taylor_remainder_test(f, gflat, flat, d, gammas)


# ---------------------------------------------------------------------------
# finite differences


def fd_gradient(f: Callable, c, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    c = np.asarray(c, dtype=float)
    out = np.empty(c.size)
    flat = c.ravel()
    for i in range(c.size):
        e = np.zeros_like(flat)
        e[i] = step
        fp = float(f((flat + e).reshape(c.shape)))
        fm = float(f((flat - e).reshape(c.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("functional is not finite near the base point")
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(c.shape)


def fd_directional(f: Callable, c, direction, step: float = 1e-6) -> float:
    """Central-difference derivative of ``f`` at ``c`` along ``direction``."""
    if step <= 0:
        raise ValueError("step must be positive")
    c = np.asarray(c, dtype=float)
    d = np.asarray(direction, dtype=float)
    fp, fm = float(f(c + step * d)), float(f(c - step * d))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError("functional is not finite near the base point")
    return (fp - fm) / (2 * step)


# ---------------------------------------------------------------------------
# spectral radius


class PowerIterationError(RuntimeError):
    pass


@dataclass
class PowerIterationResult:
    value: float
    iterations: int
    converged: bool


def power_iteration(apply: Callable, n: int, max_iter: int = 500, tol: float = 1e-10,
                    seed: int = 0, accept_tol: float = 1e-4) -> PowerIterationResult:
    """Dominant eigenvalue magnitude of a linear map by power iteration.

    Stops when the estimate changes by less than ``tol`` (relative) or after
    ``max_iter`` iterations. If at that point the estimate is still moving by
    more than ``accept_tol`` the iteration is declared divergent.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    change = np.inf
    for k in range(1, max_iter + 1):
        w = apply(v)
        nw = float(np.linalg.norm(w))
        if not np.isfinite(nw):
            raise PowerIterationError("power iteration produced non-finite values")
        if nw == 0.0:
            return PowerIterationResult(0.0, k, True)
        change = abs(nw - est) / nw
        est = nw
        v = w / nw
        if change < tol:
            return PowerIterationResult(est, k, True)
    if change > accept_tol:
        raise PowerIterationError(
            f"power iteration did not converge (relative change {change:.2e})")
    return PowerIterationResult(est, max_iter, False)


def step_inverse_operator(family: str, params, grid: GridSpec2D, lattice: str = "dst"):
    """The map ``v -> A_i^{-1} v`` of one implicit step."""
    p = make_params(family, params)
    if family == "advection_diffusion":
        system = implicit_system(grid, grid.dtau, p.a, p.b1, p.b2)
    elif family == "time_fractional":
        system = implicit_system(grid, fractional_coeff(p.alpha, grid.dtau), p.a)
    else:
        mult = spectral_multiplier(p, grid, lattice).values
        return lambda v: apply_spectral(v, mult, grid, lattice)
    return lambda v: _solve(system, v)


def spectral_radius(family: str, params, grid: GridSpec2D, lattice: str = "dst",
                    **kw) -> PowerIterationResult:
    return power_iteration(step_inverse_operator(family, params, grid, lattice), grid.size, **kw)


# ---------------------------------------------------------------------------
# stability


def scheme_order(family: str, params) -> float:
    """Power of ``dt`` in the implicit coefficient: alpha for the Caputo scheme, else 1."""
    p = make_params(family, params)
    return p.alpha if family == "time_fractional" else 1.0


JACOBIAN_PARAMS = {
    "advection_diffusion": ("a", "b1", "b2"),
    # the L1 weights depend on alpha through the step index only, so the
    # alpha column does not shrink with dt; the bound is stated for a
    "time_fractional": ("a",),
    "space_fractional": ("s", "a"),
}


def parameter_jacobian_norm(family: str, params, grid: GridSpec2D, trajectory,
                            lattice: str = "dst", wrt: Optional[Sequence[str]] = None) -> float:
    """Largest column norm of ``du^i/dtheta`` (previous states held fixed) over a trajectory.

    ``trajectory`` is ``[u^0, u^1, ..., u^n]``; ``wrt`` selects parameter
    columns by name (default ``JACOBIAN_PARAMS[family]``).
    """
    wrt = JACOBIAN_PARAMS[family] if wrt is None else tuple(wrt)
    unknown = set(wrt) - set(MODEL_FAMILIES[family])
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)} for {family}")
    p = make_params(family, params)
    traj = np.asarray(trajectory, dtype=float)
    lap, dx, dy = operator_parts(grid)
    best = 0.0
    if family == "advection_diffusion":
        system = implicit_system(grid, grid.dtau, p.a, p.b1, p.b2)
        for u in traj[1:]:
            for name, P in zip(("a", "b1", "b2"), (lap, dx, dy)):
                if name in wrt:
                    best = max(best, np.linalg.norm(_solve(system, grid.dtau * (P @ u))))
    elif family == "time_fractional":
        c = fractional_coeff(p.alpha, grid.dtau)
        dc = c * (math.log(grid.dtau) - _digamma(2 - p.alpha))
        system = implicit_system(grid, c, p.a)
        for i in range(1, traj.shape[0]):
            u = traj[i]
            if "a" in wrt:
                best = max(best, np.linalg.norm(_solve(system, c * (lap @ u))))
            if "alpha" in wrt:
                _, dw = l1_history_weights(p.alpha, i - 1)
                col = _solve(system, dw @ traj[:i] + dc * p.a * (lap @ u))
                best = max(best, np.linalg.norm(col))
    else:
        d_s, d_a = _multiplier_derivatives(p, grid, lattice)
        for u in traj[:-1]:
            for name, d in (("s", d_s), ("a", d_a)):
                if name in wrt:
                    best = max(best, np.linalg.norm(apply_spectral(u, d, grid, lattice)))
    return float(best)


def jacobian_bound_constant(family: str, params, grid: GridSpec2D, u_norm: float,
                            lattice: str = "dst", wrt: Optional[Sequence[str]] = None) -> float:
    """``C2`` with ``|du^i/dtheta| <= C2 dt^order`` from operator-norm bounds.

    Uses ``|A_i^{-1}| <= 1`` (the symmetric part of ``A`` is positive
    semidefinite), ``|laplacian| <= 8/h^2`` and ``|d/dx| <= 1/h``.
    """
    wrt = JACOBIAN_PARAMS[family] if wrt is None else tuple(wrt)
    p = make_params(family, params)
    h = grid.h
    if family == "advection_diffusion":
        k = max([8 / h**2] * ("a" in wrt) + [1 / h] * bool({"b1", "b2"} & set(wrt)) + [0.0])
    elif family == "time_fractional":
        if "alpha" in wrt:
            raise ValueError("no dt^alpha bound for the alpha column")
        k = _gamma(2 - p.alpha) * 8 / h**2
    else:
        xi = frequency_magnitude(grid, lattice)
        xi = xi[xi > 0]
        top = float(np.max(xi ** (2 * p.s)))
        k = max([top] * ("a" in wrt)
                + [2 * p.a * top * float(np.max(np.abs(np.log(xi))))] * ("s" in wrt) + [0.0])
    return float(k * u_norm)


def _gamma(x):
    return math.gamma(x)


def _digamma(x):
    from scipy.special import digamma

    return float(digamma(x))


def surrogate_grid(dt: float, lam: float = 1.0) -> GridSpec2D:
    """Smallest admissible grid (2x2 interior) on which a uniform state is an
    eigenvector of ``-laplacian`` with eigenvalue ``lam``.

    With no advection, a uniform initial state stays uniform, so the field
    problem reduces exactly to the scalar equation with ``A = a * lam``.
    """
    return GridSpec2D(3, math.sqrt(2.0 / lam), dt)


def surrogate_trajectory(family: str, params, dt: float, n_steps: int, u0: float = 1.0,
                         lam: float = 1.0, lattice: str = "dst") -> np.ndarray:
    """Scalar trajectory ``u^0..u^n`` (first interior value of the surrogate grid)."""
    grid = surrogate_grid(dt, lam)
    m0 = np.full(grid.size, float(u0))
    snaps = simulate_hidden(m0, family, params, grid, n_steps, 1, lattice=lattice)
    return np.array([u0] + [s.values[0] for s in snaps])


def surrogate_gradient(family: str, params, dt: float, t_final: float = 0.1,
                       u0: float = 1.0, lattice: str = "dst") -> np.ndarray:
    """``DJ/Dtheta`` for ``J = mean(u(T)^2) / 2`` on the surrogate problem."""
    n = int(round(t_final / dt))
    if n < 1 or abs(n * dt - t_final) > 1e-9 * t_final:
        raise ValueError("t_final must be a multiple of dt")
    grid = surrogate_grid(dt)
    theta = make_params(family, params).as_array()
    g = TapeGraph()
    m0 = g.placeholder("m0", (grid.size,))
    th = g.placeholder("theta", theta.shape)
    (last,) = hidden_snapshot_nodes(g, m0, th, family, grid, 1, n, None, lattice)
    sq = record(g, "square", [last])
    loss = record(g, "scale", [record(g, "sum", [sq])], factor=0.5 / grid.size)
    tape.forward_eval(g, {m0: np.full(grid.size, float(u0)), th: theta})
    return tape.backward(g, loss, wrt=[th])[th]


@dataclass
class StabilityReport:
    family: str
    dt: np.ndarray
    spectral_radius: np.ndarray
    power_converged: np.ndarray
    max_row_sum: np.ndarray
    param_jacobian_norm: np.ndarray
    jacobian_bound: np.ndarray
    learnability_ratio: np.ndarray
    surrogate_grad_norm: np.ndarray
    rho_exponent: float
    rho_constant: float
    jacobian_exponent: float
    jacobian_constant: float
    row_sums: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_variation: float = 2.0

    # flags are functions of the recorded numbers only
    @property
    def radius_ok(self) -> bool:
        return bool(np.all(self.spectral_radius < 1.0))

    @property
    def row_sums_ok(self) -> bool:
        if self.family == "time_fractional":
            return bool(np.all(self.row_sums < 1.0))
        # one-step schemes carry a single unit weight on the previous state
        return bool(np.all(self.max_row_sum <= 1.0))

    @property
    def jacobian_ok(self) -> bool:
        return bool(np.all(self.param_jacobian_norm <= self.jacobian_bound * (1 + 1e-12)))

    @property
    def learnability_ok(self) -> bool:
        r = self.learnability_ratio
        return bool(np.all(r > 0) and r.min() >= 0.5 * r[0])

    @property
    def gradient_variation(self) -> float:
        g = self.surrogate_grad_norm
        return float(g.max() / g.min()) if g.min() > 0 else float("inf")

    @property
    def gradient_ok(self) -> bool:
        return self.gradient_variation <= self.max_variation

    @property
    def all_pass(self) -> bool:
        return (self.radius_ok and self.row_sums_ok and self.jacobian_ok
                and self.learnability_ok and self.gradient_ok)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dt", "spectral_radius", "power_converged", "max_row_sum",
                    "param_jacobian_norm", "jacobian_bound", "learnability_ratio", "surrogate_grad_norm",
                    "radius_ok", "row_sums_ok", "jacobian_ok", "learnability_ok", "gradient_ok"])
        for k in range(self.dt.size):
            w.writerow([repr(float(self.dt[k])), repr(float(self.spectral_radius[k])),
                        int(self.power_converged[k]), repr(float(self.max_row_sum[k])),
                        repr(float(self.param_jacobian_norm[k])),
                        repr(float(self.jacobian_bound[k])),
                        repr(float(self.learnability_ratio[k])),
                        repr(float(self.surrogate_grad_norm[k])),
                        int(self.spectral_radius[k] < 1.0), int(self.row_sums_ok),
                        int(self.jacobian_ok), int(self.learnability_ok), int(self.gradient_ok)])
        return buf.getvalue()


def _power_fit(x, y):
    """Fit ``y = C x^p``; returns ``(p, C)``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = y > 0
    if keep.sum() < 2:
        return float("nan"), float("nan")
    p, logc = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(p), float(math.exp(logc))


def stability_report(family: str, params, grid: GridSpec2D, dt_list: Sequence[float],
                     m0=None, t_final: Optional[float] = None, i_max: int = 50,
                     lattice: str = "dst", surrogate_t_final: float = 0.1,
                     max_variation: float = 2.0) -> StabilityReport:
    """Per-``dt`` diagnostics of the gradient stability assumptions.

    The field problem runs from ``m0`` (default: a centred bump) up to
    ``t_final`` (default ``10 * dt_list[0]``) on ``grid`` with each ``dt``.
    """
    if family not in MODEL_FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    dts = np.asarray(dt_list, dtype=float)
    if np.any(dts <= 0) or np.any(np.diff(dts) >= 0):
        raise ValueError("dt_list must be positive and strictly decreasing")
    p = make_params(family, params)
    theta = p.as_array()
    if m0 is None:
        xs = np.arange(1, grid.n) / grid.n
        m0 = np.outer(np.sin(np.pi * xs), np.sin(np.pi * xs)).ravel()
    t_final = 10 * dts[0] if t_final is None else t_final
    rho, conv, rows, jac, bound, ratio, gnorm = [], [], [], [], [], [], []
    order = scheme_order(family, theta)
    row_sums = np.zeros(0)
    if family == "time_fractional":
        row_sums = caputo_row_sums(p.alpha, i_max)
    for dt in dts:
        g = grid.with_dtau(float(dt))
        pr = spectral_radius(family, theta, g, lattice)
        rho.append(pr.value)
        conv.append(pr.converged)
        n = int(round(t_final / dt))
        traj = [np.asarray(m0, float)] + [h.values for h in
                                          simulate_hidden(m0, family, theta, g, n, 1,
                                                          lattice=lattice)]
        if family == "time_fractional":
            rows.append(float(caputo_row_sums(p.alpha, max(n, 1)).max()))
        else:
            rows.append(1.0)
        theta_norm = parameter_jacobian_norm(family, theta, g, traj, lattice)
        jac.append(theta_norm)
        u_max = max(float(np.linalg.norm(u)) for u in traj)
        bound.append(jacobian_bound_constant(family, theta, g, u_max, lattice) * dt**order)
        ratio.append(theta_norm / max(1.0 - pr.value, 1e-300))
        gnorm.append(float(np.linalg.norm(
            surrogate_gradient(family, theta, float(dt), surrogate_t_final, lattice=lattice))))
    rho = np.array(rho)
    # 1 - rho ~ C1 dt^p and |du/dtheta| ~ C2 dt^q; p and q are recorded, not asserted
    rho_exp, rho_c = _power_fit(dts, 1.0 - rho)
    jac_exp, jac_c = _power_fit(dts, np.array(jac))
    return StabilityReport(family, dts, rho, np.array(conv), np.array(rows), np.array(jac),
                           np.array(bound), np.array(ratio), np.array(gnorm), rho_exp, rho_c, jac_exp, jac_c,
                           row_sums, max_variation)
