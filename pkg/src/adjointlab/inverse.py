"""Synthetic data, bounded L-BFGS, and recovery tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .coupling import CoupledObjective, MultiScaleSchedule, RockPhysicsMap
from .dynamics import MODEL_FAMILIES, GridSpec2D, make_params
from .wave import WaveSetup

INDEX_PARAMS = ("alpha", "s")
INDEX_EPS = 1e-3


@dataclass
class OptimizerConfig:
    memory: int = 10
    max_iter: int = 15000
    f_rel_tol: float = 1e-12
    grad_tol: float = 1e-12
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 40


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    params_history: List[np.ndarray] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)
    grad_norm_history: List[float] = field(default_factory=list)
    reason: str = ""
    n_iter: int = 0
    n_eval: int = 0

    @property
    def success(self) -> bool:
        return self.reason in ("ftol", "gtol")


class LineSearchError(RuntimeError):
    pass


def _project(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def projected_gradient(x, g, lo, hi):
    return x - _project(x - g, lo, hi)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga), (b, fb, gb); bisection fallback."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad >= 0:
        d2 = math.copysign(math.sqrt(rad), b - a)
        denom = gb - ga + 2 * d2
        if denom != 0:
            t = b - (b - a) * (gb + d2 - d1) / denom
            lo, hi = min(a, b), max(a, b)
            margin = 0.1 * (hi - lo)
            if lo + margin <= t <= hi - margin:
                return t
    return 0.5 * (a + b)


def strong_wolfe(phi, f0, g0, alpha0, alpha_max, c1, c2, max_iter):
    """Line search on ``phi(alpha) -> (f, dphi)`` honouring ``alpha <= alpha_max``.

    Returns ``(alpha, f, extra)`` with ``extra`` whatever ``phi`` attached
    to the accepted point. Reaching ``alpha_max`` with sufficient decrease is
    accepted even if the curvature condition asks for a longer step.
    """
    if g0 >= 0:
        raise LineSearchError("not a descent direction")
    cache = {}

    def ev(a):
        if a not in cache:
            cache[a] = phi(a)
        return cache[a]

    best = (0.0, f0, None)
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = min(alpha0, alpha_max)
    for i in range(max_iter):
        f, g, extra = ev(a)
        if f < best[1]:
            best = (a, f, extra)
        if not np.isfinite(f) or f > f0 + c1 * a * g0 or (i > 0 and f >= f_prev):
            return _zoom(ev, f0, g0, a_prev, f_prev, g_prev, a, f, g, c1, c2,
                         max_iter - i, best)
        if abs(g) <= -c2 * g0:
            return a, f, extra
        if g >= 0:
            return _zoom(ev, f0, g0, a, f, g, a_prev, f_prev, g_prev, c1, c2,
                         max_iter - i, best)
        if a >= alpha_max:
            return a, f, extra
        a_prev, f_prev, g_prev = a, f, g
        a = min(2.0 * a, alpha_max)
    if best[0] > 0:
        return best
    raise LineSearchError("line search exhausted its iterations")


def _zoom(ev, f0, g0, a_lo, f_lo, g_lo, a_hi, f_hi, g_hi, c1, c2, max_iter, best):
    for _ in range(max(max_iter, 1) + 20):
        if not np.isfinite(f_hi):
            a = 0.5 * (a_lo + a_hi)
        else:
            a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        if abs(a_hi - a_lo) <= 1e-14 * max(abs(a_lo), abs(a_hi)):
            break
        f, g, extra = ev(a)
        if f < best[1]:
            best = (a, f, extra)
        if not np.isfinite(f) or f > f0 + c1 * a * g0 or f >= f_lo:
            a_hi, f_hi, g_hi = a, f, g
        else:
            if abs(g) <= -c2 * g0:
                return a, f, extra
            if g * (a_hi - a_lo) >= 0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = a, f, g
    if best[0] > 0 and best[1] <= f0 + c1 * best[0] * g0:
        return best
    raise LineSearchError("zoom failed to satisfy the Wolfe conditions")


def lbfgs_minimize(fun_grad: Callable, x0, bounds=None, config: Optional[OptimizerConfig] = None,
                   callback: Optional[Callable] = None) -> OptResult:
    """Projected L-BFGS with a strong-Wolfe line search.

    Stops when the projected gradient norm falls below ``grad_tol`` times the
    initial gradient norm (or 1, whichever is larger), or when one iteration changes
    the loss by less than ``f_rel_tol`` relative.

    ``fun_grad(x) -> (f, g)``. Variables sitting on a bound with the gradient
    pointing outward are frozen for the iteration; the search direction is
    clipped so the step never leaves the box.
    """
    cfg = config or OptimizerConfig()
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    if bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds], dtype=float)
        hi = np.array([np.inf if b[1] is None else b[1] for b in bounds], dtype=float)
    x = _project(x, lo, hi)
    bound_tol = 1e-12
    with np.errstate(invalid="ignore"):
        lo_near = np.where(np.isfinite(lo), lo + bound_tol * np.maximum(1.0, np.abs(lo)), -np.inf)
        hi_near = np.where(np.isfinite(hi), hi - bound_tol * np.maximum(1.0, np.abs(hi)), np.inf)
    n_eval = 0

    def fg(z):
        nonlocal n_eval
        n_eval += 1
        f, g = fun_grad(z)
        return float(f), np.asarray(g, dtype=np.float64)

    f, g = fg(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    res = OptResult(x.copy(), f, g.copy())

    def log(x, f, g):
        res.params_history.append(x.copy())
        res.loss_history.append(f)
        res.grad_norm_history.append(float(np.linalg.norm(projected_gradient(x, g, lo, hi))))
        if callback is not None:
            callback(len(res.loss_history) - 1, x, f, g)

    log(x, f, g)
    f_init = f
    # the projected norm is clipped by the box, so scale by the raw one
    g_stop = cfg.grad_tol * max(float(np.linalg.norm(g)), 1.0)
    S: List[np.ndarray] = []
    Y: List[np.ndarray] = []
    reason = "max_iter"
    retried = False
    it = 0
    while it < cfg.max_iter:
        if res.grad_norm_history[-1] <= g_stop:
            reason = "gtol"
            break
        # a step clipped to the box can stop a rounding error short of the bound
        near_lo = x <= lo_near
        near_hi = x >= hi_near
        free = ~((near_lo & (g > 0)) | (near_hi & (g < 0)))
        d = -_two_loop(np.where(free, g, 0.0), S, Y)
        d[~free | (near_lo & (d < 0)) | (near_hi & (d > 0))] = 0.0
        if d @ g >= 0:
            S.clear()
            Y.clear()
            d = np.where(free, -g, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            steps = np.where(d > 0, (hi - x) / d, np.where(d < 0, (lo - x) / d, np.inf))
        alpha_max = float(np.min(steps)) if steps.size else np.inf
        if alpha_max <= 0:
            reason = "gtol"
            break
        alpha0 = 1.0 if S else min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))

        def phi(a, x=x, d=d):
            z = _project(x + a * d, lo, hi)
            fz, gz = fg(z)
            return fz, float(gz @ d), (z, gz)

        try:
            _, f_new, (x_new, g_new) = strong_wolfe(
                phi, f, float(g @ d), alpha0, alpha_max, cfg.c1, cfg.c2, cfg.max_linesearch)
        except LineSearchError:
            if S and not retried:
                S.clear()
                Y.clear()
                retried = True
                continue
            # a failed search after the loss fell by f_rel_tol is round-off, not divergence
            reason = "ftol" if abs(f) <= cfg.f_rel_tol * abs(f_init) else "line_search_failed"
            break
        retried = False
        it += 1
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * max(y @ y, 1e-300) and s @ y > 0:
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        rel = (f - f_new) / max(abs(f), abs(f_new), 1e-300)
        x, f, g = x_new, f_new, g_new
        log(x, f, g)
        if rel <= cfg.f_rel_tol:
            reason = "ftol"
            break
    res.x, res.fun, res.grad = x, f, g
    res.reason = reason
    res.n_iter = it
    res.n_eval = n_eval
    return res


def _two_loop(g, S, Y):
    q = g.copy()
    rhos = [1.0 / (y @ s) for s, y in zip(S, Y)]
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rhos)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y, r), a in zip(zip(S, Y, rhos), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return q


# ---------------------------------------------------------------------------
# problems


def default_bounds(family: str):
    out = []
    for name in MODEL_FAMILIES[family]:
        if name in INDEX_PARAMS:
            out.append((INDEX_EPS, 1.0 - INDEX_EPS))
        elif name == "a":
            out.append((0.0, None))
        else:
            out.append((None, None))
    return out


def default_init(family: str, true_params) -> np.ndarray:
    """Half the true coefficients; 0.5 for fractional indices."""
    return np.array([0.5 if name in INDEX_PARAMS else 0.5 * v
                     for name, v in zip(MODEL_FAMILIES[family], true_params)])


@dataclass
class InverseProblem:
    family: str
    true_params: np.ndarray
    hidden_grid: GridSpec2D
    schedule: MultiScaleSchedule
    setup: WaveSetup
    m0: np.ndarray
    rock: RockPhysicsMap = field(default_factory=RockPhysicsMap)
    init_params: Optional[np.ndarray] = None
    bounds: Optional[list] = None
    noise_sigma: float = 0.0
    seed: int = 0
    lattice: str = "dst"
    checkpoint_stride: Optional[int] = None

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        self.true_params = np.asarray(self.true_params, dtype=np.float64)
        make_params(self.family, self.true_params)
        if self.init_params is None:
            self.init_params = default_init(self.family, self.true_params)
        self.init_params = np.asarray(self.init_params, dtype=np.float64)
        if self.bounds is None:
            self.bounds = default_bounds(self.family)
        for v, (lo, hi) in zip(self.init_params, self.bounds):
            if (lo is not None and v < lo) or (hi is not None and v > hi):
                raise ValueError("initial parameters must lie inside the bounds")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    @property
    def param_names(self):
        return MODEL_FAMILIES[self.family]

    def objective(self, observed=None, with_noise=False) -> CoupledObjective:
        return CoupledObjective(self.family, self.hidden_grid, self.schedule, self.setup,
                                self.rock, self.m0, observed,
                                checkpoint_stride=self.checkpoint_stride,
                                lattice=self.lattice, with_noise=with_noise)


def noise_generator(seed: int) -> np.random.Generator:
    """Counter-based generator so draws do not depend on platform or thread."""
    return np.random.Generator(np.random.Philox(seed))


def draw_noise(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    return sigma * rng.standard_normal(shape)


def generate_synthetic(problem: InverseProblem):
    """Observed records ``(n_obs, n_src, n_rec, nt)`` from the true parameters.

    Gaussian noise of standard deviation ``noise_sigma`` is added to each
    coarse snapshot before it is upscaled.
    """
    obj = problem.objective(with_noise=True)
    noise = draw_noise(noise_generator(problem.seed), problem.noise_sigma,
                       (problem.schedule.n_obs, problem.hidden_grid.size))
    _, records = obj.simulate(problem.true_params, noise=noise)
    return records


def invert(problem: InverseProblem, observed, config: Optional[OptimizerConfig] = None,
           callback=None) -> OptResult:
    """Minimize the waveform misfit over the model parameters.

    The optimizer works on parameters divided by ``|init|`` so that
    coefficients of very different magnitude are comparably scaled; the
    returned histories are in physical units.
    """
    obj = problem.objective(observed)
    scale = np.where(np.abs(problem.init_params) > 0, np.abs(problem.init_params), 1.0)
    bounds = [(None if lo is None else lo / s, None if hi is None else hi / s)
              for (lo, hi), s in zip(problem.bounds, scale)]

    def fun_grad(z):
        f, g = obj.value_and_grad(z * scale)
        return f, g * scale

    res = lbfgs_minimize(fun_grad, problem.init_params / scale, bounds, config, callback)
    res.x = res.x * scale
    res.grad = res.grad / scale
    res.params_history = [p * scale for p in res.params_history]
    return res


def recovery_report(result: OptResult, true_params, family: str):
    """Rows ``(parameter, estimate, true, reported, convention)``.

    Coefficients are reported as ``estimate / true``; fractional indices are
    reported as the estimate itself.
    """
    est = result.x if hasattr(result, "x") else np.asarray(result)
    rows = []
    for name, e, t in zip(MODEL_FAMILIES[family], est, true_params):
        if name in INDEX_PARAMS:
            rows.append((name, float(e), float(t), float(e), "value"))
        else:
            rows.append((name, float(e), float(t), float(e) / float(t), "ratio"))
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "estimate", "true", "reported", "convention"])
    for name, e, t, r, conv in rows:
        w.writerow([name, f"{e:.10g}", f"{t:.10g}", f"{r:.4f}", conv])
    return buf.getvalue()


def history_csv(result: OptResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss", "grad_norm"])
    for i, (f, gn) in enumerate(zip(result.loss_history, result.grad_norm_history)):
        w.writerow([i, repr(float(f)), repr(float(gn))])
    return buf.getvalue()


def block_field(grid: GridSpec2D, values=(100.0, 150.0, 200.0, 250.0, 300.0),
                margin: float = 0.15) -> np.ndarray:
    """Piecewise-constant interior field: vertical strips inside a zero margin.

    ``margin`` is the fraction of the domain width left at zero on every side.
    """
    m = grid.m
    out = np.zeros((m, m))
    lo = int(round(margin * m))
    hi = m - lo
    edges = np.linspace(lo, hi, len(values) + 1).round().astype(int)
    for v, a, b in zip(values, edges[:-1], edges[1:]):
        out[lo:hi, a:b] = v
    return out.ravel()
