"""Implicit time stepping for the slow hidden-dynamics models.

Three families are supported, each stepping the interior unknowns of a
uniform ``(N-1) x (N-1)`` grid with homogeneous Dirichlet boundaries:

``advection_diffusion``  backward Euler, ``(I + dtau*A) u' = u`` where ``-A``
                         is the 5-point advection-diffusion operator.
``time_fractional``      L1 discretization of the Caputo derivative; every
                         step couples to the entire history.
``space_fractional``     diagonal in a spectral basis, multiplier
                         ``1 / (1 + dtau*a*|xi|^(2s))``.

Fields are stored as flat vectors in row-major order of an array indexed
``[j, i]`` (``i`` along x varies fastest). Each stepper comes with a hand
written adjoint and is registered as a tape op.
"""

from __future__ import annotations

import functools
import math
import threading
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.fft
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import digamma, gamma

from . import tape
from .tape import ScanSpec, TapeGraph, record, scan

MODEL_FAMILIES = {
    "advection_diffusion": ("a", "b1", "b2"),
    "time_fractional": ("alpha", "a"),
    "space_fractional": ("s", "a"),
}


class SolverError(RuntimeError):
    """A linear solve failed to reach the residual tolerance."""


@dataclass(frozen=True)
class GridSpec2D:
    """``n`` grid intervals per dimension on ``[0, n*h]^2``."""

    n: int
    h: float
    dtau: float

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need at least 3 grid intervals per dimension")
        if not (self.h > 0 and self.dtau > 0):
            raise ValueError("h and dtau must be positive")

    @property
    def m(self) -> int:
        return self.n - 1

    @property
    def size(self) -> int:
        return (self.n - 1) ** 2

    @property
    def length(self) -> float:
        return self.n * self.h

    def with_dtau(self, dtau: float) -> "GridSpec2D":
        return GridSpec2D(self.n, self.h, dtau)


@dataclass(frozen=True)
class AdvectionDiffusionParams:
    a: float
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("diffusion coefficient must be >= 0")

    def as_array(self):
        return np.array([self.a, self.b1, self.b2])


@dataclass(frozen=True)
class TimeFractionalParams:
    alpha: float
    a: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.a < 0:
            raise ValueError("diffusion coefficient must be >= 0")

    def as_array(self):
        return np.array([self.alpha, self.a])


@dataclass(frozen=True)
class SpaceFractionalParams:
    s: float
    a: float

    def __post_init__(self):
        if not 0 < self.s <= 1:
            raise ValueError("s must lie in (0, 1]")
        if self.a < 0:
            raise ValueError("diffusion coefficient must be >= 0")

    def as_array(self):
        return np.array([self.s, self.a])


_PARAM_TYPES = {
    "advection_diffusion": AdvectionDiffusionParams,
    "time_fractional": TimeFractionalParams,
    "space_fractional": SpaceFractionalParams,
}


def make_params(family: str, values):
    """Build the params dataclass of ``family`` from a flat vector."""
    try:
        cls = _PARAM_TYPES[family]
    except KeyError:
        raise ValueError(f"unknown model family {family!r}") from None
    return cls(*map(float, values))


@dataclass
class HiddenField:
    values: np.ndarray
    time_index: int


# ---------------------------------------------------------------------------
# advection-diffusion operator


@functools.lru_cache(maxsize=32)
def operator_parts(grid: GridSpec2D):
    """Sparse (laplacian, d/dx, d/dy) on the interior with Dirichlet rows eliminated."""
    m, h = grid.m, grid.h
    eye = sp.identity(m, format="csr")
    second = sp.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / h**2
    central = sp.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1]) / (2 * h)
    lap = (sp.kron(eye, second) + sp.kron(second, eye)).tocsr()
    dx = sp.kron(eye, central).tocsr()
    dy = sp.kron(central, eye).tocsr()
    return lap, dx, dy


def assemble_operator(grid: GridSpec2D, params: AdvectionDiffusionParams) -> sp.csr_matrix:
    """The matrix ``A`` with ``du/dt = -A u``; independent of ``dtau``."""
    lap, dx, dy = operator_parts(grid)
    return (-(params.a * lap + params.b1 * dx + params.b2 * dy)).tocsr()


_factor_lock = threading.Lock()


@functools.lru_cache(maxsize=256)
def _factorize(grid: GridSpec2D, coeff: float, a: float, b1: float, b2: float):
    A = assemble_operator(grid, AdvectionDiffusionParams(a, b1, b2))
    M = (sp.identity(grid.size, format="csc") + coeff * A).tocsc()
    return M, splu(M)


def implicit_system(grid, coeff, a, b1=0.0, b2=0.0):
    """Cached ``(M, LU)`` for ``M = I + coeff*A``."""
    with _factor_lock:
        return _factorize(grid, float(coeff), float(a), float(b1), float(b2))


def _solve(system, rhs, trans="N"):
    M, lu = system
    x = lu.solve(rhs, trans=trans)
    Mx = M @ x if trans == "N" else M.T @ x
    scale = np.linalg.norm(rhs)
    if not np.all(np.isfinite(x)) or np.linalg.norm(Mx - rhs) > 1e-12 * max(scale, 1e-300):
        raise SolverError("implicit solve did not converge; system may be near singular")
    return x


def _check_field(u, grid, name="u"):
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (grid.size,):
        raise ValueError(f"{name} has shape {u.shape}, expected ({grid.size},)")
    return u


def ad_step_forward(u, params: AdvectionDiffusionParams, grid: GridSpec2D):
    u = _check_field(u, grid)
    system = implicit_system(grid, grid.dtau, params.a, params.b1, params.b2)
    return _solve(system, u)


def ad_step_backward(g, u_next, u, params: AdvectionDiffusionParams, grid: GridSpec2D):
    """Return ``(dJ/du, dJ/d(a, b1, b2))`` given ``g = dJ/du_next``."""
    g = _check_field(g, grid, "g")
    system = implicit_system(grid, grid.dtau, params.a, params.b1, params.b2)
    x = _solve(system, g, trans="T")
    lap, dx, dy = operator_parts(grid)
    dt = grid.dtau
    grad_theta = dt * np.array([x @ (lap @ u_next), x @ (dx @ u_next), x @ (dy @ u_next)])
    return x, grad_theta


# ---------------------------------------------------------------------------
# Caputo / L1


@dataclass(frozen=True)
class CaputoWeights:
    G: np.ndarray
    alpha: float


def caputo_weights(alpha: float, n_steps: int) -> CaputoWeights:
    """``G_m = (m+1)^(1-alpha) - m^(1-alpha)`` for ``m = 0..n_steps``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    m = np.arange(n_steps + 1, dtype=np.float64)
    return CaputoWeights((m + 1) ** (1 - alpha) - m ** (1 - alpha), alpha)


def caputo_weights_dalpha(alpha: float, n_steps: int) -> np.ndarray:
    m = np.arange(n_steps + 1, dtype=np.float64)
    logm = np.zeros_like(m)
    logm[1:] = np.log(m[1:])
    return -np.log(m + 1) * (m + 1) ** (1 - alpha) + logm * m ** (1 - alpha)


def l1_history_weights(alpha: float, n: int):
    """Weights on ``u^0..u^n`` in the right-hand side for ``u^{n+1}``, and their alpha-derivatives.

    The L1 sum ``sum_k G_{n-k} (u^{k+1} - u^k)`` rearranges to
    ``u^{n+1} = M^{-1} (G_n u^0 + sum_{j=1..n} (G_{n-j} - G_{n+1-j}) u^j)``.
    """
    G = caputo_weights(alpha, n + 1).G
    dG = caputo_weights_dalpha(alpha, n + 1)
    w = np.empty(n + 1)
    dw = np.empty(n + 1)
    w[0], dw[0] = G[n], dG[n]
    j = np.arange(1, n + 1)
    w[1:] = G[n - j] - G[n + 1 - j]
    dw[1:] = dG[n - j] - dG[n + 1 - j]
    return w, dw


def caputo_row_sums(alpha: float, i_max: int) -> np.ndarray:
    """Direct sums of the stability-analysis coefficients for rows ``i = 1..i_max``.

    Uses ``a_{i,k} = G_{i-k-1} - G_{i-k}`` for ``1 <= k <= i-1`` and
    ``a_{i,0} = -G_i``.
    """
    G = caputo_weights(alpha, i_max + 1).G
    out = np.empty(i_max)
    for i in range(1, i_max + 1):
        k = np.arange(1, i)
        out[i - 1] = np.sum(G[i - k - 1] - G[i - k]) - G[i]
    return out


def fractional_coeff(alpha: float, dtau: float) -> float:
    return gamma(2 - alpha) * dtau**alpha


def _check_history(history, grid):
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != grid.size or history.shape[0] < 1:
        raise ValueError(f"history must have shape (n+1, {grid.size}), got {history.shape}")
    return history


def tfrac_step_forward(history, params: TimeFractionalParams, grid: GridSpec2D):
    """``u^{n+1}`` from ``history = [u^0, ..., u^n]`` (shape ``(n+1, M)``)."""
    history = _check_history(history, grid)
    n = history.shape[0] - 1
    w, _ = l1_history_weights(params.alpha, n)
    c = fractional_coeff(params.alpha, grid.dtau)
    system = implicit_system(grid, c, params.a)
    return _solve(system, w @ history)


def tfrac_step_backward(g, u_next, history, params: TimeFractionalParams, grid: GridSpec2D):
    """Return ``(dJ/dhistory, dJ/d(alpha, a))``."""
    g = _check_field(g, grid, "g")
    history = _check_history(history, grid)
    n = history.shape[0] - 1
    w, dw = l1_history_weights(params.alpha, n)
    c = fractional_coeff(params.alpha, grid.dtau)
    system = implicit_system(grid, c, params.a)
    x = _solve(system, g, trans="T")
    lap, _, _ = operator_parts(grid)
    x_lap_u = x @ (lap @ u_next)
    dc_dalpha = c * (np.log(grid.dtau) - digamma(2 - params.alpha))
    grad_alpha = x @ (dw @ history) + dc_dalpha * params.a * x_lap_u
    grad_a = c * x_lap_u
    return np.outer(w, x), np.array([grad_alpha, grad_a])


# ---------------------------------------------------------------------------
# spectral fractional diffusion

LATTICES = ("dst", "dft")


@dataclass(frozen=True)
class SpectralMultiplier:
    values: np.ndarray
    xi_abs: np.ndarray
    lattice: str


@functools.lru_cache(maxsize=32)
def frequency_magnitude(grid: GridSpec2D, lattice: str = "dst") -> np.ndarray:
    """``|xi|`` on the transform lattice, shaped like the transform output."""
    m = grid.m
    if lattice == "dst":
        # sine modes k = 1..m of the Dirichlet problem on [0, n*h]
        xi = np.pi * np.arange(1, m + 1) / grid.length
        return np.hypot(xi[:, None], xi[None, :])
    if lattice == "dft":
        ky = 2 * np.pi * np.fft.fftfreq(m, d=grid.h)
        kx = 2 * np.pi * np.fft.rfftfreq(m, d=grid.h)
        return np.hypot(ky[:, None], kx[None, :])
    raise ValueError(f"unknown lattice {lattice!r}")


def _forward_transform(u2d, lattice):
    if lattice == "dst":
        return scipy.fft.dstn(u2d, type=1, norm="ortho")
    return np.fft.rfft2(u2d)


def _inverse_transform(uh, lattice, m):
    if lattice == "dst":
        return scipy.fft.idstn(uh, type=1, norm="ortho")
    return np.fft.irfft2(uh, s=(m, m))


def spectral_multiplier(params: SpaceFractionalParams, grid: GridSpec2D,
                        lattice: str = "dst") -> SpectralMultiplier:
    xi = frequency_magnitude(grid, lattice)
    mult = np.ones_like(xi)
    nz = xi > 0
    mult[nz] = 1.0 / (1.0 + grid.dtau * params.a * xi[nz] ** (2 * params.s))
    return SpectralMultiplier(mult, xi, lattice)


def _multiplier_derivatives(params, grid, lattice):
    xi = frequency_magnitude(grid, lattice)
    d_s = np.zeros_like(xi)
    d_a = np.zeros_like(xi)
    nz = xi > 0
    p = xi[nz] ** (2 * params.s)
    denom = (1.0 + grid.dtau * params.a * p) ** 2
    d_s[nz] = -grid.dtau * params.a * p * 2 * np.log(xi[nz]) / denom
    d_a[nz] = -grid.dtau * p / denom
    return d_s, d_a


def apply_spectral(u, values, grid, lattice="dst"):
    m = grid.m
    uh = _forward_transform(np.reshape(u, (m, m)), lattice)
    return _inverse_transform(values * uh, lattice, m).ravel()


def sfrac_step_forward(u, params: SpaceFractionalParams, grid: GridSpec2D, lattice="dst"):
    u = _check_field(u, grid)
    return apply_spectral(u, spectral_multiplier(params, grid, lattice).values, grid, lattice)


def sfrac_step_backward(g, u_next, u, params: SpaceFractionalParams, grid: GridSpec2D,
                        lattice="dst"):
    """Return ``(dJ/du, dJ/d(s, a))``; the real diagonal multiplier is self-adjoint."""
    g = _check_field(g, grid, "g")
    mult = spectral_multiplier(params, grid, lattice).values
    grad_u = apply_spectral(g, mult, grid, lattice)
    d_s, d_a = _multiplier_derivatives(params, grid, lattice)
    grad_s = g @ apply_spectral(u, d_s, grid, lattice)
    grad_a = g @ apply_spectral(u, d_a, grid, lattice)
    return grad_u, np.array([grad_s, grad_a])


# ---------------------------------------------------------------------------
# tape ops


def _ad_fwd(inputs, grid, **_):
    u, theta = inputs
    params = AdvectionDiffusionParams(*theta)
    out = ad_step_forward(u, params, grid)
    return out, (out, u, params, grid)


def _ad_bwd(g, ctx):
    u_next, u, params, grid = ctx
    return list(ad_step_backward(g, u_next, u, params, grid))


def _tfrac_fwd(inputs, grid, step, **_):
    # carry is a fixed-size history buffer; row step+1 is filled from rows 0..step
    buf, theta = inputs
    if buf.ndim != 2 or step + 1 >= buf.shape[0]:
        raise ValueError(f"history buffer of shape {buf.shape} too short for step {step}")
    params = TimeFractionalParams(*theta)
    u_next = tfrac_step_forward(buf[: step + 1], params, grid)
    out = buf.copy()
    out[step + 1] = u_next
    return out, (buf, u_next, params, grid, step)


def _tfrac_bwd(g, ctx):
    buf, u_next, params, grid, step = ctx
    g_hist, g_theta = tfrac_step_backward(g[step + 1], u_next, buf[: step + 1], params, grid)
    g_buf = g.copy()
    g_buf[step + 1] = 0.0
    g_buf[: step + 1] += g_hist
    return [g_buf, g_theta]


def _sfrac_fwd(inputs, grid, lattice="dst", **_):
    u, theta = inputs
    params = SpaceFractionalParams(*theta)
    out = sfrac_step_forward(u, params, grid, lattice)
    return out, (out, u, params, grid, lattice)


def _sfrac_bwd(g, ctx):
    u_next, u, params, grid, lattice = ctx
    return list(sfrac_step_backward(g, u_next, u, params, grid, lattice))


def _history_init_fwd(inputs, length):
    u0 = inputs[0]
    buf = np.zeros((length, u0.size))
    buf[0] = u0
    return buf, None


def _history_init_bwd(g, ctx):
    return [g[0].copy()]


_SAMPLE_GRID = GridSpec2D(6, 1.0, 0.05)


def _sample_field(rng):
    return rng.standard_normal(_SAMPLE_GRID.size)


register = tape.register_custom_op
AD_STEP = register(
    "ad_step", _ad_fwd, _ad_bwd,
    lambda rng: ([_sample_field(rng), np.array([1.0, 0.3, -0.2])], {"grid": _SAMPLE_GRID}))
TFRAC_STEP = register(
    "tfrac_step", _tfrac_fwd, _tfrac_bwd,
    lambda rng: ([np.vstack([rng.standard_normal((3, _SAMPLE_GRID.size)),
                             np.zeros((1, _SAMPLE_GRID.size))]),
                  np.array([0.6, 1.0])], {"grid": _SAMPLE_GRID, "step": 2}))
SFRAC_STEP = register(
    "sfrac_step", _sfrac_fwd, _sfrac_bwd,
    lambda rng: ([_sample_field(rng), np.array([0.5, 2.0])], {"grid": _SAMPLE_GRID}))
HISTORY_INIT = register(
    "history_init", _history_init_fwd, _history_init_bwd,
    lambda rng: ([_sample_field(rng)], {"length": 4}))

_STEP_OPS = {
    "advection_diffusion": AD_STEP,
    "time_fractional": TFRAC_STEP,
    "space_fractional": SFRAC_STEP,
}


def hidden_snapshot_nodes(graph: TapeGraph, m0_id: int, theta_id: int, family: str,
                          grid: GridSpec2D, n_windows: int, substeps: int,
                          checkpoint_stride: Optional[int] = None,
                          lattice: str = "dst") -> List[int]:
    """Record ``n_windows`` windows of ``substeps`` steps; return one node per window end."""
    if family not in _STEP_OPS:
        raise ValueError(f"unknown model family {family!r}")
    if n_windows <= 0 or substeps <= 0:
        return []
    step_op = _STEP_OPS[family]
    attrs = {"grid": grid}
    if family == "space_fractional":
        attrs["lattice"] = lattice
    stride = None if checkpoint_stride is None else min(checkpoint_stride, substeps)
    snaps = []
    if family == "time_fractional":
        total = n_windows * substeps
        carry = record(graph, HISTORY_INIT, [m0_id], length=total + 1)
        shape = (total + 1, grid.size)
    else:
        carry = m0_id
        shape = (grid.size,)
    spec = ScanSpec(step_op, substeps, shape, stride)
    for w in range(n_windows):
        carry = scan(graph, spec, carry, [theta_id], start=w * substeps, **attrs)
        if family == "time_fractional":
            snaps.append(record(graph, "index", [carry], index=(w + 1) * substeps))
        else:
            snaps.append(carry)
    return snaps


def simulate_hidden(m0, family: str, params, grid: GridSpec2D, n_steps: int,
                    record_every: int, checkpoint_stride: Optional[int] = None,
                    lattice: str = "dst") -> List[HiddenField]:
    """Run the hidden dynamics and return the field after every ``record_every`` steps."""
    if record_every <= 0 or n_steps % record_every:
        raise ValueError("record_every must divide n_steps")
    m0 = _check_field(m0, grid, "m0")
    theta = params.as_array() if hasattr(params, "as_array") else np.asarray(params, float)
    g = TapeGraph()
    m0_id = g.placeholder("m0", (grid.size,))
    th_id = g.placeholder("theta", theta.shape)
    nodes = hidden_snapshot_nodes(g, m0_id, th_id, family, grid, n_steps // record_every,
                                  record_every, checkpoint_stride, lattice)
    vals = tape.forward_eval(g, {m0_id: m0, th_id: theta})
    return [HiddenField(vals[nid].copy(), (k + 1) * record_every) for k, nid in enumerate(nodes)]


def interior_to_field(u, grid: GridSpec2D) -> np.ndarray:
    """Embed interior values into the full ``(n+1, n+1)`` grid with zero boundary."""
    full = np.zeros((grid.n + 1, grid.n + 1))
    full[1:-1, 1:-1] = np.reshape(u, (grid.m, grid.m))
    return full


def field_to_interior(field, grid: GridSpec2D) -> np.ndarray:
    return np.asarray(field)[1:-1, 1:-1].ravel().copy()


def _embed_fwd(inputs, grid):
    return interior_to_field(_check_field(inputs[0], grid), grid), grid


def _embed_bwd(g, grid):
    return [field_to_interior(g, grid)]


EMBED = register("embed_interior", _embed_fwd, _embed_bwd,
                 lambda rng: ([_sample_field(rng)], {"grid": _SAMPLE_GRID}))


def lowest_eigenvalue(grid: GridSpec2D, a: float = 1.0) -> float:
    """Smallest eigenvalue of ``-a * laplacian`` (closed form for the 5-point stencil)."""
    return 2 * a * 4 / grid.h**2 * math.sin(math.pi / (2 * grid.n)) ** 2
