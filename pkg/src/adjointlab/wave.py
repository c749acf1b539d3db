"""2D acoustic stress-velocity propagation with C-PML and its discrete adjoint.

Staggered grid: pressure ``p`` lives on integer nodes ``(iz, ix)``, the
horizontal particle velocity ``vx`` on ``(iz, ix + 1/2)`` and the vertical
one ``vz`` on ``(iz + 1/2, ix)``. All fields are stored as ``(nz, nx)``
arrays; the last staggered column/row sits on the outer wall and stays 0.

One time step (``n -> n + 1``) is, in order::

    dpdx   = Dx+ p                     psi_px = b_h psi_px + c_h dpdx
    vx    -= dt/rho (dpdx/kappa_h + psi_px)          (same for z)
    dvx    = Dx- vx                    psi_vx = b psi_vx + c dvx
    div    = dvx/kappa + psi_vx + dvz/kappa + psi_vz
    p     -= dt K div ;  p[src] += dt K[src] f(n)

and the receivers sample ``p`` after each step. The gradient with respect
to the bulk modulus is obtained by running exactly these assignments
backwards (discretize-then-optimize), so it matches finite differences of
the discrete misfit to round-off.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tape

__all__ = [
    "WaveGridSpec",
    "MediumModel",
    "SurveyGeometry",
    "SourceWavelet",
    "CPMLProfile",
    "WaveSetup",
    "CFLError",
    "WaveInstabilityError",
    "ricker",
    "build_cpml_profile",
    "wave_forward",
    "wave_misfit",
    "wave_gradient",
    "wave_misfit_and_gradient",
    "pml_mask",
]


class CFLError(ValueError):
    pass


class WaveInstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class WaveGridSpec:
    nz: int
    nx: int
    h: float
    dt: float
    nt: int
    npml: int

    def __post_init__(self):
        if self.npml < 1:
            raise ValueError("npml must be >= 1")
        if self.nz <= 2 * self.npml or self.nx <= 2 * self.npml:
            raise ValueError("grid must be larger than twice the PML thickness")
        if self.h <= 0 or self.dt <= 0 or self.nt < 1:
            raise ValueError("h, dt must be positive and nt >= 1")

    @property
    def shape(self):
        return (self.nz, self.nx)

    @property
    def interior_shape(self):
        return (self.nz - 2 * self.npml, self.nx - 2 * self.npml)

    def interior(self):
        s = self.npml
        return (slice(s, self.nz - s), slice(s, self.nx - s))

    def courant(self, c_max: float) -> float:
        return c_max * self.dt * math.sqrt(2.0) / self.h

    def check_cfl(self, c_max: float) -> None:
        cn = self.courant(c_max)
        if not cn <= 1.0:
            raise CFLError(f"CFL condition violated: c_max*dt*sqrt(2)/h = {cn:.4g} > 1")


@dataclass
class MediumModel:
    m: np.ndarray
    m_base: float = 3500.0
    rho: float = 1.0

    @property
    def velocity(self) -> np.ndarray:
        return self.m + self.m_base

    @property
    def bulk(self) -> np.ndarray:
        v = self.velocity
        if np.any(v <= 0):
            raise ValueError("velocity m + m_base must be positive")
        return v**2 * self.rho


@dataclass(frozen=True)
class SurveyGeometry:
    sources: Tuple[Tuple[int, int], ...]
    receivers: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(tuple(map(int, s)) for s in self.sources))
        object.__setattr__(self, "receivers", tuple(tuple(map(int, r)) for r in self.receivers))

    def validate(self, grid: WaveGridSpec) -> None:
        lo = grid.npml
        for kind, pts in (("source", self.sources), ("receiver", self.receivers)):
            for iz, ix in pts:
                if not (lo < iz < grid.nz - 1 - lo and lo < ix < grid.nx - 1 - lo):
                    raise ValueError(f"{kind} at {(iz, ix)} is not strictly inside the non-PML region")

    @property
    def receiver_index(self):
        r = np.array(self.receivers, dtype=int).reshape(-1, 2)
        return r[:, 0], r[:, 1]


@dataclass(frozen=True)
class SourceWavelet:
    f0: float
    t0: float
    samples: np.ndarray = field(compare=False)


def ricker(f0: float, t0: float, dt: float, nt: int) -> SourceWavelet:
    """Ricker wavelet with unit peak at ``t0``."""
    if f0 <= 0:
        raise ValueError("f0 must be positive")
    t = np.arange(nt) * dt - t0
    arg = (np.pi * f0 * t) ** 2
    return SourceWavelet(f0, t0, (1.0 - 2.0 * arg) * np.exp(-arg))


# ---------------------------------------------------------------------------
# C-PML


@dataclass(frozen=True)
class AxisProfile:
    """Damping parameters on integer nodes (``*_int``) and half nodes (``*_half``)."""

    d_int: np.ndarray
    d_half: np.ndarray
    kappa_int: np.ndarray
    kappa_half: np.ndarray
    a_int: np.ndarray
    a_half: np.ndarray

    @staticmethod
    def _alpha_eta(d, kappa, a):
        return d / kappa + a, d / kappa**2

    def recursion(self, dt: float, half: bool):
        """Recursive-convolution coefficients ``(b, c, 1/kappa)``."""
        d, kappa, a = ((self.d_half, self.kappa_half, self.a_half) if half
                       else (self.d_int, self.kappa_int, self.a_int))
        alpha, eta = self._alpha_eta(d, kappa, a)
        b = np.exp(-alpha * dt)
        c = np.zeros_like(d)
        ok = (d > 0) & (alpha > 0)
        c[ok] = eta[ok] * (b[ok] - 1.0) / alpha[ok]
        return b, c, 1.0 / kappa


@dataclass(frozen=True)
class CPMLProfile:
    z: AxisProfile
    x: AxisProfile
    d0: float
    npml: int


def _axis_profile(n, npml, h, d0, kappa_max, a_max, power):
    def grade(pos):
        dist = np.zeros_like(pos)
        left = pos < npml
        right = pos > n - 1 - npml
        dist[left] = npml - pos[left]
        dist[right] = pos[right] - (n - 1 - npml)
        return np.clip(dist / npml, 0.0, None)

    out = []
    for pos in (np.arange(n, dtype=float), np.arange(n, dtype=float) + 0.5):
        xn = grade(pos)
        inside = xn > 0
        d = d0 * xn**power
        kappa = 1.0 + (kappa_max - 1.0) * xn
        a = np.where(inside, a_max * (1.0 - xn), a_max)
        out.append((d, kappa, a))
    (di, ki, ai), (dh, kh, ah) = out
    return AxisProfile(di, dh, ki, kh, ai, ah)


def build_cpml_profile(grid: WaveGridSpec, f0: float, reflection_coeff: float = 1e-3,
                       c_max: float = 3500.0, kappa_max: float = 2.0,
                       power: int = 2) -> CPMLProfile:
    """Graded C-PML on all four sides.

    ``d`` grows as ``d0 * x^power`` with ``d0 = -(power+1) c_max ln(R) / (2 L)``,
    ``kappa`` grows linearly from 1 to ``kappa_max``, and the frequency shift
    decreases linearly from ``pi*f0`` at the inner edge to 0 at the outer edge.
    """
    if not 0 < reflection_coeff < 1:
        raise ValueError("reflection coefficient must lie in (0, 1)")
    if f0 <= 0:
        raise ValueError("f0 must be positive")
    thickness = grid.npml * grid.h
    d0 = -(power + 1) * c_max * math.log(reflection_coeff) / (2.0 * thickness)
    a_max = math.pi * f0
    z = _axis_profile(grid.nz, grid.npml, grid.h, d0, kappa_max, a_max, power)
    x = _axis_profile(grid.nx, grid.npml, grid.h, d0, kappa_max, a_max, power)
    return CPMLProfile(z, x, d0, grid.npml)


def pml_mask(grid: WaveGridSpec) -> np.ndarray:
    """Boolean array, True in the physical (non-PML) region."""
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    return mask


# ---------------------------------------------------------------------------
# time stepping


class _Coeffs:
    def __init__(self, grid: WaveGridSpec, profile: CPMLProfile, rho: float):
        dt = grid.dt
        self.dt = dt
        self.dt_rho = dt / rho
        self.inv_h = 1.0 / grid.h
        bz, cz, ikz = profile.z.recursion(dt, half=False)
        bzh, czh, ikzh = profile.z.recursion(dt, half=True)
        bx, cx, ikx = profile.x.recursion(dt, half=False)
        bxh, cxh, ikxh = profile.x.recursion(dt, half=True)
        col = lambda v: v[:, None]
        row = lambda v: v[None, :]
        self.bz, self.cz, self.ikz = col(bz), col(cz), col(ikz)
        self.bzh, self.czh, self.ikzh = col(bzh), col(czh), col(ikzh)
        self.bx, self.cx, self.ikx = row(bx), row(cx), row(ikx)
        self.bxh, self.cxh, self.ikxh = row(bxh), row(cxh), row(ikxh)


_STATE_FIELDS = ("p", "vx", "vz", "psi_px", "psi_pz", "psi_vx", "psi_vz")


class _State:
    __slots__ = _STATE_FIELDS

    def __init__(self, shape=None):
        if shape is not None:
            for f in _STATE_FIELDS:
                setattr(self, f, np.zeros(shape))

    def copy(self) -> "_State":
        s = _State()
        for f in _STATE_FIELDS:
            setattr(s, f, getattr(self, f).copy())
        return s


def _step(s: _State, K, c: _Coeffs, src, amp):
    """Advance one step in place; return the divergence term that multiplies K."""
    p = s.p
    dpdx = np.zeros_like(p)
    dpdx[:, :-1] = (p[:, 1:] - p[:, :-1]) * c.inv_h
    s.psi_px *= c.bxh
    s.psi_px += c.cxh * dpdx
    s.vx -= c.dt_rho * (dpdx * c.ikxh + s.psi_px)

    dpdz = np.zeros_like(p)
    dpdz[:-1, :] = (p[1:, :] - p[:-1, :]) * c.inv_h
    s.psi_pz *= c.bzh
    s.psi_pz += c.czh * dpdz
    s.vz -= c.dt_rho * (dpdz * c.ikzh + s.psi_pz)

    dvx = s.vx.copy()
    dvx[:, 1:] -= s.vx[:, :-1]
    dvx *= c.inv_h
    s.psi_vx *= c.bx
    s.psi_vx += c.cx * dvx

    dvz = s.vz.copy()
    dvz[1:, :] -= s.vz[:-1, :]
    dvz *= c.inv_h
    s.psi_vz *= c.bz
    s.psi_vz += c.cz * dvz

    div = dvx * c.ikx + s.psi_vx + dvz * c.ikz + s.psi_vz
    s.p -= c.dt * K * div
    s.p[src] += c.dt * K[src] * amp
    return div


def _check_finite(s: _State, n: int):
    if not np.all(np.isfinite(s.p)):
        raise WaveInstabilityError(f"non-finite pressure at time step {n}; check CFL and medium")


def propagate(K, rho, grid: WaveGridSpec, profile: CPMLProfile, src, samples, geometry,
              checkpoint_stride: int = 0, keep_divergence: bool = False,
              snapshot_every: int = 0):
    """Forward solve for one shot.

    Returns ``(record, extras)`` where ``record`` has shape ``(n_receivers, nt)``
    and ``extras`` holds optional ``checkpoints`` (state before every
    ``checkpoint_stride``-th step), ``divergence`` (every step) and
    ``snapshots`` of ``p``.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.shape != grid.shape:
        raise ValueError(f"bulk modulus has shape {K.shape}, expected {grid.shape}")
    c = _Coeffs(grid, profile, rho)
    rz, rx = geometry.receiver_index
    src = tuple(src)
    s = _State(grid.shape)
    record = np.empty((rz.size, grid.nt))
    checkpoints, divs, snaps = {}, [], []
    # blow-up is detected and reported below, so silence the float warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(grid.nt):
            if checkpoint_stride and n % checkpoint_stride == 0:
                checkpoints[n] = s.copy()
            div = _step(s, K, c, src, samples[n])
            if keep_divergence:
                divs.append(div)
            record[:, n] = s.p[rz, rx]
            if snapshot_every and (n + 1) % snapshot_every == 0:
                snaps.append(s.p.copy())
            if n % 100 == 99 or n == grid.nt - 1:
                _check_finite(s, n)
    extras = {"checkpoints": checkpoints, "stride": checkpoint_stride,
              "divergence": divs if keep_divergence else None,
              "snapshots": np.array(snaps) if snapshot_every else None}
    return record, extras


def _adjoint_step(lam: _State, K, c: _Coeffs, src, amp, div, gK):
    """Transpose of :func:`_step` acting on adjoint variables, in place."""
    lp = lam.p
    gK -= c.dt * lp * div
    gK[src] += c.dt * lp[src] * amp

    t = -c.dt * K * lp
    l_dvx = t * c.ikx
    l_dvz = t * c.ikz
    lam.psi_vx += t
    lam.psi_vz += t

    l_dvx += c.cx * lam.psi_vx
    lam.psi_vx *= c.bx
    l_dvz += c.cz * lam.psi_vz
    lam.psi_vz *= c.bz

    l_dvx *= c.inv_h
    lam.vx += l_dvx
    lam.vx[:, :-1] -= l_dvx[:, 1:]
    l_dvz *= c.inv_h
    lam.vz += l_dvz
    lam.vz[:-1, :] -= l_dvz[1:, :]

    l_dpdx = -c.dt_rho * lam.vx * c.ikxh
    lam.psi_px -= c.dt_rho * lam.vx
    l_dpdx += c.cxh * lam.psi_px
    lam.psi_px *= c.bxh
    l_dpdx *= c.inv_h
    lp[:, 1:] += l_dpdx[:, :-1]
    lp[:, :-1] -= l_dpdx[:, :-1]

    l_dpdz = -c.dt_rho * lam.vz * c.ikzh
    lam.psi_pz -= c.dt_rho * lam.vz
    l_dpdz += c.czh * lam.psi_pz
    lam.psi_pz *= c.bzh
    l_dpdz *= c.inv_h
    lp[1:, :] += l_dpdz[:-1, :]
    lp[:-1, :] -= l_dpdz[:-1, :]


def adjoint_bulk_gradient(K, rho, grid: WaveGridSpec, profile: CPMLProfile, src, samples,
                          geometry, g_record, extras):
    """``dJ/dK`` for one shot given ``g_record = dJ/d(record)``.

    ``extras`` comes from :func:`propagate`; stored divergences are used
    directly, otherwise each checkpoint segment is recomputed.
    """
    K = np.asarray(K, dtype=np.float64)
    c = _Coeffs(grid, profile, rho)
    rz, rx = geometry.receiver_index
    src = tuple(src)
    g_record = np.asarray(g_record, dtype=np.float64)
    lam = _State(grid.shape)
    gK = np.zeros(grid.shape)

    def reverse(n, div):
        np.add.at(lam.p, (rz, rx), g_record[:, n])
        _adjoint_step(lam, K, c, src, samples[n], div, gK)

    if extras.get("divergence") is not None:
        divs = extras["divergence"]
        for n in range(grid.nt - 1, -1, -1):
            reverse(n, divs[n])
    else:
        stride = extras["stride"]
        checkpoints = extras["checkpoints"]
        if not stride or not checkpoints:
            raise RuntimeError("no stored divergence or checkpoints available for the adjoint")
        for start in sorted(checkpoints, reverse=True):
            s = checkpoints[start].copy()
            stop = min(start + stride, grid.nt)
            divs = [_step(s, K, c, src, samples[n]) for n in range(start, stop)]
            for n in range(stop - 1, start - 1, -1):
                reverse(n, divs[n - start])
            if not np.all(np.isfinite(lam.p)):
                raise WaveInstabilityError(f"non-finite adjoint field near step {start}")
    return gK


# ---------------------------------------------------------------------------
# multi-shot setup and public API


@dataclass
class WaveSetup:
    """Everything besides the medium needed to run a survey."""

    grid: WaveGridSpec
    geometry: SurveyGeometry
    wavelet: SourceWavelet
    profile: CPMLProfile
    rho: float = 1.0
    storage: str = "auto"
    checkpoint_stride: Optional[int] = None
    threads: int = 1
    solves: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @classmethod
    def build(cls, grid, geometry, f0, t0=None, rho=1.0, c_ref=3500.0,
              reflection_coeff=1e-3, kappa_max=2.0, **kw):
        geometry.validate(grid)
        t0 = 1.5 / f0 if t0 is None else t0
        wavelet = ricker(f0, t0, grid.dt, grid.nt)
        profile = build_cpml_profile(grid, f0, reflection_coeff, c_ref, kappa_max)
        return cls(grid, geometry, wavelet, profile, rho, **kw)

    def _storage_plan(self):
        g = self.grid
        if self.storage == "full" or (
                self.storage == "auto" and g.nt * g.nz * g.nx * 8 <= 32 * 2**20):
            return 0, True
        stride = self.checkpoint_stride or max(1, math.ceil(math.sqrt(g.nt)))
        return stride, False

    def _count(self, n=1):
        with self._lock:
            self.solves += n

    def _map(self, fn, items):
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    def check_bulk(self, K):
        if np.any(~np.isfinite(K)) or np.any(K <= 0):
            raise ValueError("bulk modulus must be finite and positive")
        self.grid.check_cfl(float(np.sqrt(K.max() / self.rho)))

    def forward_all(self, K, keep=True):
        """Records of every shot, shape ``(n_sources, n_receivers, nt)``."""
        self.check_bulk(K)
        stride, keep_div = self._storage_plan() if keep else (0, False)

        def one(i):
            self._count()
            return propagate(K, self.rho, self.grid, self.profile, self.geometry.sources[i],
                             self.wavelet.samples, self.geometry, stride, keep_div)

        results = self._map(one, list(range(len(self.geometry.sources))))
        records = np.stack([r for r, _ in results])
        return records, [e for _, e in results]

    def adjoint_all(self, K, g_records, extras):
        def one(i):
            return adjoint_bulk_gradient(K, self.rho, self.grid, self.profile,
                                         self.geometry.sources[i], self.wavelet.samples,
                                         self.geometry, g_records[i], extras[i])

        grads = self._map(one, list(range(len(self.geometry.sources))))
        total = np.zeros(self.grid.shape)
        for gk in grads:
            total += gk
        return total


def wave_forward(medium: MediumModel, geometry: SurveyGeometry, wavelet: SourceWavelet,
                 grid: WaveGridSpec, source_index: int, profile: Optional[CPMLProfile] = None,
                 snapshot_every: int = 0):
    """Shot record ``(n_receivers, nt)`` for one source, plus optional ``p`` snapshots."""
    geometry.validate(grid)
    K = medium.bulk
    grid.check_cfl(float(medium.velocity.max()))
    if profile is None:
        profile = build_cpml_profile(grid, wavelet.f0, c_max=medium.m_base)
    record, extras = propagate(K, medium.rho, grid, profile, geometry.sources[source_index],
                               wavelet.samples, geometry, snapshot_every=snapshot_every)
    return record, extras["snapshots"]


def wave_misfit(record, observed) -> float:
    """``0.5 * ||record - observed||^2`` over receivers and time."""
    record = np.asarray(record, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if record.shape != observed.shape:
        raise ValueError(f"record shape {record.shape} != observed shape {observed.shape}")
    r = record - observed
    return 0.5 * float(np.vdot(r, r))


def wave_misfit_and_gradient(medium: MediumModel, setup: WaveSetup, observed, mask: bool = True):
    """Misfit summed over shots and its gradient with respect to ``medium.m``.

    ``observed`` has shape ``(n_sources, n_receivers, nt)``. With ``mask`` the
    PML entries of the gradient are set to zero.
    """
    observed = np.asarray(observed, dtype=np.float64)
    K = medium.bulk
    records, extras = setup.forward_all(K)
    if records.shape != observed.shape:
        raise ValueError(f"observed shape {observed.shape} != {records.shape}")
    resid = records - observed
    gK = setup.adjoint_all(K, resid, extras)
    grad = gK * 2.0 * medium.velocity * medium.rho
    if mask:
        grad[~pml_mask(setup.grid)] = 0.0
    return 0.5 * float(np.vdot(resid, resid)), grad


def wave_gradient(medium: MediumModel, setup: WaveSetup, observed, mask: bool = True):
    return wave_misfit_and_gradient(medium, setup, observed, mask)[1]


# ---------------------------------------------------------------------------
# tape ops


def _shots_fwd(inputs, setup: WaveSetup):
    K = inputs[0]
    records, extras = setup.forward_all(K)
    return records, (K, extras, setup)


def _shots_bwd(g, ctx):
    K, extras, setup = ctx
    return [setup.adjoint_all(K, g, extras)]


def _misfit_fwd(inputs):
    d, dhat = inputs
    if d.shape != dhat.shape:
        raise ValueError(f"record shape {d.shape} != observed shape {dhat.shape}")
    r = d - dhat
    return np.array(0.5 * np.vdot(r, r)), r


def _misfit_bwd(g, r):
    g = float(g)
    return [g * r, -g * r]


def _sample_setup():
    grid = WaveGridSpec(30, 30, 20.0, 0.002, 120, 6)
    geom = SurveyGeometry(((10, 15),), ((12, 10), (12, 20)))
    return WaveSetup.build(grid, geom, f0=15.0)


def _shots_sample(rng):
    setup = _sample_setup()
    v = 3000.0 + 100.0 * rng.random(setup.grid.shape)
    return [v**2], {"setup": setup}


WAVE_SHOTS = tape.register_custom_op("wave_shots", _shots_fwd, _shots_bwd, _shots_sample)
MISFIT = tape.register_custom_op(
    "misfit", _misfit_fwd, _misfit_bwd,
    lambda rng: ([rng.standard_normal((2, 5)), rng.standard_normal((2, 5))], {}))
