"""Glue between the slow hidden dynamics and the fast wave survey.

The objective graph for ``n_obs`` survey phases is::

    theta --(scan of dynamics steps)--> m_{t_i} (coarse, interior)
          -> embed with zero boundary -> bilinear upscale to the PML-free
          wave interior -> zero pad through the PML -> K = (m + m_base)^2 rho
          -> all shots -> 0.5 ||d - d_obs||^2, summed over phases

with ``m_{t_1} = m0`` and every later phase one window of
``substeps_per_window`` dynamics steps after the previous one.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tape
from .dynamics import EMBED, GridSpec2D, hidden_snapshot_nodes
from .tape import TapeGraph, record
from .wave import MISFIT, WAVE_SHOTS, WaveSetup


@dataclass(frozen=True)
class MultiScaleSchedule:
    n_obs: int
    substeps_per_window: int
    dtau: float

    def __post_init__(self):
        if self.n_obs < 1 or self.substeps_per_window < 1 or self.dtau <= 0:
            raise ValueError("invalid schedule")

    @property
    def obs_times(self) -> np.ndarray:
        return np.arange(self.n_obs) * self.substeps_per_window * self.dtau

    @property
    def n_steps(self) -> int:
        return (self.n_obs - 1) * self.substeps_per_window


@dataclass(frozen=True)
class RockPhysicsMap:
    m_base: float = 3500.0
    rho: float = 1.0

    def __post_init__(self):
        if self.m_base <= 0 or self.rho <= 0:
            raise ValueError("m_base and rho must be positive")


@functools.lru_cache(maxsize=64)
def interpolation_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Corner-aligned 1D linear interpolation from ``n_src`` to ``n_dst`` points."""
    if n_dst < n_src:
        raise ValueError(f"cannot downscale from {n_src} to {n_dst} points")
    W = np.zeros((n_dst, n_src))
    if n_src == 1:
        W[:, 0] = 1.0
        return W
    pos = np.arange(n_dst) * (n_src - 1) / max(n_dst - 1, 1)
    left = np.minimum(np.floor(pos).astype(int), n_src - 2)
    frac = pos - left
    W[np.arange(n_dst), left] = 1.0 - frac
    W[np.arange(n_dst), left + 1] += frac
    W.setflags(write=False)
    return W


def upscale_bilinear(coarse, target_shape) -> np.ndarray:
    coarse = np.asarray(coarse, dtype=np.float64)
    Wz = interpolation_matrix(coarse.shape[0], int(target_shape[0]))
    Wx = interpolation_matrix(coarse.shape[1], int(target_shape[1]))
    return Wz @ coarse @ Wx.T


def upscale_bilinear_adjoint(fine, coarse_shape) -> np.ndarray:
    fine = np.asarray(fine, dtype=np.float64)
    Wz = interpolation_matrix(int(coarse_shape[0]), fine.shape[0])
    Wx = interpolation_matrix(int(coarse_shape[1]), fine.shape[1])
    return Wz.T @ fine @ Wx


def velocity_to_bulk(m, rock: RockPhysicsMap) -> np.ndarray:
    v = np.asarray(m, dtype=np.float64) + rock.m_base
    if np.any(v <= 0):
        raise ValueError("nonpositive velocity: m + m_base must be > 0")
    return v * v * rock.rho


def _upscale_fwd(inputs, shape):
    c = inputs[0]
    return upscale_bilinear(c, shape), c.shape


def _upscale_bwd(g, coarse_shape):
    return [upscale_bilinear_adjoint(g, coarse_shape)]


def _bulk_fwd(inputs, rock):
    m = inputs[0]
    return velocity_to_bulk(m, rock), (m, rock)


def _bulk_bwd(g, ctx):
    m, rock = ctx
    return [g * 2.0 * (m + rock.m_base) * rock.rho]


def _pad_fwd(inputs, width):
    return np.pad(inputs[0], width), (width, inputs[0].shape)


def _pad_bwd(g, ctx):
    w, shape = ctx
    return [g[w:w + shape[0], w:w + shape[1]].copy()]


UPSCALE = tape.register_custom_op(
    "upscale_bilinear", _upscale_fwd, _upscale_bwd,
    lambda rng: ([rng.standard_normal((4, 5))], {"shape": (9, 11)}))
BULK = tape.register_custom_op(
    "velocity_to_bulk", _bulk_fwd, _bulk_bwd,
    lambda rng: ([100.0 * rng.standard_normal((3, 3))], {"rock": RockPhysicsMap()}))
PAD = tape.register_custom_op(
    "pad_pml", _pad_fwd, _pad_bwd,
    lambda rng: ([rng.standard_normal((3, 4))], {"width": 2}))


def survey_nodes(graph: TapeGraph, snapshot_id: int, hidden_grid: GridSpec2D,
                 setup: WaveSetup, rock: RockPhysicsMap, noise_id: Optional[int] = None):
    """Coarse interior snapshot -> shot records of every source."""
    field = snapshot_id
    if noise_id is not None:
        field = record(graph, "add", [field, noise_id])
    full = record(graph, EMBED, [field], grid=hidden_grid)
    fine = record(graph, UPSCALE, [full], shape=setup.grid.interior_shape)
    padded = record(graph, PAD, [fine], width=setup.grid.npml)
    K = record(graph, BULK, [padded], rock=rock)
    return record(graph, WAVE_SHOTS, [K], setup=setup)


def assemble_objective(graph: TapeGraph, theta_id: int, m0_id: int, family: str,
                       hidden_grid: GridSpec2D, schedule: MultiScaleSchedule,
                       setup: WaveSetup, rock: RockPhysicsMap, observed_ids: Sequence[int],
                       noise_ids: Optional[Sequence[int]] = None,
                       checkpoint_stride: Optional[int] = None, lattice: str = "dst"):
    """Record the full objective; returns ``(loss_id, snapshot_ids, record_ids)``."""
    if len(observed_ids) != schedule.n_obs:
        raise ValueError(f"expected {schedule.n_obs} observed record sets, got {len(observed_ids)}")
    if abs(hidden_grid.dtau - schedule.dtau) > 1e-15 * schedule.dtau:
        raise ValueError("schedule dtau does not match the hidden grid")
    snaps = [m0_id] + hidden_snapshot_nodes(
        graph, m0_id, theta_id, family, hidden_grid, schedule.n_obs - 1,
        schedule.substeps_per_window, checkpoint_stride, lattice)
    records, misfits = [], []
    for i, snap in enumerate(snaps):
        noise = None if noise_ids is None else noise_ids[i]
        rec = survey_nodes(graph, snap, hidden_grid, setup, rock, noise)
        records.append(rec)
        misfits.append(record(graph, MISFIT, [rec, observed_ids[i]]))
    loss = misfits[0] if len(misfits) == 1 else record(graph, "add", misfits)
    return loss, snaps, records


class CoupledObjective:
    """Differentiable map ``theta -> J(theta)`` for one model family and survey.

    The graph is built once; every call re-feeds the placeholders. With
    ``m0_unknown`` the gradient with respect to ``m0`` is returned as well.
    """

    def __init__(self, family: str, hidden_grid: GridSpec2D, schedule: MultiScaleSchedule,
                 setup: WaveSetup, rock: RockPhysicsMap, m0, observed=None,
                 m0_unknown: bool = False, checkpoint_stride: Optional[int] = None,
                 lattice: str = "dst", with_noise: bool = False):
        from .dynamics import MODEL_FAMILIES

        self.family = family
        self.n_params = len(MODEL_FAMILIES[family])
        self.hidden_grid = hidden_grid
        self.schedule = schedule
        self.setup = setup
        self.rock = rock
        self.m0 = np.asarray(m0, dtype=np.float64).ravel()
        if self.m0.shape != (hidden_grid.size,):
            raise ValueError(f"m0 must have {hidden_grid.size} interior values")
        self.m0_unknown = m0_unknown
        n_src = len(setup.geometry.sources)
        self.record_shape = (n_src, len(setup.geometry.receivers), setup.grid.nt)
        self.observed = (np.zeros((schedule.n_obs, *self.record_shape)) if observed is None
                         else np.asarray(observed, dtype=np.float64))
        if self.observed.shape != (schedule.n_obs, *self.record_shape):
            raise ValueError(f"observed data shape {self.observed.shape} does not match "
                             f"{(schedule.n_obs, *self.record_shape)}")

        g = self.graph = TapeGraph()
        self.theta_id = g.placeholder("theta", (self.n_params,))
        self.m0_id = g.placeholder("m0", (hidden_grid.size,))
        self.obs_ids = [g.placeholder(f"observed{i}", self.record_shape)
                        for i in range(schedule.n_obs)]
        self.noise_ids = ([g.placeholder(f"noise{i}", (hidden_grid.size,))
                           for i in range(schedule.n_obs)] if with_noise else None)
        self.loss_id, self.snapshot_ids, self.record_ids = assemble_objective(
            g, self.theta_id, self.m0_id, family, hidden_grid, schedule, setup, rock,
            self.obs_ids, self.noise_ids, checkpoint_stride, lattice)
        self.n_evals = 0

    def _feeds(self, theta, m0=None, noise=None):
        feeds = {self.theta_id: np.asarray(theta, dtype=np.float64),
                 self.m0_id: self.m0 if m0 is None else np.asarray(m0, dtype=np.float64)}
        for i, nid in enumerate(self.obs_ids):
            feeds[nid] = self.observed[i]
        if self.noise_ids is not None:
            for i, nid in enumerate(self.noise_ids):
                feeds[nid] = np.zeros(self.hidden_grid.size) if noise is None else noise[i]
        return feeds

    def evaluate(self, theta, m0=None, noise=None):
        vals = tape.forward_eval(self.graph, self._feeds(theta, m0, noise))
        self.n_evals += 1
        return vals

    def value(self, theta, m0=None) -> float:
        return float(self.evaluate(theta, m0)[self.loss_id])

    def value_and_grad(self, theta, m0=None):
        """``(J, dJ/dtheta)``, or ``(J, dJ/dtheta, dJ/dm0)`` when ``m0`` is unknown."""
        vals = self.evaluate(theta, m0)
        wrt = [self.theta_id, self.m0_id] if self.m0_unknown else [self.theta_id]
        grads = tape.backward(self.graph, self.loss_id, wrt=wrt)
        loss = float(vals[self.loss_id])
        g_theta = grads.get(self.theta_id, np.zeros(self.n_params))
        if self.m0_unknown:
            return loss, g_theta, grads.get(self.m0_id, np.zeros_like(self.m0))
        return loss, g_theta

    def simulate(self, theta, noise=None, m0=None):
        """Coarse snapshots ``(n_obs, M)`` and records ``(n_obs, n_src, n_rec, nt)``."""
        vals = self.evaluate(theta, m0, noise)
        snaps = np.stack([vals[i] for i in self.snapshot_ids])
        recs = np.stack([vals[i] for i in self.record_ids])
        return snaps, recs
