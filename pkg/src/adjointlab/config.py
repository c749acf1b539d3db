"""Run configuration (JSON) and the raw binary field format."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .coupling import MultiScaleSchedule, RockPhysicsMap
from .dynamics import LATTICES, MODEL_FAMILIES, GridSpec2D, make_params
from .inverse import InverseProblem, OptimizerConfig, block_field, default_bounds
from .wave import CFLError, SurveyGeometry, WaveGridSpec, WaveSetup


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass(frozen=True)
class HiddenGridConfig:
    n: int = 20
    h: float = 3.0
    dtau: float = 0.01


@dataclass(frozen=True)
class WaveGridConfig:
    nz: int = 100
    nx: int = 100
    h: float = 24.0
    dt: float = 0.002
    nt: int = 1000
    npml: int = 16


@dataclass(frozen=True)
class ScheduleConfig:
    n_obs: int = 3
    substeps_per_window: int = 5


@dataclass(frozen=True)
class SurveyConfig:
    sources: Tuple[Tuple[int, int], ...] = ((18, 35), (18, 65))
    receivers: Tuple[Tuple[int, int], ...] = tuple(
        (18, x) for x in (20, 27, 33, 40, 47, 53, 60, 67, 73, 80))


@dataclass(frozen=True)
class RockConfig:
    m_base: float = 3500.0
    rho: float = 1.0


@dataclass(frozen=True)
class WaveletConfig:
    f0: float = 10.0
    t0: Optional[float] = None
    reflection_coeff: float = 1e-3
    kappa_max: float = 2.0


@dataclass(frozen=True)
class InitialFieldConfig:
    values: Tuple[float, ...] = (100.0, 150.0, 200.0, 250.0, 300.0)
    margin: float = 0.15


@dataclass(frozen=True)
class StabilityConfig:
    n: int = 16
    h: float = 0.0625
    dt_list: Tuple[float, ...] = (1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4)
    params: Optional[Tuple[float, ...]] = None
    row_sum_terms: int = 50
    max_variation: float = 2.0


@dataclass(frozen=True)
class BenchConfig:
    sizes: Tuple[int, ...] = (48, 64, 96, 128)
    nt: int = 300
    npml: int = 10
    repeats: int = 3


@dataclass(frozen=True)
class GradcheckConfig:
    gammas: Tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4)
    relative_step: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    model_family: str = "advection_diffusion"
    hidden_grid: HiddenGridConfig = HiddenGridConfig()
    wave_grid: WaveGridConfig = WaveGridConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    survey: SurveyConfig = SurveyConfig()
    rock: RockConfig = RockConfig()
    wavelet: WaveletConfig = WaveletConfig()
    initial_field: InitialFieldConfig = InitialFieldConfig()
    true_params: Tuple[float, ...] = (10.0, 0.1, -0.2)
    init_params: Optional[Tuple[float, ...]] = None
    noise_sigma: float = 0.0
    seed: int = 0
    lattice: str = "dst"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stability: StabilityConfig = StabilityConfig()
    bench: BenchConfig = BenchConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()
    output_dir: str = "out"

    # -- derived objects -------------------------------------------------
    def hidden_grid_spec(self) -> GridSpec2D:
        g = self.hidden_grid
        return GridSpec2D(g.n, g.h, g.dtau)

    def wave_grid_spec(self) -> WaveGridSpec:
        g = self.wave_grid
        return WaveGridSpec(g.nz, g.nx, g.h, g.dt, g.nt, g.npml)

    def schedule_spec(self) -> MultiScaleSchedule:
        return MultiScaleSchedule(self.schedule.n_obs, self.schedule.substeps_per_window,
                                  self.hidden_grid.dtau)

    def rock_map(self) -> RockPhysicsMap:
        return RockPhysicsMap(self.rock.m_base, self.rock.rho)

    def wave_setup(self, threads: int = 1) -> WaveSetup:
        w = self.wavelet
        geom = SurveyGeometry(self.survey.sources, self.survey.receivers)
        return WaveSetup.build(self.wave_grid_spec(), geom, w.f0, w.t0, self.rock.rho,
                               c_ref=self.rock.m_base, reflection_coeff=w.reflection_coeff,
                               kappa_max=w.kappa_max, threads=threads)

    def initial_field_values(self) -> np.ndarray:
        return block_field(self.hidden_grid_spec(), self.initial_field.values,
                           self.initial_field.margin)

    def problem(self, threads: int = 1) -> InverseProblem:
        init = None if self.init_params is None else np.array(self.init_params)
        return InverseProblem(self.model_family, np.array(self.true_params),
                              self.hidden_grid_spec(), self.schedule_spec(),
                              self.wave_setup(threads), self.initial_field_values(),
                              self.rock_map(), init, None, self.noise_sigma, self.seed,
                              self.lattice)


# ---------------------------------------------------------------------------
# parsing

def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        sub = f"{path}.{key}" if path else key
        default = (f.default_factory() if f.default_factory is not dataclasses.MISSING
                   else f.default)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, sub)
        else:
            kwargs[key] = _tuplify(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _check(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def validate(cfg: RunConfig) -> None:
    """Consistency checks; raises ``ConfigError`` naming the field."""
    _check(cfg.model_family in MODEL_FAMILIES, "model_family",
           f"must be one of {sorted(MODEL_FAMILIES)}")
    _check(cfg.lattice in LATTICES, "lattice", f"must be one of {list(LATTICES)}")
    names = MODEL_FAMILIES[cfg.model_family]
    _check(len(cfg.true_params) == len(names), "true_params",
           f"expected {len(names)} values {names}")
    try:
        make_params(cfg.model_family, cfg.true_params)
    except ValueError as exc:
        raise ConfigError(f"true_params: {exc}") from None
    if cfg.init_params is not None:
        _check(len(cfg.init_params) == len(names), "init_params",
               f"expected {len(names)} values {names}")
        for v, (lo, hi), nm in zip(cfg.init_params, default_bounds(cfg.model_family), names):
            _check((lo is None or v >= lo) and (hi is None or v <= hi), "init_params",
                   f"{nm}={v} outside bounds [{lo}, {hi}]")
    _check(cfg.noise_sigma >= 0, "noise_sigma", "must be >= 0")
    _check(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be a nonnegative integer")
    try:
        hg = cfg.hidden_grid_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"hidden_grid: {exc}") from None
    try:
        wg = cfg.wave_grid_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"wave_grid: {exc}") from None
    try:
        cfg.schedule_spec()
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    _check(cfg.rock.m_base > 0 and cfg.rock.rho > 0, "rock", "m_base and rho must be positive")
    _check(cfg.wavelet.f0 > 0, "wavelet.f0", "must be positive")
    ishape = wg.interior_shape
    _check(min(ishape) >= hg.n + 1, "wave_grid",
           f"PML-free interior {ishape} smaller than the hidden field ({hg.n + 1} points)")
    _check(len(cfg.survey.sources) >= 1, "survey.sources", "need at least one source")
    _check(len(cfg.survey.receivers) >= 1, "survey.receivers", "need at least one receiver")
    try:
        SurveyGeometry(cfg.survey.sources, cfg.survey.receivers).validate(wg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"survey: {exc}") from None
    # the largest velocity the forward run will see
    m0 = cfg.initial_field_values()
    c_max = cfg.rock.m_base + max(float(np.max(m0)), 0.0) + 5 * cfg.noise_sigma
    try:
        wg.check_cfl(c_max)
    except CFLError as exc:
        raise ConfigError(f"wave_grid.dt: {exc}") from None
    _check(cfg.rock.m_base + float(np.min(m0)) > 0, "initial_field", "velocity must stay positive")
    opt = cfg.optimizer
    _check(opt.memory >= 1 and opt.max_iter >= 0, "optimizer", "memory >= 1 and max_iter >= 0")
    _check(0 < opt.c1 < opt.c2 < 1, "optimizer", "need 0 < c1 < c2 < 1")
    st = cfg.stability
    _check(len(st.dt_list) >= 2 and all(d > 0 for d in st.dt_list)
           and all(a > b for a, b in zip(st.dt_list, st.dt_list[1:])),
           "stability.dt_list", "need at least two positive, strictly decreasing values")
    if st.params is not None:
        _check(len(st.params) == len(names), "stability.params", f"expected {len(names)} values")
    _check(st.n >= 3 and st.h > 0, "stability", "n >= 3 and h > 0")
    b = cfg.bench
    _check(len(b.sizes) >= 2 and all(s > 2 * b.npml + 4 for s in b.sizes), "bench.sizes",
           "need at least two sizes, each larger than the PML")
    _check(b.nt >= 1 and b.repeats >= 1, "bench", "nt and repeats must be >= 1")
    gc = cfg.gradcheck
    _check(len(gc.gammas) >= 2 and all(a > b for a, b in zip(gc.gammas, gc.gammas[1:]))
           and all(g > 0 for g in gc.gammas), "gradcheck.gammas",
           "need positive, strictly decreasing values")


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x

    return plain(dataclasses.asdict(cfg))


def parse(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(data)


def serialize(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=False) + "\n"


def load(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def desk_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), "configs", "desk.json")


# ---------------------------------------------------------------------------
# raw fields


@dataclass(frozen=True)
class RawFieldFile:
    """Binary payload ``<stem>.bin`` (little-endian f8, row-major) plus text header ``<stem>.hdr``."""

    dims: Tuple[int, ...]
    dtype: str = "<f8"
    order: str = "C"

    @staticmethod
    def write(stem, array, description: str = "") -> "RawFieldFile":
        a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        meta = RawFieldFile(tuple(int(d) for d in a.shape))
        with open(f"{stem}.bin", "wb") as fh:
            fh.write(a.tobytes(order="C"))
        lines = [f"dims = {' '.join(str(d) for d in meta.dims)}", f"dtype = {meta.dtype}",
                 f"order = {meta.order}"]
        if description:
            lines.append(f"description = {description}")
        with open(f"{stem}.hdr", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        return meta

    @staticmethod
    def read_header(stem) -> "RawFieldFile":
        meta = {}
        with open(f"{stem}.hdr", "r", encoding="utf-8") as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.split("=", 1)
                    meta[k.strip()] = v.strip()
        if meta.get("dtype") != "<f8" or meta.get("order") != "C":
            raise ValueError(f"{stem}.hdr: unsupported dtype/order")
        return RawFieldFile(tuple(int(d) for d in meta["dims"].split()))

    @staticmethod
    def read(stem) -> np.ndarray:
        meta = RawFieldFile.read_header(stem)
        with open(f"{stem}.bin", "rb") as fh:
            raw = fh.read()
        expected = math.prod(meta.dims) * 8
        if len(raw) != expected:
            raise ValueError(f"{stem}.bin: payload is {len(raw)} bytes, expected {expected}")
        return np.frombuffer(raw, dtype="<f8").reshape(meta.dims).copy()
