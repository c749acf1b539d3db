from __future__ import annotations

import numpy as np
import pytest

from adjointlab.coupling import MultiScaleSchedule, RockPhysicsMap
from adjointlab.dynamics import GridSpec2D
from adjointlab.inverse import InverseProblem, block_field
from adjointlab.wave import SurveyGeometry, WaveGridSpec, WaveSetup

# acceptance lines collected by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def mini_wave_setup(nt: int = 250, storage: str = "auto", threads: int = 1) -> WaveSetup:
    grid = WaveGridSpec(40, 40, 24.0, 0.002, nt, 8)
    geom = SurveyGeometry(((10, 15), (10, 25)), tuple((10, x) for x in range(11, 30, 3)))
    return WaveSetup.build(grid, geom, f0=10.0, storage=storage, threads=threads)


def mini_problem(family="advection_diffusion", true_params=(10.0, 0.1, -0.2), n=8,
                 n_obs=2, substeps=3, nt=250, **kw) -> InverseProblem:
    hg = GridSpec2D(n, 3.0, 0.01)
    sched = MultiScaleSchedule(n_obs, substeps, 0.01)
    return InverseProblem(family, np.array(true_params, dtype=float), hg, sched,
                          mini_wave_setup(nt), block_field(hg), RockPhysicsMap(), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
