"""Command-line front end: ``adjointlab {forward,invert,gradcheck,stability,bench}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from . import tape
from .dynamics import SolverError, caputo_row_sums, interior_to_field
from .inverse import (
    draw_noise,
    generate_synthetic,
    history_csv,
    invert,
    noise_generator,
    recovery_report,
    report_csv,
)
from .verify import (
    TAYLOR_HEADER,
    PowerIterationError,
    loglog_slope,
    op_taylor_test,
    stability_report,
    taylor_remainder_test,
    taylor_rows,
)
from .wave import (
    CFLError,
    SurveyGeometry,
    WaveGridSpec,
    WaveInstabilityError,
    WaveSetup,
    adjoint_bulk_gradient,
    propagate,
)

log = logging.getLogger("adjointlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_OPTIMIZER = 4
EXIT_GRADIENT = 5

GRADIENT_GATE = 1.5
THREADS_ENV = "ADJOINTLAB_THREADS"


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_forward(cfg: cfgmod.RunConfig, out: str, threads: int) -> int:
    """Snapshots ``snapshot_<i>`` and shot records ``records_<i>`` for every phase."""
    problem = cfg.problem(threads)
    obj = problem.objective(with_noise=True)
    noise = draw_noise(noise_generator(cfg.seed), cfg.noise_sigma,
                       (cfg.schedule.n_obs, problem.hidden_grid.size))
    snaps, records = obj.simulate(problem.true_params, noise=noise)
    grid = problem.hidden_grid
    for i in range(cfg.schedule.n_obs):
        field = interior_to_field(snaps[i] + noise[i], grid)
        cfgmod.RawFieldFile.write(os.path.join(out, f"snapshot_{i}"), field,
                                  f"hidden field at phase {i}, boundary included")
        cfgmod.RawFieldFile.write(os.path.join(out, f"records_{i}"), records[i],
                                  f"pressure records at phase {i}: source, receiver, time")
    log.info("forward: %d phases written to %s", cfg.schedule.n_obs, out)
    return EXIT_OK


def cmd_invert(cfg: cfgmod.RunConfig, out: str, threads: int) -> int:
    problem = cfg.problem(threads)
    observed = generate_synthetic(problem)

    def progress(i, x, f, g):
        log.info("iter %d loss %.6e", i, f)

    result = invert(problem, observed, cfg.optimizer, callback=progress)
    _write_text(os.path.join(out, "loss_history.csv"), history_csv(result))
    rows = recovery_report(result, problem.true_params, cfg.model_family)
    _write_text(os.path.join(out, "recovery_report.csv"), report_csv(rows))
    log.info("invert: %s after %d iterations", result.reason, result.n_iter)
    if not result.success:
        print(f"optimizer failed: {result.reason}; best-so-far written", file=sys.stderr)
        return EXIT_OPTIMIZER
    return EXIT_OK


def _end_to_end_report(cfg: cfgmod.RunConfig, threads: int):
    problem = cfg.problem(threads)
    observed = generate_synthetic(problem)
    obj = problem.objective(observed)
    c = problem.init_params
    rng = np.random.default_rng(cfg.seed)
    scale = np.where(c != 0, np.abs(c), 1.0)
    d = cfg.gradcheck.relative_step * scale * rng.choice([-1.0, 1.0], size=c.size)
    _, g = obj.value_and_grad(c)
    return taylor_remainder_test(obj.value, g, c, d, cfg.gradcheck.gammas)


def cmd_gradcheck(cfg: cfgmod.RunConfig, out: str, threads: int) -> int:
    rows, worst = [], np.inf
    gammas = cfg.gradcheck.gammas
    reports = [(name, op_taylor_test(name, cfg.seed, gammas))
               for name in tape.REGISTRY.names() if tape.get_op(name).sample is not None]
    reports.append(("end_to_end", _end_to_end_report(cfg, threads)))
    for name, rep in reports:
        rows.append(taylor_rows(name, rep))
        if not np.isnan(rep.second_order_slope):
            worst = min(worst, rep.second_order_slope)
    _write_text(os.path.join(out, "gradcheck.csv"), _csv_text(TAYLOR_HEADER, rows))
    log.info("gradcheck: worst second-order slope %.3f", worst)
    if worst < GRADIENT_GATE:
        print(f"gradient regression: second-order slope {worst:.3f} < {GRADIENT_GATE}",
              file=sys.stderr)
        return EXIT_GRADIENT
    return EXIT_OK


def cmd_stability(cfg: cfgmod.RunConfig, out: str, threads: int) -> int:
    st = cfg.stability
    params = st.params if st.params is not None else cfg.true_params
    grid = cfgmod.GridSpec2D(st.n, st.h, st.dt_list[0])
    rep = stability_report(cfg.model_family, params, grid, st.dt_list, i_max=st.row_sum_terms,
                           lattice=cfg.lattice, max_variation=st.max_variation)
    _write_text(os.path.join(out, "stability.csv"), rep.to_csv())
    rows = []
    for alpha in (0.2, 0.4, 0.6, 0.8):
        direct = caputo_row_sums(alpha, st.row_sum_terms)
        for i, v in enumerate(direct, start=1):
            closed = 1 + (i - 1) ** (1 - alpha) - (i + 1) ** (1 - alpha)
            rows.append([alpha, i, repr(float(v)), repr(float(closed)), int(v < 1)])
    _write_text(os.path.join(out, "caputo_row_sums.csv"),
                _csv_text(["alpha", "i", "row_sum", "closed_form", "below_one"], rows))
    log.info("stability: all_pass=%s", rep.all_pass)
    return EXIT_OK


def bench_setup(n: int, nt: int, npml: int, h: float = 24.0, dt: float = 0.002,
                f0: float = 10.0) -> WaveSetup:
    grid = WaveGridSpec(n, n, h, dt, nt, npml)
    row = npml + 2
    xs = np.linspace(npml + 2, n - npml - 3, 8).round().astype(int)
    geom = SurveyGeometry(((row, n // 2),), tuple((row, int(x)) for x in xs))
    return WaveSetup.build(grid, geom, f0, storage="full")


def bench_rows(sizes, nt: int, npml: int, repeats: int):
    """``(dof, n, nt, forward_s, backward_s, ratio)`` per size; best of ``repeats`` runs."""
    rows = []
    for n in sizes:
        setup = bench_setup(n, nt, npml)
        K = np.full(setup.grid.shape, 3500.0**2)
        src = setup.geometry.sources[0]
        t_fwd, t_bwd = np.inf, np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            rec, extras = propagate(K, 1.0, setup.grid, setup.profile, src,
                                    setup.wavelet.samples, setup.geometry, 0, True)
            t1 = time.perf_counter()
            adjoint_bulk_gradient(K, 1.0, setup.grid, setup.profile, src,
                                  setup.wavelet.samples, setup.geometry, rec, extras)
            t2 = time.perf_counter()
            t_fwd, t_bwd = min(t_fwd, t1 - t0), min(t_bwd, t2 - t1)
        rows.append((n * n, n, nt, t_fwd, t_bwd, t_bwd / t_fwd))
    return rows


def bench_slopes(rows):
    """Log-log slopes of forward/backward time against ``dof * log(dof)``."""
    dof = np.array([r[0] for r in rows], dtype=float)
    x = dof * np.log(dof)
    return (loglog_slope(x, [r[3] for r in rows]), loglog_slope(x, [r[4] for r in rows]))


def cmd_bench(cfg: cfgmod.RunConfig, out: str, threads: int) -> int:
    b = cfg.bench
    rows = bench_rows(b.sizes, b.nt, b.npml, b.repeats)
    text = _csv_text(["dof", "n", "nt", "forward_s", "backward_s", "backward_forward_ratio"],
                     [[d, n, nt, f"{f:.6f}", f"{bw:.6f}", f"{r:.4f}"]
                      for d, n, nt, f, bw, r in rows])
    _write_text(os.path.join(out, "bench.csv"), text)
    sf, sb = bench_slopes(rows)
    log.info("bench: slope vs dof*log(dof): forward %.3f backward %.3f", sf, sb)
    return EXIT_OK


COMMANDS = {
    "forward": cmd_forward,
    "invert": cmd_invert,
    "gradcheck": cmd_gradcheck,
    "stability": cmd_stability,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adjointlab", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None,
                   help="JSON run configuration (default: the bundled desk-scale config)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None, help="noise seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for shot-level work (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise cfgmod.ConfigError(f"{THREADS_ENV}: not an integer: {env!r}") from None
    return os.cpu_count() or 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = cfgmod.load(args.config or cfgmod.desk_config_path())
        if args.seed is not None:
            if args.seed < 0:
                raise cfgmod.ConfigError("--seed: must be nonnegative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, output_dir=args.out)
        threads = resolve_threads(args.threads)
        os.makedirs(cfg.output_dir, exist_ok=True)
    except (cfgmod.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, cfg.output_dir, threads)
    except (cfgmod.ConfigError, CFLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, WaveInstabilityError, PowerIterationError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
