"""Command-line entry point: ``cdsmooth <subcommand> [options]``.

``--config`` takes a YAML file or one of the preset names
(``double_well``, ``reentry``, ``ou``). Command-line flags override the
corresponding configuration entries.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import experiments as ex
from .cd_filter import run_filter
from .cd_smoother import export_variational, smooth_type2
from .errors import (ConfigurationError, DivergenceError, EvaluationError, NotPositiveDefinite,
                     ResourceError, UpdateError)
from .metrics import evaluate
from .vgs_core import VgsConfig, naive_init, run_vgs

log = logging.getLogger("cdsmooth")

ERRORS = (ConfigurationError, DivergenceError, EvaluationError, NotPositiveDefinite,
          ResourceError, UpdateError, OSError)

COMMANDS = ("simulate", "filter", "smooth", "vgs", "reference", "benchmark", "plotdata")


def _state_header(prefix, n):
    return [f"{prefix}{i + 1}" for i in range(n)]


def _cov_header(n):
    return [f"P{i + 1}{i + 1}" for i in range(n)]


def _trajectory_rows(times, m, P, sides=None):
    rows = []
    n = m.shape[-1]
    for k, t in enumerate(times):
        row = {"t": t}
        if sides is not None:
            row["side"] = sides[k]
        row.update(zip(_state_header("m", n), m[k]))
        row.update(zip(_cov_header(n), np.diagonal(P[k])))
        rows.append(row)
    return rows


def _write_trajectory(path, times, m, P, sides=None):
    n = m.shape[-1]
    header = ["t"] + (["side"] if sides is not None else []) + _state_header("m", n) + _cov_header(n)
    ex.write_csv(path, _trajectory_rows(times, m, P, sides), header)


def _filter_nodes(ft):
    """Filter moments with the prior (pre) and posterior (post) at measurement nodes."""
    grid = ft.grid
    meas_idx = set(int(i) for i in grid.measurement_indices)
    times, m, P, sides = [], [], [], []
    for k, t in enumerate(grid.times):
        if k in meas_idx:
            times.append(t)
            m.append(ft.m.pre[k])
            P.append(ft.P.pre[k])
            sides.append("pre")
        times.append(t)
        m.append(ft.m.post[k])
        P.append(ft.P.post[k])
        sides.append("post" if k in meas_idx else "node")
    return np.array(times), np.array(m), np.array(P), sides


def _run_ids(args, cfg, default=None):
    n = args.runs if args.runs is not None else (default if default is not None else cfg.runs)
    return range(n)


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg, args):
    for i in _run_ids(args, cfg):
        sim = ex.simulate_run(cfg, i)
        n = sim.path.states.shape[-1]
        ex.write_csv(os.path.join(args.out, "paths", f"run_{i:03d}_path.csv"),
                     [{"t": t, **dict(zip(_state_header("x", n), x))}
                      for t, x in zip(sim.path.grid.times, sim.path.states)],
                     ["t"] + _state_header("x", n))
        d = sim.records[0].value.size if sim.records else 0
        ex.write_csv(os.path.join(args.out, "paths", f"run_{i:03d}_measurements.csv"),
                     [{"t": r.time, **dict(zip(_state_header("y", d), r.value))}
                      for r in sim.records],
                     ["t"] + _state_header("y", d))
    ex.write_config(cfg, args.out)


def cmd_filter(cfg, args):
    model, meas = cfg.build_model()
    for i in _run_ids(args, cfg, 1):
        sim = ex.simulate_run(cfg, i)
        for engine in cfg.engines:
            scheme = ex.gfgs_scheme(engine)
            ft = run_filter(model, meas, sim.records, sim.grid, cfg.estimator_prior(), scheme,
                            **cfg.engine_opts)
            _write_trajectory(os.path.join(args.out, f"filter_run{i:03d}_{scheme}.csv"),
                              *_filter_nodes(ft))
    ex.write_config(cfg, args.out)


def _gfgs(cfg, sim, engine):
    model, meas = cfg.build_model()
    ft = run_filter(model, meas, sim.records, sim.grid, cfg.estimator_prior(),
                    ex.gfgs_scheme(engine), **cfg.engine_opts)
    st = smooth_type2(ft, model)
    return ft, st


def cmd_smooth(cfg, args):
    rows = []
    for i in _run_ids(args, cfg, 1):
        sim = ex.simulate_run(cfg, i)
        for engine in cfg.engines:
            scheme = ex.gfgs_scheme(engine)
            _, st = _gfgs(cfg, sim, engine)
            _write_trajectory(os.path.join(args.out, f"smooth_run{i:03d}_{scheme}.csv"),
                              sim.grid.times, st.m.post, st.P.post)
            metrics = evaluate(sim.truth, st.m, st.P, sim.grid.times, cfg.blocks())
            rows.append(ex._metric_row(i, "gfgs", engine, metrics))
    ex.write_csv(os.path.join(args.out, "smooth_metrics.csv"), rows, ex.metric_header(cfg))
    ex.write_config(cfg, args.out)


def cmd_vgs(cfg, args):
    model, meas = cfg.build_model()
    rows, kl_rows = [], []
    for i in _run_ids(args, cfg, 1):
        sim = ex.simulate_run(cfg, i)
        for engine in cfg.engines:
            if cfg.init == "naive":
                init = naive_init(model, cfg.estimator_prior(), sim.grid, engine, meas,
                                  **cfg.engine_opts)
            else:
                ft, st = _gfgs(cfg, sim, engine)
                init = export_variational(ft, st, model)
            vcfg = VgsConfig(engine=engine, engine_opts=dict(cfg.engine_opts), **cfg.vgs)
            res = run_vgs(model, meas, sim.records, sim.grid, cfg.estimator_prior(), init, vcfg)
            _write_trajectory(os.path.join(args.out, f"vgs_run{i:03d}_{engine}.csv"),
                              sim.grid.times, res.m.post, res.P.post)
            kl_rows += [{"run_id": i, "engine": engine, "iteration": k, "kl": v}
                        for k, v in enumerate(res.kl_history)]
            metrics = evaluate(sim.truth, res.m, res.P, sim.grid.times, cfg.blocks())
            fail = "" if res.converged else res.failure or "not converged"
            rows.append(ex._metric_row(i, "vgs", engine, metrics, res.iterations,
                                       res.converged, fail))
    ex.write_csv(os.path.join(args.out, "vgs_metrics.csv"), rows, ex.metric_header(cfg))
    ex.write_csv(os.path.join(args.out, "kl_trace.csv"), kl_rows,
                 ["run_id", "engine", "iteration", "kl"])
    ex.write_config(cfg, args.out)


def cmd_reference(cfg, args):
    rows = []
    for i in _run_ids(args, cfg):
        res = ex.reference_run(cfg, i)
        rows.append(res["row"])
        ex.write_csv(os.path.join(args.out, f"reference_run{i:03d}.csv"),
                     [{"t": t, "mean": m, "var": v}
                      for t, m, v in zip(res["times"], res["mean"], res["var"])],
                     ["t", "mean", "var"])
    ex.write_csv(os.path.join(args.out, "reference.csv"), rows, ex.metric_header(cfg))
    ex.write_config(cfg, args.out)


def cmd_benchmark(cfg, args):
    tic = time.perf_counter()
    report = ex.run_benchmark(cfg)
    ex.write_report(cfg, report, args.out)
    failures = sum(1 for r in report["rows"] if r["failure"])
    log.info("%d runs, %d rows, %d failures in %.1f s", cfg.runs, len(report["rows"]),
             failures, time.perf_counter() - tic)


def cmd_plotdata(cfg, args):
    src = args.input or os.path.join(args.out, "metrics.csv")
    rows = ex.read_metrics(src) if os.path.exists(src) else []
    if not rows and not os.path.exists(src):
        log.warning("no report at %s; writing an empty plot file", src)
    ex.write_csv(os.path.join(args.out, "plotdata.csv"), ex.plotdata_rows(rows), ex.PLOT_HEADER)


HANDLERS = {
    "simulate": cmd_simulate, "filter": cmd_filter, "smooth": cmd_smooth, "vgs": cmd_vgs,
    "reference": cmd_reference, "benchmark": cmd_benchmark, "plotdata": cmd_plotdata,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cdsmooth", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None,
                   help="YAML file or preset name (default: double_well)")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--runs", type=int, default=None, help="number of Monte-Carlo runs")
    p.add_argument("--engine", default=None, help="restrict to one engine")
    p.add_argument("--jobs", type=int, default=None, help="worker processes")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"use {ex.PAPER_SCALE_RUNS} Monte-Carlo runs")
    p.add_argument("--input", default=None, help="metrics CSV for plotdata")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.paper_scale and args.runs is None:
        args.runs = ex.PAPER_SCALE_RUNS
    try:
        overrides = {"seed": args.seed, "jobs": args.jobs}
        if args.engine:
            overrides["engines"] = [args.engine]
        if args.runs is not None:
            overrides["runs"] = args.runs
        cfg = ex.load_config(args.config, **overrides)
        HANDLERS[args.command](cfg, args)
    except ERRORS as exc:
        print(f"cdsmooth: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
