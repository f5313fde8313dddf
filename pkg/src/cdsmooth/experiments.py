"""Seeded Monte-Carlo experiments comparing GFGS and VGS.

A run simulates a true path and its measurements, runs the Gaussian
filtering based smoother (GFGS), initializes the VGS from it and scores both
against the truth. Each run draws its random numbers from
``SeedSequence([seed, run_id])``, so results do not depend on worker
scheduling or on which other runs are executed.
"""

from __future__ import annotations

import copy
import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .cd_filter import run_filter
from .cd_smoother import export_variational, smooth_type2
from .errors import ConfigurationError
from .grid_reference import StateGrid, reference_smoother, nll_of_path
from .metrics import REENTRY_BLOCKS, RunMetrics, aggregate, consistency95, evaluate, rmse
from .models import GaussianState, make_double_well, make_ou, make_reentry, reentry_prior
from .odeint import TimeGrid, euler_maruyama, measurement_times, sample_measurements
from .quadrature import cov_factor
from .vgs_core import VgsConfig, naive_init, run_vgs
from .vgs_expect import ENGINE_NAMES, make_engine

log = logging.getLogger(__name__)

METHODS = ("gfgs", "vgs")

PRESETS = {
    "double_well": dict(
        model="double_well", model_params={"sigma": 1.0}, meas_var=0.1,
        t0=0.0, tK=10.0, sim_step=0.01, est_step=0.01, meas_interval=1.0,
        prior={"mean": [0.0], "cov": [[1.0]]}, engines=["analytic"], runs=20),
    "reentry": dict(
        model="reentry", model_params={}, meas_var=None,
        t0=0.0, tK=200.0, sim_step=0.01, est_step=0.1, meas_interval=1.0,
        engines=["ext", "ct2", "ut2", "gh"], runs=10),
    "ou": dict(
        model="ou", model_params={"a": 1.0, "q": 2.0}, meas_var=1.0,
        t0=0.0, tK=10.0, sim_step=0.01, est_step=0.01, meas_interval=0.5,
        prior={"mean": [0.0], "cov": [[1.0]]}, engines=["ext"], runs=5),
}

PAPER_SCALE_RUNS = 100


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a benchmark."""

    model: str = "double_well"
    model_params: dict = field(default_factory=dict)
    meas_var: float = None
    t0: float = 0.0
    tK: float = 10.0
    sim_step: float = 0.01
    est_step: float = 0.01
    meas_interval: float = 1.0
    meas_times: list = None
    prior: dict = None
    smoother_prior: dict = None
    methods: list = field(default_factory=lambda: list(METHODS))
    engines: list = field(default_factory=lambda: ["analytic"])
    init: str = "gfgs"
    runs: int = 20
    seed: int = 0
    jobs: int = 1
    engine_opts: dict = field(default_factory=lambda: {"alpha": 1.0, "beta": 2.0, "kappa": 0.0,
                                                        "order": 3})
    vgs: dict = field(default_factory=lambda: {"max_iters": 200, "kl_tol": 1e-3})
    reference: dict = field(default_factory=lambda: {"x_min": -3.0, "x_max": 3.0,
                                                      "n_cells": 601, "dt": 0.01})

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        preset = data.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = copy.deepcopy(PRESETS[preset]) if preset else {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        base.update(data)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_dict({"preset": name, **overrides})

    def to_dict(self):
        return asdict(self)

    # ------------------------------------------------------------------
    def validate(self):
        if self.model not in ("double_well", "reentry", "ou"):
            raise ConfigurationError(f"unknown model {self.model!r}")
        for name in self.engines:
            if str(name).lower() not in ENGINE_NAMES:
                raise ConfigurationError(f"unknown engine {name!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}")
        if self.init not in ("gfgs", "naive"):
            raise ConfigurationError("init must be 'gfgs' or 'naive'")
        if self.runs < 0 or self.jobs < 1:
            raise ConfigurationError("runs must be >= 0 and jobs >= 1")
        model, meas = self.build_model()
        # grids must line up: estimation and simulation steps divide the window
        sim = TimeGrid(self.t0, self.tK, self.sim_step)
        est = TimeGrid(self.t0, self.tK, self.est_step, self.measurement_schedule())
        sim.indices_of(est.times)
        for p in (self.truth_prior(), self.estimator_prior()):
            if p.dim != model.state_dim:
                raise ConfigurationError("prior dimension does not match the model")
        for name in self.engines:
            make_engine(name, model, meas, **self.engine_opts)
            make_engine(gfgs_scheme(name), model, meas, **self.engine_opts)
        VgsConfig(**self.vgs)

    def build_model(self):
        params = dict(self.model_params or {})
        if self.model == "double_well":
            if self.meas_var is not None:
                params["meas_var"] = self.meas_var
            return make_double_well(**params)
        if self.model == "ou":
            if self.meas_var is not None:
                params["r"] = self.meas_var
            return make_ou(**params)
        if self.meas_var is not None:
            params["meas_cov"] = tuple(np.broadcast_to(self.meas_var, (2,)).tolist())
        if "radar" in params:
            params["radar"] = tuple(params["radar"])
        return make_reentry(**params)

    def measurement_schedule(self):
        if self.meas_times is not None:
            return np.asarray(self.meas_times, dtype=float)
        return measurement_times(self.t0, self.tK, self.meas_interval)

    def _gaussian(self, spec):
        return GaussianState(np.asarray(spec["mean"], dtype=float),
                             np.asarray(spec["cov"], dtype=float))

    def truth_prior(self):
        if self.prior is not None:
            return self._gaussian(self.prior)
        if self.model == "reentry":
            return reentry_prior(smoother=False)
        return GaussianState(np.zeros(1), np.eye(1))

    def estimator_prior(self):
        if self.smoother_prior is not None:
            return self._gaussian(self.smoother_prior)
        if self.model == "reentry":
            return reentry_prior(smoother=True)
        return self.truth_prior()

    def blocks(self):
        return REENTRY_BLOCKS if self.model == "reentry" else {}


def gfgs_scheme(engine):
    """Filter/smoother scheme paired with a VGS engine (``ct2`` pairs with ``ct``)."""
    name = str(engine).lower()
    return name[:-1] if name.endswith("2") else name


@dataclass
class SimulatedRun:
    run_id: int
    path: object
    records: list
    grid: TimeGrid
    truth: np.ndarray


def simulate_run(cfg, run_id):
    """True path and measurements of one Monte-Carlo run."""
    model, meas = cfg.build_model()
    s_x0, s_path, s_meas = np.random.SeedSequence([int(cfg.seed), int(run_id)]).spawn(3)
    prior = cfg.truth_prior()
    x0 = prior.mean + cov_factor(prior.cov) @ np.random.default_rng(s_x0).standard_normal(prior.dim)
    sim = TimeGrid(cfg.t0, cfg.tK, cfg.sim_step)
    path = euler_maruyama(model, x0, sim, np.random.default_rng(s_path))
    mt = cfg.measurement_schedule()
    records = sample_measurements(path, meas, mt, np.random.default_rng(s_meas))
    grid = TimeGrid(cfg.t0, cfg.tK, cfg.est_step, mt)
    return SimulatedRun(run_id, path, records, grid, path.at(grid.times))


def _metric_row(run_id, method, engine, metrics, iterations=0, converged=True, failure=""):
    row = {"run_id": run_id, "method": method, "engine": engine}
    if metrics is None:
        row.update({"rmse": np.nan, "nll": np.nan, "consistency": np.nan})
    else:
        row.update(metrics.as_row())
    row.update({"iterations": iterations, "converged": int(bool(converged)), "failure": failure})
    return row


def _failure_text(exc):
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")[:200]


def run_single(cfg, run_id, keep_estimates=False):
    """Score GFGS and VGS for every engine on one simulated run.

    Failures are recorded in the ``failure`` column rather than raised.
    Returns a dict with ``rows``, ``kl`` (per-iteration KL values),
    ``timing`` and optionally ``estimates``.
    """
    model, meas = cfg.build_model()
    sim = simulate_run(cfg, run_id)
    prior = cfg.estimator_prior()
    blocks = cfg.blocks()
    rows, kl_rows, timing = [], [], []
    estimates = {}
    times = sim.grid.times
    for engine in cfg.engines:
        engine = str(engine).lower()
        scheme = gfgs_scheme(engine)
        ft = st = init = None
        tic = time.perf_counter()
        try:
            ft = run_filter(model, meas, sim.records, sim.grid, prior, scheme, **cfg.engine_opts)
            st = smooth_type2(ft, model)
            init = export_variational(ft, st, model)
            gm = evaluate(sim.truth, st.m, st.P, times, blocks)
            fail = ""
        except Exception as exc:  # quarantine the run, keep going
            gm, fail = None, _failure_text(exc)
            log.warning("run %d GFGS(%s) failed: %s", run_id, scheme, fail)
        timing.append({"run_id": run_id, "method": "gfgs", "engine": engine,
                       "seconds": time.perf_counter() - tic})
        if "gfgs" in cfg.methods:
            rows.append(_metric_row(run_id, "gfgs", engine, gm, 0, not fail, fail))
        if keep_estimates and st is not None:
            estimates[("gfgs", engine)] = (st.m, st.P)
        if "vgs" not in cfg.methods:
            continue
        tic = time.perf_counter()
        vm, its, conv = None, 0, False
        try:
            if cfg.init == "naive" or init is None:
                if init is None and cfg.init == "gfgs":
                    raise RuntimeError("GFGS initialization unavailable")
                init = naive_init(model, prior, sim.grid, engine, meas, **cfg.engine_opts)
            vcfg = VgsConfig(engine=engine, engine_opts=dict(cfg.engine_opts), **cfg.vgs)
            res = run_vgs(model, meas, sim.records, sim.grid, prior, init, vcfg)
            vm = evaluate(sim.truth, res.m, res.P, times, blocks)
            its, conv = res.iterations, res.converged
            fail = "" if conv else (res.failure or ("line search stalled" if res.non_improving
                                                    else "max_iters reached"))
            for k, v in enumerate(res.kl_history):
                kl_rows.append({"run_id": run_id, "engine": engine, "iteration": k, "kl": v})
            if keep_estimates:
                estimates[("vgs", engine)] = (res.m, res.P)
        except Exception as exc:
            fail = _failure_text(exc)
            log.warning("run %d VGS(%s) failed: %s", run_id, engine, fail)
        timing.append({"run_id": run_id, "method": "vgs", "engine": engine,
                       "seconds": time.perf_counter() - tic})
        rows.append(_metric_row(run_id, "vgs", engine, vm, its, conv, fail))
    out = {"rows": rows, "kl": kl_rows, "timing": timing}
    if keep_estimates:
        out["estimates"] = estimates
        out["sim"] = sim
    return out


def _run_star(args):
    cfg_dict, run_id = args
    return run_single(ExperimentConfig.from_dict(cfg_dict), run_id)


def run_benchmark(cfg, runs=None, jobs=None):
    """All runs, merged by run index; returns the benchmark report dict."""
    runs = cfg.runs if runs is None else runs
    jobs = cfg.jobs if jobs is None else jobs
    ids = list(range(runs))
    if jobs > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_star, [(cfg.to_dict(), i) for i in ids]))
    else:
        results = [run_single(cfg, i) for i in ids]
    report = {"rows": [], "kl": [], "timing": []}
    for res in results:  # already in run order
        for key in report:
            report[key].extend(res[key])
    return report


def reference_run(cfg, run_id):
    """Grid-reference metrics for one run of a scalar model."""
    model, meas = cfg.build_model()
    if model.state_dim != 1:
        raise ConfigurationError("the reference smoother supports scalar models only")
    sim = simulate_run(cfg, run_id)
    ref = cfg.reference
    grid = StateGrid(ref.get("x_min", -3.0), ref.get("x_max", 3.0), int(ref.get("n_cells", 601)))
    post = reference_smoother(model, meas, sim.records, cfg.estimator_prior(), cfg.t0, cfg.tK,
                              float(ref.get("dt", 0.01)), grid)
    k = np.rint((sim.grid.times - post.times[0]) / (post.times[1] - post.times[0])).astype(int)
    mean, var = post.mean[k][:, None], post.var[k][:, None, None]
    times = sim.grid.times
    metrics = RunMetrics(rmse(sim.truth, mean, times),
                         nll_of_path(sim.truth[:, 0], post, times),
                         consistency95(sim.truth, mean, var))
    return {"row": _metric_row(run_id, "reference", "grid", metrics), "mean": mean[:, 0],
            "var": var[:, 0, 0], "times": times, "posterior": post, "sim": sim}


# ---------------------------------------------------------------- output

def fmt(v):
    """Stable text form of a CSV cell."""
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_csv(path, rows, header=None):
    header = header or (list(rows[0].keys()) if rows else [])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r.get(h, "")) for h in header])


def metric_header(cfg):
    cols = ["run_id", "method", "engine", "rmse", "nll", "consistency"]
    for name in cfg.blocks():
        cols += [f"rmse_{name}", f"nll_{name}", f"consistency_{name}"]
    return cols + ["iterations", "converged", "failure"]


def summary_rows(rows):
    """Aggregate of each metric per (method, engine)."""
    out = []
    keys = []
    for r in rows:
        if (r["method"], r["engine"]) not in keys:
            keys.append((r["method"], r["engine"]))
    skip = {"run_id", "method", "engine", "failure", "converged"}
    for method, engine in keys:
        sel = [r for r in rows if r["method"] == method and r["engine"] == engine]
        for metric in [k for k in sel[0] if k not in skip]:
            agg = aggregate([float(r[metric]) for r in sel])
            out.append({"method": method, "engine": engine, "metric": metric,
                        "runs": len(sel), **agg})
        out.append({"method": method, "engine": engine, "metric": "failures", "runs": len(sel),
                    **aggregate([1.0 if r["failure"] else 0.0 for r in sel])})
    return out


SUMMARY_HEADER = ["method", "engine", "metric", "runs", "mean", "q05", "q25", "q50", "q75", "q95"]


def write_report(cfg, report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, out_dir)
    write_csv(os.path.join(out_dir, "metrics.csv"), report["rows"], metric_header(cfg))
    write_csv(os.path.join(out_dir, "summary.csv"), summary_rows(report["rows"]), SUMMARY_HEADER)
    write_csv(os.path.join(out_dir, "kl_trace.csv"), report["kl"],
              ["run_id", "engine", "iteration", "kl"])
    write_csv(os.path.join(out_dir, "timing.csv"), report["timing"],
              ["run_id", "method", "engine", "seconds"])


def write_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


PLOT_HEADER = ["method", "engine", "metric", "quantile", "value"]


def plotdata_rows(rows):
    """Long-format quantiles for boxplots, one row per (method, engine, metric, quantile)."""
    out = []
    for s in summary_rows(rows):
        if s["metric"] in ("iterations", "failures"):
            continue
        for q in ("q05", "q25", "q50", "q75", "q95"):
            out.append({"method": s["method"], "engine": s["engine"], "metric": s["metric"],
                        "quantile": int(q[1:]) / 100.0, "value": s[q]})
    return out


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_config(source, **overrides):
    """Config from a YAML file path or a preset name, with keyword overrides."""
    if source is None:
        data = {"preset": "double_well"}
    elif source in PRESETS:
        data = {"preset": source}
    else:
        if not os.path.exists(source):
            raise ConfigurationError(f"config {source!r} is neither a file nor a preset "
                                     f"({', '.join(sorted(PRESETS))})")
        with open(source) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)
