"""Accuracy metrics of Gaussian state estimates against true sample paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)

REENTRY_BLOCKS = {"position": slice(0, 2), "velocity": slice(2, 4), "parameter": slice(4, 5)}


def _nodes(x):
    """Node values of a GridFunction (right limits) or a plain array."""
    return np.asarray(getattr(x, "post", x), dtype=float)


def _block(block, n):
    if block is None:
        return slice(0, n)
    if isinstance(block, slice):
        return block
    return np.asarray(block)


def _average(values, times):
    times = np.asarray(times, dtype=float)
    if times.size == 1:
        return float(values[0])
    return float(np.trapezoid(values, times) / (times[-1] - times[0]))


def rmse(truth, m, times, block=None):
    """``sqrt(1/T int |x - m|^2 dt)`` with the trapezoid rule over ``times``."""
    x, mm = _nodes(truth), _nodes(m)
    sl = _block(block, x.shape[-1])
    err = np.sum((x[:, sl] - mm[:, sl]) ** 2, axis=-1)
    return float(np.sqrt(_average(err, times)))


def _quad_forms(x, m, P):
    """``d^T P^{-1} d`` and ``log det P`` per node."""
    d = x - m
    C = np.linalg.cholesky(P)
    z = np.linalg.solve(C, d[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(C, axis1=-2, axis2=-1)), axis=-1)
    return np.sum(z * z, axis=-1), logdet


def _marginal(truth, m, P, block):
    x, mm, PP = _nodes(truth), _nodes(m), _nodes(P)
    sl = _block(block, x.shape[-1])
    Pb = PP[:, sl][:, :, sl]
    return x[:, sl], mm[:, sl], Pb


def nll(truth, m, P, times, block=None):
    """Time average of ``-log N(x(t) | m(t), P(t))`` on the block marginal."""
    x, mm, Pb = _marginal(truth, m, P, block)
    q, logdet = _quad_forms(x, mm, Pb)
    d = x.shape[-1]
    vals = 0.5 * (q + logdet + d * np.log(2.0 * np.pi))
    return _average(vals, times)


def consistency95(truth, m, P, block=None):
    """Fraction of nodes whose true state lies in the 95 % ellipsoid."""
    x, mm, Pb = _marginal(truth, m, P, block)
    q, _ = _quad_forms(x, mm, Pb)
    return float(np.mean(q <= chi2.ppf(0.95, x.shape[-1])))


@dataclass
class RunMetrics:
    rmse: float
    nll: float
    consistency95: float
    blocks: dict = field(default_factory=dict)

    def as_row(self):
        row = {"rmse": self.rmse, "nll": self.nll, "consistency": self.consistency95}
        for name, bm in self.blocks.items():
            row[f"rmse_{name}"] = bm.rmse
            row[f"nll_{name}"] = bm.nll
            row[f"consistency_{name}"] = bm.consistency95
        return row


def evaluate(truth, m, P, times, blocks=None):
    """All metrics, plus per-block variants when ``blocks`` maps names to slices."""
    out = RunMetrics(rmse(truth, m, times), nll(truth, m, P, times), consistency95(truth, m, P))
    for name, sl in (blocks or {}).items():
        out.blocks[name] = RunMetrics(rmse(truth, m, times, sl), nll(truth, m, P, times, sl),
                                      consistency95(truth, m, P, sl))
    return out


def aggregate(values):
    """Mean and the 5/25/50/75/95 % quantiles (linear interpolation, type 7).

    ``values`` may be a sequence of numbers or of :class:`RunMetrics`, in
    which case a dict of summaries per field is returned.
    """
    values = list(values)
    if values and isinstance(values[0], RunMetrics):
        rows = [v.as_row() for v in values]
        return {k: aggregate([r[k] for r in rows]) for k in rows[0]}
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return {"mean": float("nan"), **{f"q{int(q * 100):02d}": float("nan") for q in QUANTILES}}
    qs = np.quantile(arr, QUANTILES, method="linear")
    return {"mean": float(arr.mean()), **{f"q{int(q * 100):02d}": float(v)
                                          for q, v in zip(QUANTILES, qs)}}
