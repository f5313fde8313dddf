"""Finite-difference reference smoother for scalar models.

The state space is discretized into cells and time into steps of ``dt``; the
Euler-Maruyama transition density becomes a row-stochastic matrix, and the
smoothing densities follow from the forward-backward recursions of the
resulting hidden Markov model. As ``dx, dt -> 0`` this converges to the exact
Bayesian smoother, which makes it the oracle for the double-well benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError
from .models import effective_diffusion


@dataclass(frozen=True)
class StateGrid:
    """Uniform cell centers on ``[x_min, x_max]``."""

    x_min: float = -3.0
    x_max: float = 3.0
    n_cells: int = 601

    def __post_init__(self):
        if self.n_cells < 3 or not self.x_max > self.x_min:
            raise ConfigurationError("need x_max > x_min and at least 3 cells")

    @property
    def centers(self):
        return np.linspace(self.x_min, self.x_max, self.n_cells)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_cells - 1)

    def density(self, mass):
        """Turn cell probabilities into density values."""
        return np.asarray(mass) / self.dx

    def gaussian(self, mean, var):
        """Discretized normal density, normalized on the grid."""
        x = self.centers
        p = np.exp(-0.5 * (x - mean) ** 2 / var)
        return p / (p.sum() * self.dx)


def _check_scalar(model):
    if model.state_dim != 1:
        raise ConfigurationError("the grid reference supports scalar state models only")


def build_transition(model, dt, grid, t=0.0):
    """Row-stochastic matrix ``T[i, j] ~ N(x_j | x_i + f(x_i) dt, Sigma dt) dx``."""
    _check_scalar(model)
    x = grid.centers
    var = float(effective_diffusion(model, t)[0, 0]) * dt
    if not var > 0:
        raise ConfigurationError("the grid reference needs a positive diffusion")
    if np.sqrt(var) < grid.dx:
        raise ConfigurationError(
            f"transition std {np.sqrt(var):.3g} is below the cell width {grid.dx:.3g}; "
            "use a larger dt or fewer cells")
    mean = x + np.ravel(model.drift(x[:, None], t)) * dt
    logT = -0.5 * (x[None, :] - mean[:, None]) ** 2 / var
    logT -= logsumexp(logT, axis=1, keepdims=True)
    return np.exp(logT)


@dataclass
class GridPosterior:
    """Filtering and smoothing densities on a time lattice."""

    grid: StateGrid
    times: np.ndarray
    filtering: np.ndarray
    smoothing: np.ndarray
    log_evidence: float = 0.0

    @property
    def mean(self):
        return moments(self.smoothing, self.grid)[0]

    @property
    def var(self):
        return moments(self.smoothing, self.grid)[1]


def _loglik(meas, grid, y):
    x = grid.centers[:, None]
    res = meas.residual(np.atleast_1d(y), meas.h(x))
    Ri = np.linalg.inv(meas.noise_cov)
    return -0.5 * np.einsum("ci,ij,cj->c", res, Ri, res)


def forward_backward(transition, prior_density, records, meas, grid, times):
    """Forward-backward smoothing on the lattice ``times``.

    ``prior_density`` holds density values at the cell centers at
    ``times[0]``. The recursions are normalized every step and likelihoods
    are formed in log space, so neither pass underflows.
    """
    times = np.asarray(times, dtype=float)
    dt = times[1] - times[0]
    N = times.size
    idx = {}
    for r in records:
        k = int(round((r.time - times[0]) / dt))
        if abs(times[0] + k * dt - r.time) > 1e-9 * max(1.0, abs(r.time)) or not 0 <= k < N:
            raise ConfigurationError(f"measurement time {r.time} is not on the reference lattice")
        idx[k] = r.value
    loglik = {k: _loglik(meas, grid, y) for k, y in idx.items()}
    T = transition
    alpha = np.empty((N, grid.n_cells))
    a = np.asarray(prior_density, dtype=float) * grid.dx
    a = a / a.sum()
    log_ev = 0.0
    for i in range(N):
        if i > 0:
            a = a @ T
        if i in loglik:
            with np.errstate(divide="ignore"):
                la = np.log(a) + loglik[i]
            c = logsumexp(la)
            if not np.isfinite(c):
                raise ConfigurationError(f"measurement at t={times[i]:g} has no support on the grid")
            a = np.exp(la - c)
            log_ev += c
        a = a / a.sum()
        alpha[i] = a
    gamma = np.empty_like(alpha)
    b = np.ones(grid.n_cells)
    gamma[-1] = alpha[-1]
    for i in range(N - 2, -1, -1):
        w = b
        if i + 1 in loglik:
            ll = loglik[i + 1]
            w = b * np.exp(ll - ll.max())
        b = T @ w
        b = b / b.max()
        g = alpha[i] * b
        gamma[i] = g / g.sum()
    return GridPosterior(grid, times, grid.density(alpha), grid.density(gamma), log_ev)


def moments(density, grid):
    """Mean and variance of densities (last axis over cells), trapezoid rule."""
    x = grid.centers
    p = np.asarray(density, dtype=float)
    z = np.trapezoid(p, x, axis=-1)
    mean = np.trapezoid(p * x, x, axis=-1) / z
    var = np.trapezoid(p * x * x, x, axis=-1) / z - mean ** 2
    return mean, var


def _time_average(values, times):
    times = np.asarray(times, dtype=float)
    if times.size == 1:
        return float(values[0])
    return float(np.trapezoid(values, times) / (times[-1] - times[0]))


def nll_of_path(path, post, times=None):
    """Time-averaged ``-log p(x(t) | y)`` along a scalar path.

    ``path`` gives the true states on ``post.times`` (or on ``times``, a
    subset of them).
    """
    x = np.ravel(np.asarray(path, dtype=float))
    if times is None:
        times = post.times
        dens = post.smoothing
    else:
        k = np.rint((np.asarray(times) - post.times[0]) / (post.times[1] - post.times[0]))
        dens = post.smoothing[k.astype(int)]
    c = post.grid.centers
    vals = np.array([np.interp(xi, c, d, left=0.0, right=0.0) for xi, d in zip(x, dens)])
    return _time_average(-np.log(np.maximum(vals, 1e-300)), times)


def reference_smoother(model, meas, records, prior, t0, tK, dt=0.01, grid=None):
    """Convenience wrapper: build the chain and run forward-backward."""
    _check_scalar(model)
    grid = grid or StateGrid()
    n = int(round((tK - t0) / dt))
    times = t0 + dt * np.arange(n + 1)
    T = build_transition(model, dt, grid, t0)
    p0 = grid.gaussian(float(prior.mean[0]), float(prior.cov[0, 0]))
    return forward_backward(T, p0, records, meas, grid, times)
