"""Fixed-step time grids, RK4 integration and Euler-Maruyama simulation."""

from __future__ import annotations

from dataclasses import dataclass


import numpy as np

from . import kernels
from .errors import ConfigurationError, DivergenceError
from .models import MeasurementRecord, effective_diffusion, wrap_angle


class TimeGrid:
    """Uniform grid ``t0 + i * step`` on ``[t0, tK]`` with measurement nodes.

    Parameters
    ----------
    t0, tK : float
        Window end points.
    step : float
        Node spacing; ``(tK - t0) / step`` must be an integer.
    meas_times : sequence of float, optional
        Measurement instants, each of which must coincide with a node.
    """

    def __init__(self, t0, tK, step, meas_times=()):
        self.t0 = float(t0)
        self.tK = float(tK)
        self.step = float(step)
        if self.step <= 0 or self.tK <= self.t0:
            raise ConfigurationError("need tK > t0 and step > 0")
        ratio = (self.tK - self.t0) / self.step
        n_steps = int(round(ratio))
        if abs(ratio - n_steps) > 1e-9 * max(1.0, ratio):
            raise ConfigurationError(f"window length is not a multiple of the step ({ratio})")
        self.n_steps = n_steps
        self.times = self.t0 + self.step * np.arange(n_steps + 1)
        self.times[-1] = self.tK
        self.meas_times = np.asarray(meas_times, dtype=float)
        self.measurement_indices = self.indices_of(self.meas_times)
        if np.any(np.diff(self.measurement_indices) <= 0):
            raise ConfigurationError("measurement times must be strictly increasing")

    @property
    def n_nodes(self):
        return self.n_steps + 1

    @property
    def mid_times(self):
        return self.times[:-1] + 0.5 * self.step

    def indices_of(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        pos = (times - self.t0) / self.step
        idx = np.rint(pos).astype(int)
        if np.any(np.abs(pos - idx) > 1e-9) or np.any(idx < 0) or np.any(idx > self.n_steps):
            raise ConfigurationError("time not on the grid")
        return idx

    def with_measurements(self, meas_times):
        return TimeGrid(self.t0, self.tK, self.step, meas_times)

    def __repr__(self):
        return (f"TimeGrid(t0={self.t0}, tK={self.tK}, step={self.step}, "
                f"n_meas={self.measurement_indices.size})")


@dataclass
class GridFunction:
    """Function values stored on a :class:`TimeGrid`.

    ``post`` holds right limits at nodes, ``pre`` left limits (identical
    except at jump nodes) and ``mid`` the values at interval midpoints, which
    RK4 consumes at its half steps.
    """

    grid: TimeGrid
    post: np.ndarray
    pre: np.ndarray
    mid: np.ndarray

    @classmethod
    def continuous(cls, grid, values, mid=None):
        values = np.asarray(values, dtype=float)
        if mid is None:
            mid = 0.5 * (values[:-1] + values[1:])
        return cls(grid, values, values, np.asarray(mid, dtype=float))

    @classmethod
    def constant(cls, grid, value):
        value = np.asarray(value, dtype=float)
        nodes = np.broadcast_to(value, (grid.n_nodes,) + value.shape).copy()
        return cls(grid, nodes, nodes, nodes[:-1].copy())

    @property
    def values(self):
        return self.post

    @property
    def shape(self):
        return self.post.shape[1:]

    def stages(self):
        """Coefficient stacks ``(start, mid, end)`` of each interval, forward order."""
        return self.post[:-1], self.mid, self.pre[1:]

    def stages_backward(self):
        """Coefficient stacks for a sweep from ``tK`` back to ``t0``."""
        return self.pre[1:][::-1], self.mid[::-1], self.post[:-1][::-1]

    def combine(self, other, fn):
        return GridFunction(self.grid, fn(self.post, other.post), fn(self.pre, other.pre),
                            fn(self.mid, other.mid))

    def map(self, fn):
        return GridFunction(self.grid, fn(self.post), fn(self.pre), fn(self.mid))

    def interp(self, t):
        """Piecewise-linear interpolation through nodes and midpoints (right limits)."""
        ts = np.empty(2 * self.grid.n_nodes - 1)
        ts[0::2] = self.grid.times
        ts[1::2] = self.grid.mid_times
        vals = np.empty((ts.size,) + self.shape)
        vals[0::2] = self.post
        vals[1::2] = self.mid
        flat = vals.reshape(ts.size, -1)
        out = np.stack([np.interp(t, ts, flat[:, j]) for j in range(flat.shape[1])], axis=-1)
        return out.reshape(np.shape(t) + self.shape)


def hermite_mid(post, pre, dpost, dpre, step):
    """Cubic Hermite midpoint value on each interval from end values and slopes."""
    return 0.5 * (post[:-1] + pre[1:]) + (step / 8.0) * (dpost[:-1] - dpre[1:])


def stage_eval(fn, grid, *inputs, extra=None):
    """Evaluate a batched function at every RK4 stage point of the grid.

    ``inputs`` are :class:`GridFunction`. ``fn`` receives stacked arguments
    (node right limits, then midpoints, then left limits at jump nodes) plus
    the matching times, and returns a tuple of arrays; each is split back
    into a :class:`GridFunction`.
    """
    jumps = grid.measurement_indices
    N = grid.n_nodes
    times = np.concatenate([grid.times, grid.mid_times, grid.times[jumps]])
    args = [np.concatenate([g.post, g.mid, g.pre[jumps]]) for g in inputs]
    outs = fn(times, *args)
    single = not isinstance(outs, tuple)
    if single:
        outs = (outs,)
    result = []
    for o in outs:
        o = np.asarray(o)
        post = o[:N]
        mid = o[N:2 * N - 1]
        pre = post.copy()
        pre[jumps] = o[2 * N - 1:]
        result.append(GridFunction(grid, post, pre, mid))
    return result[0] if single else tuple(result)


def sweep_affine(M, c, y0, direction="forward", jumps=None):
    """Solve ``dy/dt = M y + c`` on the grid of ``M`` (GridFunctions).

    Returns ``(post, pre)`` node arrays. For a backward sweep ``y0`` is the
    right limit at ``tK`` and ``jumps[i]`` is added when crossing node ``i``
    (so ``pre = post + jump``).
    """
    h = M.grid.step
    if direction == "forward":
        Ma, Mm, Mb = M.stages()
        ca, cm, cb = c.stages()
        arrive, depart = kernels.affine_rk4(Ma, Mm, Mb, ca, cm, cb, y0, h, jumps)
        return depart, arrive
    Ma, Mm, Mb = M.stages_backward()
    ca, cm, cb = c.stages_backward()
    J = None if jumps is None else jumps[::-1]
    arrive, depart = kernels.affine_rk4(Ma, Mm, Mb, ca, cm, cb, y0, -h, J)
    return arrive[::-1], depart[::-1]


def sweep_lyapunov(M, S, Y0, direction="forward", jumps=None):
    """Solve ``dY/dt = M Y + Y M^T + S``; same conventions as :func:`sweep_affine`."""
    h = M.grid.step
    if direction == "forward":
        Ma, Mm, Mb = M.stages()
        Sa, Sm, Sb = S.stages()
        arrive, depart = kernels.lyap_rk4(Ma, Mm, Mb, Sa, Sm, Sb, Y0, h, jumps)
        return depart, arrive
    Ma, Mm, Mb = M.stages_backward()
    Sa, Sm, Sb = S.stages_backward()
    J = None if jumps is None else jumps[::-1]
    arrive, depart = kernels.lyap_rk4(Ma, Mm, Mb, Sa, Sm, Sb, Y0, -h, J)
    return arrive[::-1], depart[::-1]


def rk4_step(deriv, t, y, h):
    k1 = deriv(t, y)
    k2 = deriv(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = deriv(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = deriv(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def rk4_integrate(deriv, y0, grid, direction="forward"):
    """Classical RK4 on every node of ``grid``.

    For ``direction="backward"``, ``y0`` is the value at ``tK`` and the
    solution is marched with a negated step.
    """
    y = np.array(y0, dtype=float)
    out = np.empty((grid.n_nodes,) + y.shape)
    idx = range(grid.n_steps) if direction == "forward" else range(grid.n_steps, 0, -1)
    h = grid.step if direction == "forward" else -grid.step
    first = 0 if direction == "forward" else grid.n_steps
    out[first] = y
    for i in idx:
        y = rk4_step(deriv, grid.times[i], y, h)
        j = i + 1 if direction == "forward" else i - 1
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite RK4 state at node {j}", node=j)
        out[j] = y
    return GridFunction.continuous(grid, out)


@dataclass
class SamplePath:
    grid: TimeGrid
    states: np.ndarray
    seed: object = None

    def at(self, times):
        return self.states[self.grid.indices_of(times)]


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def euler_maruyama(model, x0, grid, seed=None):
    """Simulate ``x_{i+1} = x_i + f dt + L sqrt(Q dt) z_i``.

    ``x0`` may carry leading batch dimensions to simulate many paths at once.
    """
    rng = _rng(seed)
    x = np.array(x0, dtype=float)
    n = model.state_dim
    states = np.empty((grid.n_nodes,) + x.shape)
    states[0] = x
    dt = grid.step
    for i in range(grid.n_steps):
        t = grid.times[i]
        L = np.atleast_2d(model.dispersion(t))
        Q = np.atleast_2d(model.diffusion(t))
        B = L @ np.linalg.cholesky(Q) if np.any(Q) else np.zeros((n, Q.shape[0]))
        z = rng.standard_normal(x.shape[:-1] + (Q.shape[0],))
        x = x + model.drift(x, t) * dt + np.sqrt(dt) * z @ B.T
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"Euler-Maruyama produced non-finite state at node {i + 1}",
                                  node=i + 1)
        states[i + 1] = x
    return SamplePath(grid, states, seed)


def sample_measurements(path, meas, times, seed=None):
    """Noisy measurements ``h(x(t_k)) + chol(R) z_k`` of a sample path."""
    rng = _rng(seed)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    try:
        idx = path.grid.indices_of(times)
    except ConfigurationError as exc:
        raise ConfigurationError("measurement time is not on the simulation grid") from exc
    x = path.states[idx]
    hx = np.asarray(meas.h(x), dtype=float)
    C = np.linalg.cholesky(meas.noise_cov)
    z = rng.standard_normal(hx.shape)
    y = hx + z @ C.T
    if meas.angle_components:
        cols = list(meas.angle_components)
        y[..., cols] = wrap_angle(y[..., cols])
    return [MeasurementRecord(float(t), yk) for t, yk in zip(times, y)]


def diffusion_grid(model, grid):
    """Effective diffusion as a continuous :class:`GridFunction`."""
    post = np.stack([effective_diffusion(model, t) for t in grid.times])
    mid = np.stack([effective_diffusion(model, t) for t in grid.mid_times])
    return GridFunction(grid, post, post, mid)


def measurement_times(t0, tK, interval):
    """Regular measurement instants ``t0 + interval, ..., tK``."""
    count = int(round((tK - t0) / interval))
    return t0 + interval * np.arange(1, count + 1)
