"""Continuous-discrete Gaussian filter.

Between measurements the mean and covariance follow the moment equations

    dm/dt = E[f],    dP/dt = E[F_x] P + P E[F_x]^T + Sigma,

where ``E[F_x]`` is the engine's (statistical) Jacobian, and at measurement
times a Kalman-type update with engine-computed measurement moments is
applied. The filter caches ``E[f]`` and ``E[F_x]`` on the whole grid because
the Type II smoother reuses them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, EvaluationError, NotPositiveDefinite, UpdateError
from .models import GaussianState, effective_diffusion
from .odeint import GridFunction, TimeGrid, hermite_mid
from .vgs_expect import make_engine


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _moment_rhs(engine, Sigma, m, P, t):
    Ef, J = engine.drift_moments(m[None], P[None], t)
    JP = J[0] @ P
    return Ef[0], JP + JP.T + Sigma


def _check_cov(P, node):
    if not np.all(np.isfinite(P)) or np.any(np.diag(P) < -1e-12 * max(1.0, np.trace(np.abs(P)))):
        raise DivergenceError(f"filter covariance lost positive semidefiniteness at node {node}",
                              node=node)


def _rk4_moments(engine, model, m, P, t, h):
    """One RK4 step of the moment equations."""
    S0 = effective_diffusion(model, t)
    Sh = effective_diffusion(model, t + 0.5 * h)
    S1 = effective_diffusion(model, t + h)
    dm1, dP1 = _moment_rhs(engine, S0, m, P, t)
    dm2, dP2 = _moment_rhs(engine, Sh, m + 0.5 * h * dm1, P + 0.5 * h * dP1, t + 0.5 * h)
    dm3, dP3 = _moment_rhs(engine, Sh, m + 0.5 * h * dm2, P + 0.5 * h * dP2, t + 0.5 * h)
    dm4, dP4 = _moment_rhs(engine, S1, m + h * dm3, P + h * dP3, t + h)
    m = m + (h / 6.0) * (dm1 + 2.0 * (dm2 + dm3) + dm4)
    P = P + (h / 6.0) * (dP1 + 2.0 * (dP2 + dP3) + dP4)
    return m, _sym(P)


def predict(model, state, t_from, t_to, scheme="ext", step=0.01, **engine_opts):
    """Propagate a Gaussian from ``t_from`` to ``t_to`` with fixed-step RK4."""
    engine = make_engine(scheme, model, **engine_opts)
    n_steps = int(round((t_to - t_from) / step))
    if n_steps <= 0 or abs(n_steps * step - (t_to - t_from)) > 1e-9 * max(1.0, abs(t_to)):
        raise ValueError("t_to - t_from must be a positive multiple of step")
    m, P = state.mean.astype(float), state.cov.astype(float)
    for i in range(n_steps):
        try:
            m, P = _rk4_moments(engine, model, m, P, t_from + i * step, step)
        except (EvaluationError, NotPositiveDefinite) as exc:
            raise DivergenceError(f"prediction failed at step {i}: {exc}", node=i) from exc
        _check_cov(P, i + 1)
    return GaussianState(m, P)


def _update_arrays(engine, meas, m, P, y):
    Eh, Shh, C = engine.measurement_moments(meas, m[None], P[None])
    S = _sym(Shh[0] + meas.noise_cov)
    try:
        cS = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise UpdateError("innovation covariance is not positive definite") from exc
    # K = C S^{-1} via two triangular solves on S = cS cS^T
    K = np.linalg.solve(cS.T, np.linalg.solve(cS, C[0].T)).T
    innov = meas.residual(np.asarray(y, dtype=float), Eh[0])
    m_new = m + K @ innov
    P_new = _sym(P - K @ S @ K.T)
    return m_new, P_new


def update(state, meas, y, scheme="ext", model=None, **engine_opts):
    """Kalman-type measurement update of ``state`` with the value ``y``."""
    engine = make_engine(scheme, model, meas, dim=state.dim, **engine_opts)
    m, P = _update_arrays(engine, meas, state.mean.astype(float), state.cov.astype(float), y)
    return GaussianState(m, P)


@dataclass
class FilterTrajectory:
    """Filter moments and cached drift expectations on the estimation grid."""

    grid: TimeGrid
    m: GridFunction
    P: GridFunction
    Ef: GridFunction
    J: GridFunction
    scheme: str

    @property
    def m_f(self):
        return self.m

    @property
    def P_f(self):
        return self.P

    def state_at(self, i, side="post"):
        src = (self.m.post, self.P.post) if side == "post" else (self.m.pre, self.P.pre)
        return GaussianState(src[0][i], src[1][i])


def run_filter(model, meas, records, grid, prior, scheme="ext", **engine_opts):
    """Alternate prediction and update over ``grid``.

    ``grid.measurement_indices`` must correspond to the record times.
    """
    engine = make_engine(scheme, model, meas, **engine_opts)
    times = [r.time for r in records]
    if grid.measurement_indices.size != len(records) or not np.allclose(
            grid.times[grid.measurement_indices], times, atol=1e-9 * grid.step):
        grid = grid.with_measurements(times)
    n = model.state_dim
    N = grid.n_nodes
    post = np.empty((N, n))
    pre = np.empty((N, n))
    Ppost = np.empty((N, n, n))
    Ppre = np.empty((N, n, n))
    m, P = prior.mean.astype(float).copy(), prior.cov.astype(float).copy()
    meas_at = {int(i): r for i, r in zip(grid.measurement_indices, records)}
    h = grid.step

    def _apply(i, m, P):
        pre[i], Ppre[i] = m, P
        if i in meas_at:
            try:
                m, P = _update_arrays(engine, meas, m, P, meas_at[i].value)
            except (UpdateError, EvaluationError, NotPositiveDefinite) as exc:
                raise UpdateError(f"update failed at t={grid.times[i]:g}: {exc}") from exc
            _check_cov(P, i)
        post[i], Ppost[i] = m, P
        return m, P

    m, P = _apply(0, m, P)
    for i in range(grid.n_steps):
        try:
            m, P = _rk4_moments(engine, model, m, P, grid.times[i], h)
        except (EvaluationError, NotPositiveDefinite) as exc:
            raise DivergenceError(f"prediction failed at t={grid.times[i]:g}: {exc}",
                                  node=i) from exc
        _check_cov(P, i + 1)
        m, P = _apply(i + 1, m, P)

    # drift expectations at nodes (both sides), then cubic midpoints
    jumps = grid.measurement_indices
    node_m = np.concatenate([post, pre[jumps]])
    node_P = np.concatenate([Ppost, Ppre[jumps]])
    node_t = np.concatenate([grid.times, grid.times[jumps]])
    Ef_n, J_n = engine.drift_moments(node_m, node_P, node_t)
    Ef_post, J_post = Ef_n[:N], J_n[:N]
    Ef_pre, J_pre = Ef_post.copy(), J_post.copy()
    Ef_pre[jumps], J_pre[jumps] = Ef_n[N:], J_n[N:]
    Sig = np.stack([effective_diffusion(model, t) for t in grid.times])

    def dP(J, P, S):
        JP = J @ P
        return JP + np.swapaxes(JP, -1, -2) + S

    m_mid = hermite_mid(post, pre, Ef_post, Ef_pre, h)
    P_mid = _sym(hermite_mid(Ppost, Ppre, dP(J_post, Ppost, Sig), dP(J_pre, Ppre, Sig), h))
    m_gf = GridFunction(grid, post, pre, m_mid)
    P_gf = GridFunction(grid, Ppost, Ppre, P_mid)
    Ef_mid, J_mid = engine.drift_moments(m_mid, P_mid, grid.mid_times)
    Ef = GridFunction(grid, Ef_post, Ef_pre, Ef_mid)
    J = GridFunction(grid, J_post, J_pre, J_mid)
    return FilterTrajectory(grid, m_gf, P_gf, Ef, J, engine.name)
