"""Variational Gaussian smoother.

The approximating process is ``dx = (-A(t) x + b(t)) dt + sqrt(Sigma) dbeta``
with moments

    dm/dt = -A m + b,    dP/dt = -A P - P A^T + Sigma.

``A`` and ``b`` minimize the KL divergence to the smoothing distribution.
Each iteration runs a forward moment pass, a backward pass for the Lagrange
functions ``lambda`` and ``Psi`` (which jump at measurement times), and
recomputes

    A = -E[F_x] + 2 Sigma Psi,    b = E[f] + A m - Sigma lambda.

The new parameters are blended with the old ones through a backtracking line
search on the KL objective.

The forward pass starts from the initial moments carried by the
initialization (the GFGS smoothed moments at ``t0``), or from the prior when
there are none. Optionally (``optimize_initial=True``) the initial moments
become variational parameters: the objective then contains
``KL(N(m(t0), P(t0)) || prior)`` and stationarity gives
``m(t0) = m0 - P0 lambda(t0)`` and ``P(t0)^{-1} = P0^{-1} + 2 Psi(t0)``.

For models with a singular partition ``A`` and ``b`` only parameterize the
stochastic block; the deterministic rows of the moment dynamics are fixed
to ``[F1; A]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, EvaluationError, NotPositiveDefinite
from .models import effective_diffusion, stochastic_block
from .odeint import GridFunction, hermite_mid, stage_eval, sweep_affine, sweep_lyapunov
from .vgs_expect import make_engine, sigma_inverse_on

log = logging.getLogger(__name__)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _T(M):
    return np.swapaxes(M, -1, -2)


@dataclass
class VgsConfig:
    """Iteration controls for :func:`run_vgs`."""

    max_iters: int = 200
    kl_tol: float = 1e-3
    gamma0: float = 1.0
    shrink: float = 0.5
    max_halvings: int = 20
    optimize_initial: bool = False
    engine: str = "ext"
    engine_opts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.kl_tol > 0:
            raise ConfigurationError("kl_tol must be positive")
        if not 0 < self.shrink < 1:
            raise ConfigurationError("shrink must lie in (0, 1)")
        if self.max_iters < 0 or self.max_halvings < 0:
            raise ConfigurationError("iteration limits must be non-negative")


@dataclass
class VariationalParams:
    """``A``, ``b`` on the grid and optional initial moments ``m0``, ``P0``.

    When ``m0`` is ``None`` the forward pass starts from the prior.
    """

    A: GridFunction
    b: GridFunction
    m0: np.ndarray = None
    P0: np.ndarray = None

    def blend(self, other, gamma):
        """``self + gamma (other - self)`` for all parameters (one joint step)."""
        def mix(x, y):
            return x + gamma * (y - x)
        m0 = P0 = None
        if self.m0 is not None and other.m0 is not None:
            m0, P0 = mix(self.m0, other.m0), _sym(mix(self.P0, other.P0))
        return VariationalParams(self.A.combine(other.A, mix), self.b.combine(other.b, mix),
                                 m0, P0)

    def check_finite(self):
        arrays = [self.A.post, self.A.pre, self.A.mid, self.b.post, self.b.pre, self.b.mid]
        if self.m0 is not None:
            arrays += [self.m0, self.P0]
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise DivergenceError("variational parameters are not finite")


@dataclass
class LagrangeState:
    lam: GridFunction
    psi: GridFunction


@dataclass
class VgsResult:
    m: GridFunction
    P: GridFunction
    params: VariationalParams
    lagrange: LagrangeState
    kl_history: list
    iterations: int
    converged: bool
    non_improving: bool = False
    failure: str = ""


class _Setup:
    """Quantities shared by all passes of one VGS run (grid, diffusion, engine)."""

    def __init__(self, model, grid, engine=None, meas=None, engine_opts=None):
        self.model = model
        self.grid = grid
        self.engine = None if engine is None else make_engine(engine, model, meas,
                                                              **(engine_opts or {}))
        self.rows, _ = stochastic_block(model)
        self.part = model.singular_partition
        jumps = grid.measurement_indices
        self.stage_times = np.concatenate([grid.times, grid.mid_times, grid.times[jumps]])
        post = np.stack([effective_diffusion(model, t) for t in grid.times])
        mid = np.stack([effective_diffusion(model, t) for t in grid.mid_times])
        self.Sigma = GridFunction(grid, post, post, mid)
        Si = sigma_inverse_on(model, self.stage_times)
        N = grid.n_nodes
        self.Sigma_inv = Si  # stacked in stage order
        S2 = self.Sigma.map(lambda S: S[..., self.rows, self.rows].copy())
        self.Sigma2 = S2
        if self.part is not None:
            F1 = [np.atleast_2d(self.part.F1(t)) for t in self.stage_times]
            F1 = np.stack(F1)
            self.F1 = GridFunction(grid, F1[:N], F1[:N].copy(), F1[N:2 * N - 1])
            self.F1.pre[jumps] = F1[2 * N - 1:]
        else:
            self.F1 = None

    def full_A(self, A):
        """Drift matrix ``A~`` of the moment equations (``dm = -A~ m + b~``)."""
        if self.part is None:
            return A
        return A.combine(self.F1, lambda a, f1: np.concatenate([-f1, a], axis=-2))

    def full_b(self, b):
        if self.part is None:
            return b
        n1 = self.part.n1
        return b.map(lambda v: np.concatenate([np.zeros(v.shape[:-1] + (n1,)), v], axis=-1))


def _setup(model, grid, engine=None, meas=None, engine_opts=None):
    return _Setup(model, grid, engine, meas, engine_opts)


def forward_pass(model, params, prior, grid, setup=None):
    """Mean and covariance of the linear process on ``grid``."""
    s = setup or _setup(model, grid)
    At = s.full_A(params.A)
    bt = s.full_b(params.b)
    M = At.map(np.negative)
    m0, P0 = (prior.mean, prior.cov) if params.m0 is None else (params.m0, params.P0)
    try:
        m, _ = sweep_affine(M, bt, m0, "forward")
        P, _ = sweep_lyapunov(M, s.Sigma, P0, "forward")
    except FloatingPointError as exc:  # pragma: no cover - numpy default is warn
        raise DivergenceError(str(exc)) from exc
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(P))):
        bad = int(np.argmax(~np.isfinite(m).all(axis=-1) | ~np.isfinite(P).all(axis=(-1, -2))))
        raise DivergenceError(f"forward pass produced non-finite moments at node {bad}", node=bad)
    h = grid.step
    dm_post = _mv(M.post, m) + bt.post
    dm_pre = _mv(M.pre, m) + bt.pre

    def dP(Mx, S):
        MP = Mx @ P
        return MP + _T(MP) + S

    m_mid = hermite_mid(m, m, dm_post, dm_pre, h)
    P_mid = _sym(hermite_mid(P, P, dP(M.post, s.Sigma.post), dP(M.pre, s.Sigma.pre), h))
    return (GridFunction(grid, m, m.copy(), m_mid), GridFunction(grid, P, P.copy(), P_mid))


def _e_on_stages(s, params, m, P, gradients=True):
    """``E[e]`` and its gradients at every stage point of the grid."""
    engine = s.engine
    Si = s.Sigma_inv

    def fn(times, mm, PP, AA, bb):
        e, gm, gP = engine.e_terms(mm, PP, AA, bb, Si, times, gradients=gradients)
        if not gradients:
            return e, e, e
        return e, gm, gP

    try:
        return stage_eval(fn, s.grid, m, P, params.A, params.b)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise EvaluationError(f"expectation of e failed: {exc}") from exc


def _u_terms(s, meas, records, m, P, gradients=True):
    idx = s.grid.measurement_indices
    y = np.stack([np.atleast_1d(r.value) for r in records]) if records else np.zeros((0, 1))
    if idx.size == 0:
        n = m.post.shape[-1]
        return np.zeros(0), np.zeros((0, n)), np.zeros((0, n, n))
    return s.engine.u_terms(meas, m.post[idx], P.post[idx], y, gradients=gradients)


def backward_pass(model, engine, params, m, P, records, meas, grid=None, setup=None):
    """Lagrange functions by a backward sweep with measurement jumps.

    The sweep starts from ``lambda = Psi = 0`` just after ``t_K``; crossing a
    measurement node from the right adds ``grad E[u_k]``.
    """
    grid = grid or m.grid
    s = setup or _setup(model, grid, engine, meas)
    if s.engine is None:
        s.engine = make_engine(engine, model, meas)
    _, gm, gP = _e_on_stages(s, params, m, P)
    _, um, uP = _u_terms(s, meas, records, m, P)
    N = grid.n_nodes
    n = model.state_dim
    idx = grid.measurement_indices
    jl = np.zeros((N, n))
    jP = np.zeros((N, n, n))
    jl[idx] = um
    jP[idx] = _sym(uP)
    AtT = s.full_A(params.A).map(_T)
    c = gm.map(np.negative)
    S = gP.map(lambda g: -_sym(g))
    lam_post, lam_pre = sweep_affine(AtT, c, np.zeros(n), "backward", jumps=jl)
    psi_post, psi_pre = sweep_lyapunov(AtT, S, np.zeros((n, n)), "backward", jumps=jP)
    h = grid.step
    dl_post = _mv(AtT.post, lam_post) + c.post
    dl_pre = _mv(AtT.pre, lam_pre) + c.pre

    def dpsi(MT, Y, S):
        MY = MT @ Y
        return MY + _T(MY) + S

    lam_mid = hermite_mid(lam_post, lam_pre, dl_post, dl_pre, h)
    psi_mid = _sym(hermite_mid(psi_post, psi_pre, dpsi(AtT.post, psi_post, S.post),
                               dpsi(AtT.pre, psi_pre, S.pre), h))
    return LagrangeState(GridFunction(grid, lam_post, lam_pre, lam_mid),
                         GridFunction(grid, _sym(psi_post), _sym(psi_pre), psi_mid))


def compute_ab(model, engine, m, P, lagrange, setup=None):
    """Stationarity update ``A = -E[F_x] + 2 Sigma Psi``, ``b = E[f] + A m - Sigma lambda``."""
    grid = m.grid
    s = setup or _setup(model, grid, engine)
    if s.engine is None:
        s.engine = make_engine(engine, model)
    rows = s.rows
    S2 = s.Sigma2
    jumps = grid.measurement_indices
    S2_st = np.concatenate([S2.post, S2.mid, S2.pre[jumps]])

    def fn(times, mm, PP, lam, psi):
        Ef, J = s.engine.drift_moments(mm, PP, times)
        A = -J[:, rows, :] + 2.0 * S2_st @ psi[:, rows, :]
        b = Ef[:, rows] + _mv(A, mm) - _mv(S2_st, lam[:, rows])
        return A, b

    A, b = stage_eval(fn, grid, m, P, lagrange.lam, lagrange.psi)
    return VariationalParams(A, b)


def _simpson(g):
    """Integral of a scalar GridFunction with Simpson's rule on each interval."""
    h = g.grid.step
    a, mid, b = g.stages()
    return float(np.sum(h / 6.0 * (a + 4.0 * mid + b)))


def gaussian_kl(m, P, m0, P0):
    """``KL(N(m, P) || N(m0, P0))``."""
    n = m.shape[-1]
    C0 = np.linalg.cholesky(P0)
    sol = np.linalg.solve(C0, np.column_stack([P, m - m0]))
    W = np.linalg.solve(C0, sol[:, :n].T)  # C0^{-1} P C0^{-T}
    d = sol[:, n]
    _, logdet = np.linalg.slogdet(P)
    return 0.5 * (np.trace(W) + d @ d - n + 2.0 * np.sum(np.log(np.diag(C0))) - logdet)


def kl_objective(model, engine, params, m, P, records, meas, setup=None, prior=None):
    """KL divergence up to a constant: ``int E[e] dt + sum_k E[u_k]``.

    When ``params`` carries free initial moments and ``prior`` is given, the
    initial-state divergence from the prior is added.
    """
    grid = m.grid
    s = setup or _setup(model, grid, engine, meas)
    if s.engine is None:
        s.engine = make_engine(engine, model, meas)
    e, _, _ = _e_on_stages(s, params, m, P, gradients=False)
    u, _, _ = _u_terms(s, meas, records, m, P, gradients=False)
    kl = _simpson(e) + float(np.sum(u))
    if params.m0 is not None and prior is not None:
        kl += gaussian_kl(params.m0, params.P0, prior.mean, prior.cov)
    return kl


def initial_update(prior, lagrange):
    """Stationary initial moments ``(m0 - P0 lambda(t0), (P0^{-1} + 2 Psi(t0))^{-1})``.

    Returns ``None`` if the resulting covariance is not positive definite.
    """
    lam0 = lagrange.lam.pre[0]
    psi0 = lagrange.psi.pre[0]
    try:
        C0 = np.linalg.cholesky(prior.cov)
        eye = np.eye(prior.dim)
        P0_inv = np.linalg.solve(C0.T, np.linalg.solve(C0, eye))
        prec = _sym(P0_inv + 2.0 * psi0)
        Cp = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        return None
    P = np.linalg.solve(Cp.T, np.linalg.solve(Cp, eye))
    return prior.mean - prior.cov @ lam0, _sym(P)


def _prior_invertible(prior):
    try:
        np.linalg.cholesky(prior.cov)
        return True
    except np.linalg.LinAlgError:
        return False


def naive_init(model, prior, grid, engine="ext", meas=None, **engine_opts):
    """Constant parameters linearizing the drift at the prior (``A = -E[F_x]``)."""
    eng = make_engine(engine, model, meas, **engine_opts)
    rows, _ = stochastic_block(model)
    Ef, J = eng.drift_moments(prior.mean[None], prior.cov[None], grid.t0)
    A = -J[0][rows, :]
    b = Ef[0][rows] + A @ prior.mean
    return VariationalParams(GridFunction.constant(grid, A), GridFunction.constant(grid, b))


_TRIAL_ERRORS = (DivergenceError, EvaluationError, NotPositiveDefinite, np.linalg.LinAlgError)


def run_vgs(model, meas, records, grid, prior, init, config=None):
    """Damped fixed-point iteration with backtracking line search on the KL.

    ``init`` may be :class:`VariationalParams` or anything with ``A``/``b``
    attributes (such as :class:`~cdsmooth.cd_smoother.VariationalInit`).
    """
    cfg = config or VgsConfig()
    times = [r.time for r in records]
    if grid.measurement_indices.size != len(records):
        grid = grid.with_measurements(times)
    s = _setup(model, grid, cfg.engine, meas, cfg.engine_opts)
    free_init = cfg.optimize_initial and _prior_invertible(prior)
    m0 = getattr(init, "m0", None)
    P0 = getattr(init, "P0", None)
    if m0 is None:
        m0, P0 = prior.mean.copy(), prior.cov.copy()
    params = VariationalParams(init.A, init.b, m0, P0)
    params.check_finite()

    def evaluate(p):
        m, P = forward_pass(model, p, prior, grid, s)
        return m, P, kl_objective(model, None, p, m, P, records, meas, s, kl_prior)

    # the initial-state divergence only enters when the initial moments are free
    kl_prior = prior if free_init else None
    m, P, kl = evaluate(params)
    if not np.isfinite(kl):
        raise DivergenceError("KL objective of the initial parameters is not finite", iteration=0)
    history = [kl]
    converged = non_improving = False
    lag = None
    it = 0
    for it in range(1, cfg.max_iters + 1):
        try:
            lag = backward_pass(model, None, params, m, P, records, meas, grid, s)
            target = compute_ab(model, None, m, P, lag, s)
            start = initial_update(prior, lag) if free_init else None
            target.m0, target.P0 = start if start is not None else (params.m0, params.P0)
        except _TRIAL_ERRORS as exc:
            raise DivergenceError(f"iteration {it}: {exc}", iteration=it) from exc
        gamma = cfg.gamma0
        accepted = None
        kl_full = None
        for _ in range(cfg.max_halvings + 1):
            cand = params.blend(target, gamma)
            try:
                cand.check_finite()
                cm, cP, ckl = evaluate(cand)
            except _TRIAL_ERRORS:
                ckl = np.inf  # a diverging trial counts as a rejected step
            if kl_full is None:
                kl_full = ckl
            if np.isfinite(ckl) and ckl < kl:
                accepted = (cand, cm, cP, ckl)
                break
            gamma *= cfg.shrink
        if accepted is None:
            non_improving = True
            converged = bool(np.isfinite(kl_full) and abs(kl_full - kl) < cfg.kl_tol)
            it -= 1
            log.debug("line search found no decrease at iteration %d", it + 1)
            break
        params, m, P, new_kl = accepted
        delta = kl - new_kl
        kl = new_kl
        history.append(kl)
        log.debug("iteration %d: KL %.6g gamma %.3g", it, kl, gamma)
        if delta < cfg.kl_tol:
            converged = True
            break
    if lag is None or not non_improving:
        lag = backward_pass(model, None, params, m, P, records, meas, grid, s)
    return VgsResult(m, P, params, lag, history, it, converged, non_improving)
