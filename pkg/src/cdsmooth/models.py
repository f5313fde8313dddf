"""Continuous-discrete model descriptors and the built-in benchmark systems.

All model callables are vectorised: states are arrays of shape ``(..., n)``
and the time argument is a scalar or an array broadcastable to
``x.shape[:-1]``. Functions must be pure so that they can be evaluated at
arbitrary sigma points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EvaluationError

Array = np.ndarray


def _constant(matrix):
    matrix = np.array(matrix, dtype=float)
    matrix.setflags(write=False)
    return lambda t: matrix


@dataclass(frozen=True)
class GaussianState:
    """Mean vector and covariance matrix at one time instant."""

    mean: Array
    cov: Array

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError(
                f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        scale = max(np.trace(cov) / mean.size, 1e-300)
        if np.max(np.abs(cov - cov.T)) > 1e-9 * max(np.max(np.abs(cov)), 1e-300):
            raise ConfigurationError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * scale:
            raise ConfigurationError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True)
class MeasurementRecord:
    time: float
    value: Array


@dataclass(frozen=True)
class SingularPartition:
    """Split ``x = [x1, x2]`` with ``dx1/dt = F1(t) x`` and a stochastic block ``x2``."""

    n1: int
    n2: int
    F1: Callable[[float], Array]
    drift2: Callable[[Array, float], Array]
    sigma2: Callable[[float], Array]
    drift2_jacobian: Optional[Callable[[Array, float], Array]] = None

    @property
    def rows(self):
        return slice(self.n1, self.n1 + self.n2)


class AnalyticHook:
    """Closed-form Gaussian expectations for a model.

    Subclasses provide batched methods taking means ``(B, n)`` and
    covariances ``(B, n, n)``.
    """

    def expected_drift(self, m, P, t=0.0):
        raise NotImplementedError

    def expected_drift_jacobian(self, m, P, t=0.0):
        raise NotImplementedError

    def e_terms(self, m, P, A, b, sigma_inv, t=0.0):
        """Return ``(E[e], grad_m E[e], grad_P E[e])`` for the drift-mismatch energy."""
        raise NotImplementedError


def gaussian_raw_moments(m, P, kmax):
    """Raw moments ``E[x^k]``, ``k = 0..kmax`` of scalar Gaussians ``N(m, P)``.

    ``m`` and ``P`` are arrays of equal shape; the result has a trailing axis
    of length ``kmax + 1``.
    """
    m = np.asarray(m, dtype=float)
    P = np.asarray(P, dtype=float)
    out = np.empty(m.shape + (kmax + 1,))
    out[..., 0] = 1.0
    if kmax >= 1:
        out[..., 1] = m
    for k in range(2, kmax + 1):
        out[..., k] = m * out[..., k - 1] + (k - 1) * P * out[..., k - 2]
    return out


def _polymul(a, b):
    # batched product of coefficient arrays, lowest degree first
    out = np.zeros(np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + (a.shape[-1] + b.shape[-1] - 1,))
    for i in range(a.shape[-1]):
        out[..., i:i + b.shape[-1]] += a[..., i:i + 1] * b
    return out


def _polyder(c):
    k = np.arange(1, c.shape[-1])
    return c[..., 1:] * k


class PolynomialDriftHook(AnalyticHook):
    """Exact expectations for a scalar model with polynomial drift.

    Parameters
    ----------
    coeffs : sequence of float
        Drift coefficients, lowest degree first; ``f(x) = sum_k c_k x^k``.
    """

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=float)

    def _expect(self, c, m, P):
        mom = gaussian_raw_moments(m, P, c.shape[-1] - 1)
        return np.sum(c * mom, axis=-1)

    def expected_drift(self, m, P, t=0.0):
        m1, P1 = m[..., 0], P[..., 0, 0]
        return self._expect(self.coeffs, m1, P1)[..., None]

    def expected_drift_jacobian(self, m, P, t=0.0):
        m1, P1 = m[..., 0], P[..., 0, 0]
        return self._expect(_polyder(self.coeffs), m1, P1)[..., None, None]

    def e_terms(self, m, P, A, b, sigma_inv, t=0.0):
        m1, P1 = m[..., 0], P[..., 0, 0]
        a = np.asarray(A)[..., 0, 0]
        bb = np.asarray(b)[..., 0]
        w = np.broadcast_to(np.asarray(sigma_inv, dtype=float)[..., 0, 0], m1.shape)
        # residual r(x) = f(x) + a x - b
        r = np.zeros(m1.shape + (max(self.coeffs.size, 2),))
        r[..., :self.coeffs.size] = self.coeffs
        r[..., 0] -= bb
        r[..., 1] += a
        dr = _polyder(r)
        e = 0.5 * w[..., None] * _polymul(r, r)
        de = w[..., None] * _polymul(r, dr)
        d2e = _polymul(dr, dr)
        if r.shape[-1] > 2:
            d2e = d2e + _polymul(r, _polyder(dr))
        d2e = w[..., None] * d2e
        e_mean = self._expect(e, m1, P1)
        grad_m = self._expect(de, m1, P1)[..., None]
        grad_P = 0.5 * self._expect(d2e, m1, P1)[..., None, None]
        return e_mean, grad_m, grad_P


@dataclass(frozen=True)
class SdeModel:
    """``dx = f(x, t) dt + L(t) dbeta`` with ``beta`` of diffusion ``Q(t)``."""

    state_dim: int
    drift: Callable[[Array, float], Array]
    dispersion: Callable[[float], Array]
    diffusion: Callable[[float], Array]
    drift_jacobian: Optional[Callable[[Array, float], Array]] = None
    singular_partition: Optional[SingularPartition] = None
    analytic: Optional[AnalyticHook] = None
    name: str = "sde"

    def __post_init__(self):
        if self.state_dim < 1:
            raise ConfigurationError("state_dim must be positive")


@dataclass(frozen=True)
class MeasurementModel:
    """``y_k = h(x(t_k)) + v_k`` with ``v_k ~ N(0, R)``.

    ``angle_components`` lists output indices holding angles; residuals in
    those components are wrapped into ``(-pi, pi]``.
    """

    meas_dim: int
    h: Callable[[Array], Array]
    noise_cov: Array
    h_jacobian: Optional[Callable[[Array], Array]] = None
    H: Optional[Array] = None
    angle_components: Sequence[int] = field(default_factory=tuple)

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if R.shape != (self.meas_dim, self.meas_dim):
            raise ConfigurationError("noise_cov shape does not match meas_dim")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R)[0] <= 0:
            raise ConfigurationError("noise_cov must be symmetric positive definite")
        object.__setattr__(self, "noise_cov", R)
        if self.H is not None:
            object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        object.__setattr__(self, "angle_components", tuple(self.angle_components))

    @property
    def is_linear(self):
        return self.H is not None

    def residual(self, y, hx):
        """``y - hx`` with angle components wrapped into ``(-pi, pi]``."""
        d = np.asarray(y, dtype=float) - np.asarray(hx, dtype=float)
        if self.angle_components:
            d = np.array(d, copy=True)
            idx = list(self.angle_components)
            d[..., idx] = wrap_angle(d[..., idx])
        return d

    def jacobian(self, x):
        if self.h_jacobian is not None:
            return self.h_jacobian(x)
        if self.H is not None:
            x = np.asarray(x)
            return np.broadcast_to(self.H, x.shape[:-1] + self.H.shape)
        raise ConfigurationError("measurement model has no Jacobian")


def wrap_angle(a):
    """Map angles into ``(-pi, pi]``."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def effective_diffusion(model, t=0.0):
    """``Sigma(t) = L(t) Q(t) L(t)^T``, symmetrized."""
    L = np.atleast_2d(np.asarray(model.dispersion(t), dtype=float))
    Q = np.atleast_2d(np.asarray(model.diffusion(t), dtype=float))
    if L.shape[1] != Q.shape[0] or Q.shape[0] != Q.shape[1]:
        raise ConfigurationError(f"dispersion {L.shape} and diffusion {Q.shape} do not conform")
    if L.shape[0] != model.state_dim:
        raise ConfigurationError("dispersion row count must equal state_dim")
    S = L @ Q @ L.T
    return 0.5 * (S + S.T)


def diffusion_on(model, times):
    """Stack of ``Sigma(t)`` for an array of times, shape ``(len(times), n, n)``."""
    times = np.asarray(times, dtype=float)
    return np.stack([effective_diffusion(model, t) for t in times.ravel()]).reshape(
        times.shape + (model.state_dim, model.state_dim))


def stochastic_block(model):
    """Row slice, inverse block diffusion and block diffusion used by the energy ``e``.

    Returns ``(rows, sigma2_fn)``; for non-singular models ``rows`` covers the
    full state.
    """
    part = model.singular_partition
    if part is None:
        return slice(0, model.state_dim), lambda t: effective_diffusion(model, t)
    return part.rows, lambda t: np.atleast_2d(np.asarray(part.sigma2(t), dtype=float))


def _check_positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise ConfigurationError(f"{name} must be positive, got {value}")


def make_double_well(sigma=1.0, meas_var=0.1):
    """Double well ``dx = 4x(1 - x^2) dt + sqrt(sigma) dbeta``, ``y = x + v``."""
    _check_positive("sigma", sigma)
    _check_positive("meas_var", meas_var)

    def drift(x, t=0.0):
        x = np.asarray(x, dtype=float)
        return 4.0 * x * (1.0 - x * x)

    def jac(x, t=0.0):
        x = np.asarray(x, dtype=float)
        return (4.0 - 12.0 * x * x)[..., None]

    model = SdeModel(
        state_dim=1, drift=drift, drift_jacobian=jac,
        dispersion=_constant([[1.0]]), diffusion=_constant([[sigma]]),
        analytic=PolynomialDriftHook([0.0, 4.0, 0.0, -4.0]), name="double_well")
    meas = MeasurementModel(meas_dim=1, h=lambda x: np.asarray(x, dtype=float),
                            noise_cov=[[meas_var]], H=[[1.0]])
    return model, meas


def make_ou(a=1.0, q=2.0, r=1.0):
    """Ornstein-Uhlenbeck test model ``dx = -a x dt + sqrt(q) dbeta``, ``y = x + v``."""
    _check_positive("a", a)
    _check_positive("q", q)
    _check_positive("r", r)

    def drift(x, t=0.0):
        return -a * np.asarray(x, dtype=float)

    def jac(x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape + (1,), -a)

    model = SdeModel(
        state_dim=1, drift=drift, drift_jacobian=jac,
        dispersion=_constant([[1.0]]), diffusion=_constant([[q]]),
        analytic=PolynomialDriftHook([0.0, -a]), name="ou")
    meas = MeasurementModel(meas_dim=1, h=lambda x: np.asarray(x, dtype=float),
                            noise_cov=[[r]], H=[[1.0]])
    return model, meas


REENTRY_CONSTANTS = dict(
    beta0=-0.59783, H0=13.406, Gm0=3.9860e5, R0=6374.0,
    q_velocity=2.4064e-5, q_param=1e-5,
    radar=(6375.0, 0.0), meas_cov=(1e-3, 1.7e-3),
)

REENTRY_PRIOR_MEAN = np.array([6500.4, 349.14, -1.8093, -6.7967, 0.6932])


def reentry_prior(smoother=True):
    """Initial Gaussian of the reentry problem.

    The generative prior has a degenerate aerodynamic parameter; smoothers
    use ``m5 = 0`` and ``P55 = 1`` instead.
    """
    m = REENTRY_PRIOR_MEAN.copy()
    P = np.diag([1e-6] * 4 + [0.0])
    if smoother:
        m[4] = 0.0
        P[4, 4] = 1.0
    return GaussianState(m, P)


def reentry_forces(x, beta0, H0, Gm0, R0):
    """Gravity ``G`` and drag ``D`` coefficients for states ``x`` of shape ``(..., 5)``."""
    x = np.asarray(x, dtype=float)
    R = np.linalg.norm(x[..., :2], axis=-1)
    if np.any(R == 0.0):
        raise EvaluationError("reentry drift is singular at |r| = 0")
    V = np.linalg.norm(x[..., 2:4], axis=-1)
    G = -Gm0 / R ** 3
    D = beta0 * np.exp(x[..., 4]) * np.exp((R0 - R) / H0) * V
    return G, D, R, V


def make_reentry(**overrides):
    """Five-state reentry tracking model with range/bearing radar.

    State ordering is ``[r1, r2, v1, v2, alpha]``. Keyword overrides replace
    entries of :data:`REENTRY_CONSTANTS`.
    """
    unknown = set(overrides) - set(REENTRY_CONSTANTS)
    if unknown:
        raise ConfigurationError(f"unknown reentry constants: {sorted(unknown)}")
    c = {**REENTRY_CONSTANTS, **overrides}
    beta0, H0, Gm0, R0 = c["beta0"], c["H0"], c["Gm0"], c["R0"]
    sx, sy = c["radar"]

    def drift(x, t=0.0):
        x = np.asarray(x, dtype=float)
        G, D, _, _ = reentry_forces(x, beta0, H0, Gm0, R0)
        out = np.zeros(x.shape)
        out[..., 0:2] = x[..., 2:4]
        out[..., 2:4] = G[..., None] * x[..., 0:2] + D[..., None] * x[..., 2:4]
        return out

    def jac(x, t=0.0):
        x = np.asarray(x, dtype=float)
        G, D, R, V = reentry_forces(x, beta0, H0, Gm0, R0)
        r, v = x[..., 0:2], x[..., 2:4]
        J = np.zeros(x.shape + (5,))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        eye = np.eye(2)
        dG_dr = (3.0 * Gm0 / R ** 5)[..., None] * r
        dD_dr = (-D / (H0 * R))[..., None] * r
        safe_V2 = np.where(V > 0, V * V, 1.0)
        dD_dv = (D / safe_V2)[..., None] * v
        J[..., 2:4, 0:2] = (G[..., None, None] * eye + r[..., :, None] * dG_dr[..., None, :]
                            + v[..., :, None] * dD_dr[..., None, :])
        J[..., 2:4, 2:4] = D[..., None, None] * eye + v[..., :, None] * dD_dv[..., None, :]
        J[..., 2:4, 4] = D[..., None] * v
        return J

    L = np.vstack([np.zeros((2, 3)), np.eye(3)])
    Q = np.diag([c["q_velocity"], c["q_velocity"], c["q_param"]])
    F1 = np.hstack([np.zeros((2, 2)), np.eye(2), np.zeros((2, 1))])
    part = SingularPartition(
        n1=2, n2=3, F1=_constant(F1),
        drift2=lambda x, t=0.0: drift(x, t)[..., 2:],
        drift2_jacobian=lambda x, t=0.0: jac(x, t)[..., 2:, :],
        sigma2=_constant(Q))
    model = SdeModel(state_dim=5, drift=drift, drift_jacobian=jac,
                     dispersion=_constant(L), diffusion=_constant(Q),
                     singular_partition=part, name="reentry")

    def h(x):
        x = np.asarray(x, dtype=float)
        dx = x[..., 0] - sx
        dy = x[..., 1] - sy
        return np.stack([np.hypot(dx, dy), np.arctan2(dy, dx)], axis=-1)

    def h_jac(x):
        x = np.asarray(x, dtype=float)
        dx = x[..., 0] - sx
        dy = x[..., 1] - sy
        rho2 = dx * dx + dy * dy
        rho = np.sqrt(rho2)
        J = np.zeros(x.shape[:-1] + (2, 5))
        J[..., 0, 0] = dx / rho
        J[..., 0, 1] = dy / rho
        J[..., 1, 0] = -dy / rho2
        J[..., 1, 1] = dx / rho2
        return J

    meas = MeasurementModel(meas_dim=2, h=h, h_jacobian=h_jac,
                            noise_cov=np.diag(c["meas_cov"]), angle_components=(1,))
    return model, meas


MODEL_FACTORIES = {
    "double_well": make_double_well,
    "ou": make_ou,
    "reentry": make_reentry,
}
