"""Gaussian expectation engines for the filter, smoother and VGS equations.

An engine evaluates, for batches of Gaussians ``N(m, P)`` (``m`` of shape
``(B, n)``, ``P`` of shape ``(B, n, n)``):

* drift moments ``E[f]`` and the statistical Jacobian ``E[F_x]``;
* the drift-mismatch energy ``e`` with its mean/covariance gradients;
* the measurement energy ``u_k`` with its gradients;
* measurement moments for the Kalman-type update.

Engine names: ``"analytic"``, ``"ext"``, ``"ct"``, ``"ut"``, ``"gh"`` and the
Jacobian-based alternatives ``"ct2"``, ``"ut2"``, ``"gh2"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EvaluationError
from .models import stochastic_block, wrap_angle
from .quadrature import cov_factor_batch, make_rule, sigma_points

ENGINE_NAMES = ("analytic", "ext", "ct", "ut", "gh", "ct2", "ut2", "gh2")


def _finite(a, what):
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.asarray(a)))[0]
        raise EvaluationError(f"{what} is not finite at index {tuple(bad)}")
    return a


def _solve_lt(L, Y):
    """``L^{-T} Y`` for batched lower-triangular ``L``."""
    return np.linalg.solve(np.swapaxes(L, -1, -2), Y)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _quad(r, W):
    return 0.5 * np.einsum("...i,...ij,...j->...", r, W, r)


@dataclass
class ETermContext:
    """Variational parameters and stochastic-block diffusion for the energy ``e``.

    ``A`` has shape ``(n2, n)`` and ``b`` shape ``(n2,)`` (with an optional
    leading batch axis); ``n2 = n`` for non-singular models.
    """

    model: object
    A: np.ndarray
    b: np.ndarray
    t: object = 0.0
    sigma_inv: np.ndarray = None

    def __post_init__(self):
        rows, sigma2 = stochastic_block(self.model)
        self.rows = rows
        if self.sigma_inv is None:
            self.sigma_inv = sigma_inverse_on(self.model, [0.0 if np.ndim(self.t) else self.t])[0]


def sigma_inverse_on(model, times):
    """Stack of inverse stochastic-block diffusions for an array of times."""
    _, sigma2 = stochastic_block(model)
    out = []
    cache = {}
    for t in np.ravel(times):
        S = np.asarray(sigma2(t), dtype=float)
        key = S.tobytes()
        if key not in cache:
            try:
                C = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise ConfigurationError(
                    "effective diffusion on the stochastic block must be positive definite; "
                    "declare a singular_partition for models with deterministic states") from exc
            Ci = np.linalg.solve(C, np.eye(S.shape[0]))
            cache[key] = Ci.T @ Ci
        out.append(cache[key])
    return np.stack(out)


class Engine:
    """Base class; subclasses fill in the batched primitives."""

    name = "base"
    alternative = False

    def __init__(self, model, meas=None):
        self.model = model
        self.meas = meas
        part = None if model is None else model.singular_partition
        if model is None:
            self._f_rows = self._F_rows = None
        elif part is not None:
            self._f_rows = part.drift2
            self._F_rows = part.drift2_jacobian or (
                None if model.drift_jacobian is None
                else (lambda x, t, _j=model.drift_jacobian, _r=part.rows: _j(x, t)[..., _r, :]))
        else:
            self._f_rows = model.drift
            self._F_rows = model.drift_jacobian

    # drift -------------------------------------------------------------
    def drift_moments(self, m, P, t=0.0):
        raise NotImplementedError

    # energies ----------------------------------------------------------
    def e_terms(self, m, P, A, b, sigma_inv, t=0.0, gradients=True):
        raise NotImplementedError

    def u_terms(self, meas, m, P, y, gradients=True):
        if meas.is_linear:
            return linear_u_terms(meas, m, P, y)
        return self._u_terms_nonlinear(meas, m, P, y, gradients)

    def _u_terms_nonlinear(self, meas, m, P, y, gradients):
        raise NotImplementedError

    def measurement_moments(self, meas, m, P):
        if meas.is_linear:
            H = meas.H
            return (np.einsum("ij,bj->bi", H, m), H @ P @ H.T, P @ H.T)
        return self._measurement_moments_nonlinear(meas, m, P)

    def _measurement_moments_nonlinear(self, meas, m, P):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def linear_u_terms(meas, m, P, y):
    """Exact ``E[u_k]`` and gradients for ``h(x) = H x``."""
    H = meas.H
    Ri = np.linalg.inv(meas.noise_cov)
    res = -meas.residual(y, np.einsum("ij,bj->bi", H, m))  # H m - y
    HtRi = H.T @ Ri
    u = _quad(res, Ri) + 0.5 * np.einsum("ij,bji->b", Ri, H @ P @ H.T)
    gm = np.einsum("ij,bj->bi", HtRi, res)
    gP = np.broadcast_to(0.5 * HtRi @ H, P.shape).copy()
    return u, gm, gP


class AnalyticEngine(Engine):
    """Closed-form expectations from the model's :class:`~cdsmooth.models.AnalyticHook`."""

    name = "analytic"

    def __init__(self, model, meas=None):
        super().__init__(model, meas)
        if model is not None and model.analytic is None:
            raise ConfigurationError(f"model {model.name!r} has no analytic expectation hook")
        self.hook = None if model is None else model.analytic

    def drift_moments(self, m, P, t=0.0):
        return self.hook.expected_drift(m, P, t), self.hook.expected_drift_jacobian(m, P, t)

    def e_terms(self, m, P, A, b, sigma_inv, t=0.0, gradients=True):
        return self.hook.e_terms(m, P, A, b, sigma_inv, t)

    def _u_terms_nonlinear(self, meas, m, P, y, gradients):
        raise ConfigurationError("analytic engine supports linear measurement models only")

    def _measurement_moments_nonlinear(self, meas, m, P):
        raise ConfigurationError("analytic engine supports linear measurement models only")


class ExtEngine(Engine):
    """First-order Taylor linearization about the mean."""

    name = "ext"

    def __init__(self, model, meas=None):
        super().__init__(model, meas)
        if model is not None and model.drift_jacobian is None:
            raise ConfigurationError("EXT engine needs the drift Jacobian")

    def drift_moments(self, m, P, t=0.0):
        f = _finite(self.model.drift(m, t), "drift")
        F = _finite(self.model.drift_jacobian(m, t), "drift Jacobian")
        return f, F

    def e_terms(self, m, P, A, b, sigma_inv, t=0.0, gradients=True):
        f = self._f_rows(m, t)
        G = self._F_rows(m, t) + A
        r = f + np.einsum("bij,bj->bi", A, m) - b
        WG = sigma_inv @ G
        e = _quad(r, sigma_inv) + 0.5 * np.einsum("bij,bjk,bik->b", G, P, WG)
        if not gradients:
            return e, None, None
        gm = np.einsum("bji,bj->bi", WG, r)
        gP = 0.5 * np.einsum("bji,bjk->bik", G, WG)
        return _finite(e, "EXT energy"), gm, _sym(gP)

    def _u_terms_nonlinear(self, meas, m, P, y, gradients):
        Ri = np.linalg.inv(meas.noise_cov)
        res = -meas.residual(y, meas.h(m))
        H = meas.jacobian(m)
        RiH = Ri @ H
        u = _quad(res, Ri) + 0.5 * np.einsum("bij,bjk,bik->b", H, P, RiH)
        gm = np.einsum("bji,bj->bi", RiH, res)
        gP = 0.5 * np.einsum("bji,bjk->bik", H, RiH)
        return u, gm, _sym(gP)

    def _measurement_moments_nonlinear(self, meas, m, P):
        hm = meas.h(m)
        H = meas.jacobian(m)
        PHt = P @ np.swapaxes(H, -1, -2)
        return hm, H @ PHt, PHt


class SigmaPointEngine(Engine):
    """Sigma-point expectations; ``alternative=True`` uses Jacobian-based gradients."""

    def __init__(self, model, meas=None, rule="ct", alternative=False,
                 alpha=1.0, beta=2.0, kappa=0.0, order=3, dim=None):
        super().__init__(model, meas)
        n = model.state_dim if model is not None else dim
        self.rule = make_rule(rule, n, alpha=alpha, beta=beta, kappa=kappa, order=order)
        self.alternative = alternative
        self.name = rule.lower() + ("2" if alternative else "")
        if alternative:
            if model is not None and model.drift_jacobian is None:
                raise ConfigurationError(f"{self.name} engine needs the drift Jacobian")
            if meas is not None and not meas.is_linear and meas.h_jacobian is None:
                raise ConfigurationError(f"{self.name} engine needs the measurement Jacobian")

    def _points(self, m, P):
        L = cov_factor_batch(P, semidefinite=False)
        return L, sigma_points(self.rule, m, L)

    @staticmethod
    def _tt(t, X):
        return np.asarray(t)[..., None] if np.ndim(t) else t

    def drift_moments(self, m, P, t=0.0):
        L, X = self._points(m, P)
        tt = self._tt(t, X)
        w = self.rule.mean_weights
        fX = _finite(self.model.drift(X, tt), "drift at sigma points")
        Ef = np.einsum("s,bsi->bi", w, fX)
        if self.alternative:
            J = np.einsum("s,bsij->bij", w, _finite(self.model.drift_jacobian(X, tt),
                                                      "drift Jacobian at sigma points"))
        else:
            Y = np.einsum("s,sj,bsi->bji", w, self.rule.points, fX)  # sum W xi f^T
            J = np.swapaxes(_solve_lt(L, Y), -1, -2)
        return Ef, J

    def _energy_grads(self, L, vals, grads_x, gradients):
        w = self.rule.mean_weights
        xi = self.rule.points
        mean = np.einsum("s,bs->b", w, vals)
        if not gradients:
            return mean, None, None
        if self.alternative:
            gm = np.einsum("s,bsi->bi", w, grads_x)
            Y = np.einsum("s,si,bsj->bij", w, xi, grads_x)
            gP = 0.5 * _solve_lt(L, Y)
        else:
            v = np.einsum("s,bs,si->bi", w, vals, xi)
            gm = _solve_lt(L, v[..., None])[..., 0]
            n = xi.shape[1]
            outer = xi[:, :, None] * xi[:, None, :] - np.eye(n)
            Mx = np.einsum("s,bs,sij->bij", w, vals, outer)
            Z = _solve_lt(L, Mx)
            gP = 0.5 * np.swapaxes(_solve_lt(L, np.swapaxes(Z, -1, -2)), -1, -2)
        return mean, gm, _sym(gP)

    def e_terms(self, m, P, A, b, sigma_inv, t=0.0, gradients=True):
        L, X = self._points(m, P)
        tt = self._tt(t, X)
        r = (_finite(self._f_rows(X, tt), "drift at sigma points")
             + np.einsum("bij,bsj->bsi", A, X) - b[:, None, :])
        Wr = np.einsum("bij,bsj->bsi", sigma_inv, r)
        vals = 0.5 * np.einsum("bsi,bsi->bs", r, Wr)
        ex = None
        if gradients and self.alternative:
            G = self._F_rows(X, tt) + A[:, None]
            ex = np.einsum("bsji,bsj->bsi", G, Wr)
        return self._energy_grads(L, vals, ex, gradients)

    def _u_terms_nonlinear(self, meas, m, P, y, gradients):
        L, X = self._points(m, P)
        Ri = np.linalg.inv(meas.noise_cov)
        res = -meas.residual(y[:, None, :], meas.h(X))
        Rr = res @ Ri
        vals = 0.5 * np.einsum("bsi,bsi->bs", res, Rr)
        ux = None
        if gradients and self.alternative:
            ux = np.einsum("bsji,bsj->bsi", meas.jacobian(X), Rr)
        return self._energy_grads(L, vals, ux, gradients)

    def _measurement_moments_nonlinear(self, meas, m, P):
        L, X = self._points(m, P)
        hX = _finite(meas.h(X), "measurement function at sigma points")
        wm, wc = self.rule.mean_weights, self.rule.cov_weights
        # average angle components relative to the value at the first point
        ref = hX[:, :1, :]
        dh = -meas.residual(ref, hX)
        Eh = ref[:, 0, :] + np.einsum("s,bsi->bi", wm, dh)
        d = -meas.residual(Eh[:, None, :], hX)
        S = np.einsum("s,bsi,bsj->bij", wc, d, d)
        C = np.einsum("s,bsi,bsj->bij", wc, X - m[:, None, :], d)
        if meas.angle_components:
            cols = list(meas.angle_components)
            Eh[:, cols] = wrap_angle(Eh[:, cols])
        return Eh, S, C


def make_engine(name, model, meas=None, alpha=1.0, beta=2.0, kappa=0.0, order=3, dim=None):
    """Construct an engine from its configuration string.

    ``model`` may be ``None`` for measurement-only use, in which case the
    state dimension ``dim`` is needed by sigma-point rules.
    """
    if isinstance(name, Engine):
        return name
    key = str(name).lower()
    if key == "analytic":
        return AnalyticEngine(model, meas)
    if key == "ext":
        return ExtEngine(model, meas)
    if key in ("ct", "ut", "gh", "ct2", "ut2", "gh2"):
        return SigmaPointEngine(model, meas, rule=key.rstrip("2"), alternative=key.endswith("2"),
                                alpha=alpha, beta=beta, kappa=kappa, order=order, dim=dim)
    raise ConfigurationError(f"unknown engine {name!r}; choose from {ENGINE_NAMES}")


# single-state convenience wrappers --------------------------------------

def _batch(state):
    return state.mean[None], state.cov[None]


def expected_drift(engine, model, state, t=0.0):
    engine = make_engine(engine, model)
    m, P = _batch(state)
    return engine.drift_moments(m, P, t)[0][0]


def expected_drift_jacobian(engine, model, state, t=0.0):
    engine = make_engine(engine, model)
    m, P = _batch(state)
    return engine.drift_moments(m, P, t)[1][0]


def _e_single(engine, ctx, state):
    engine = make_engine(engine, ctx.model)
    m, P = _batch(state)
    A = np.atleast_2d(np.asarray(ctx.A, dtype=float))[None]
    b = np.atleast_1d(np.asarray(ctx.b, dtype=float))[None]
    return engine.e_terms(m, P, A, b, ctx.sigma_inv[None], ctx.t)


def e_mean(engine, ctx, state):
    return float(_e_single(engine, ctx, state)[0][0])


def grad_m_e(engine, ctx, state):
    return _e_single(engine, ctx, state)[1][0]


def grad_P_e(engine, ctx, state):
    return _e_single(engine, ctx, state)[2][0]


def _u_single(engine, meas, state, y, model=None):
    if not hasattr(engine, "u_terms"):
        engine = make_engine(engine, model, meas, dim=state.dim)
    m, P = _batch(state)
    return engine.u_terms(meas, m, P, np.atleast_1d(np.asarray(y, dtype=float))[None])


def u_mean(engine, meas, state, y, model=None):
    return float(_u_single(engine, meas, state, y, model)[0][0])


def grad_m_u(engine, meas, state, y, model=None):
    return _u_single(engine, meas, state, y, model)[1][0]


def grad_P_u(engine, meas, state, y, model=None):
    return _u_single(engine, meas, state, y, model)[2][0]


def integrand_gradients(g, state, rule, g_x=None):
    """Mean and covariance gradients of ``E[g(x)]`` for a generic scalar integrand.

    Without ``g_x`` the Stein-type forms ``P^{-1} E[g (x - m)]`` and
    ``1/2 P^{-1} E[g ((x - m)(x - m)^T - P)] P^{-1}`` are evaluated with the
    rule; with ``g_x`` the Jacobian forms ``E[g_x]`` and
    ``1/2 P^{-1} E[(x - m) g_x^T]`` (symmetrized) are used instead.
    """
    m, P = _batch(state)
    L = cov_factor_batch(P, semidefinite=False)
    X = sigma_points(rule, m, L)
    w, xi = rule.mean_weights, rule.points
    vals = np.asarray(g(X[0]), dtype=float)[None]
    mean = float(np.dot(w, vals[0]))
    if g_x is None:
        v = np.einsum("s,bs,si->bi", w, vals, xi)
        gm = _solve_lt(L, v[..., None])[..., 0]
        outer = xi[:, :, None] * xi[:, None, :] - np.eye(xi.shape[1])
        Z = _solve_lt(L, np.einsum("s,bs,sij->bij", w, vals, outer))
        gP = 0.5 * np.swapaxes(_solve_lt(L, np.swapaxes(Z, -1, -2)), -1, -2)
    else:
        gx = np.asarray(g_x(X[0]), dtype=float).reshape(1, len(w), -1)
        gm = np.einsum("s,bsi->bi", w, gx)
        gP = 0.5 * _solve_lt(L, np.einsum("s,si,bsj->bij", w, xi, gx))
    return mean, gm[0], _sym(gP)[0]
