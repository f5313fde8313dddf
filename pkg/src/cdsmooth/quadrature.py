"""Sigma-point rules and Gaussian expectations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EvaluationError, NotPositiveDefinite, ResourceError

GH_POINT_CAP = 10 ** 5

# relative to trace(P) / n
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class SigmaRule:
    """Unit sigma points ``xi_i`` with mean and covariance weights."""

    dim: int
    points: np.ndarray
    mean_weights: np.ndarray
    cov_weights: np.ndarray
    label: str

    @property
    def size(self):
        return self.points.shape[0]


def cubature_rule(n):
    pts = np.sqrt(n) * np.vstack([np.eye(n), -np.eye(n)])
    w = np.full(2 * n, 1.0 / (2 * n))
    return SigmaRule(n, pts, w, w.copy(), "CT")


def unscented_rule(n, alpha=1.0, beta=2.0, kappa=0.0):
    lam = alpha ** 2 * (n + kappa) - n
    if n + lam <= 0:
        raise ConfigurationError(f"unscented rule needs n + lambda > 0 (got {n + lam})")
    c = np.sqrt(n + lam)
    pts = np.vstack([np.zeros((1, n)), c * np.eye(n), -c * np.eye(n)])
    wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
    wm[0] = lam / (n + lam)
    wc = wm.copy()
    wc[0] = wm[0] + 1.0 - alpha ** 2 + beta
    return SigmaRule(n, pts, wm, wc, f"UT({alpha:g},{beta:g},{kappa:g})")


def hermite_nodes(s):
    """Nodes and weights of the ``s``-point rule for the standard normal density.

    Golub-Welsch: eigen-decomposition of the Jacobi matrix of the
    probabilists' Hermite recurrence.
    """
    if s < 1:
        raise ConfigurationError("Gauss-Hermite order must be >= 1")
    off = np.sqrt(np.arange(1, s, dtype=float))
    J = np.diag(off, 1) + np.diag(off, -1)
    nodes, vecs = np.linalg.eigh(J)
    weights = vecs[0] ** 2
    # exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights / weights.sum()


def gauss_hermite_rule(n, s, cap=GH_POINT_CAP):
    count = s ** n
    if count > cap:
        raise ResourceError(f"Gauss-Hermite rule would need s^n = {count} points (cap {cap})")
    x, w = hermite_nodes(s)
    pts = np.array(list(itertools.product(x, repeat=n)), dtype=float).reshape(count, n)
    wts = np.array([np.prod(c) for c in itertools.product(w, repeat=n)])
    return SigmaRule(n, pts, wts, wts.copy(), f"GH({s})")


def make_rule(kind, n, alpha=1.0, beta=2.0, kappa=0.0, order=3):
    kind = kind.lower().rstrip("2")
    if kind == "ct":
        return cubature_rule(n)
    if kind == "ut":
        return unscented_rule(n, alpha, beta, kappa)
    if kind == "gh":
        return gauss_hermite_rule(n, order)
    raise ConfigurationError(f"unknown sigma-point rule {kind!r}")


def _semidefinite_cholesky(P):
    n = P.shape[0]
    scale = max(np.trace(P) / n, 0.0)
    tol = PIVOT_TOL * scale
    L = np.zeros_like(P)
    for j in range(n):
        d = P[j, j] - L[j, :j] @ L[j, :j]
        if d < -tol or not np.isfinite(d):
            return None
        if d <= tol:
            # zero pivot: the remaining column must vanish too
            col = P[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
            if np.any(np.abs(col) > np.sqrt(tol * scale) + tol):
                return None
            continue
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (P[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def cov_factor(P, semidefinite=True):
    """Lower-triangular ``L`` with ``L L^T = P``.

    Zero pivots are accepted when ``semidefinite`` is true, which yields
    degenerate sigma points on the support of ``P``. Otherwise (or if that
    fails) a diagonal jitter ladder is tried before raising
    :class:`NotPositiveDefinite`.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    if np.max(np.abs(P - P.T), initial=0.0) > 1e-9 * max(np.max(np.abs(P)), 1e-300):
        raise ConfigurationError("cov_factor needs a symmetric matrix")
    P = 0.5 * (P + P.T)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    if semidefinite:
        L = _semidefinite_cholesky(P)
        if L is not None:
            return L
    scale = max(np.trace(P) / n, np.finfo(float).tiny)
    for j in JITTER_LADDER[1:]:
        try:
            return np.linalg.cholesky(P + j * scale * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(f"cannot factor covariance even with jitter {JITTER_LADDER[-1]:g}",
                              jitter=JITTER_LADDER[-1] * scale)


def cov_factor_batch(P, semidefinite=False):
    """Batched :func:`cov_factor` over a stack ``(B, n, n)``."""
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        return np.stack([cov_factor(p, semidefinite=semidefinite) for p in P])


def sigma_points(rule, m, L):
    """Points ``m + L xi_i`` for batched ``m`` (B, n) and ``L`` (B, n, n) -> (B, S, n)."""
    return m[:, None, :] + np.einsum("bij,sj->bsi", L, rule.points)


def _check_finite(values, what):
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise EvaluationError(f"{what} returned a non-finite value at sigma point {tuple(idx[:2])}")


def expect(g, state, rule, weights="mean"):
    """``E[g(x)]`` under ``N(state.mean, state.cov)`` using a sigma-point rule.

    ``g`` must accept a stack of points ``(S, n)``.
    """
    L = cov_factor(state.cov)
    X = state.mean + rule.points @ L.T
    vals = np.asarray(g(X), dtype=float)
    _check_finite(vals[:, None] if vals.ndim == 1 else vals, "integrand")
    w = rule.mean_weights if weights == "mean" else rule.cov_weights
    return np.tensordot(w, vals, axes=(0, 0))


def expect_stat_jacobian(g, state, rule):
    """Statistical Jacobian ``sum_i W_i g(m + L xi_i) xi_i^T L^{-1}``."""
    L = cov_factor(state.cov, semidefinite=False)
    X = state.mean + rule.points @ L.T
    vals = np.atleast_2d(np.asarray(g(X), dtype=float).reshape(rule.size, -1))
    _check_finite(vals, "integrand")
    Y = np.einsum("s,si,sj->ij", rule.mean_weights, rule.points, vals)  # sum W xi g^T
    Z = np.linalg.solve(L.T, Y)  # L^{-T} sum W xi g^T
    return Z.T
