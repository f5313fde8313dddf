"""Type II Gaussian smoother and its export to variational parameters.

With ``J = E_f[F_x]`` cached by the filter and ``M = J + Sigma P_f^{-1}`` the
smoother solves backward in time

    dm_s/dt = E_f[f] + M (m_s - m_f),
    dP_s/dt = M P_s + P_s M^T - Sigma,

starting from the filter posterior at the final time. The change of
variables ``lambda = -P_f^{-1}(m_s - m_f)``, ``Psi = -(P_f^{-1} - P_s^{-1}) / 2``
turns the smoother into a point of the variational parameterization, which
is how the VGS is initialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefinite
from .models import effective_diffusion, stochastic_block
from .odeint import GridFunction, hermite_mid, sweep_affine, sweep_lyapunov


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _spd_inverse(P, what, grid=None, index_map=None):
    """Batched inverse through Cholesky factors; names the first failing node."""
    try:
        C = np.linalg.cholesky(_sym(P))
    except np.linalg.LinAlgError:
        bad = next(i for i in range(P.shape[0]) if not _is_pd(P[i]))
        node = bad if index_map is None else index_map(bad)
        where = f" at t={grid.times[node]:g}" if grid is not None else ""
        raise NotPositiveDefinite(f"{what} is not invertible{where} (node {node})") from None
    eye = np.broadcast_to(np.eye(P.shape[-1]), P.shape)
    Ci = np.linalg.solve(C, eye)
    return np.swapaxes(Ci, -1, -2) @ Ci


def _is_pd(P):
    try:
        np.linalg.cholesky(_sym(P))
        return True
    except np.linalg.LinAlgError:
        return False


def _sigma_gf(model, grid):
    post = np.stack([effective_diffusion(model, t) for t in grid.times])
    mid = np.stack([effective_diffusion(model, t) for t in grid.mid_times])
    return GridFunction(grid, post, post, mid)


@dataclass
class SmootherTrajectory:
    """Smoothed moments with a reference to the filter pass that produced them."""

    m: GridFunction
    P: GridFunction
    filter: object
    scheme: str

    @property
    def m_s(self):
        return self.m

    @property
    def P_s(self):
        return self.P

    @property
    def grid(self):
        return self.m.grid


@dataclass
class VariationalInit:
    """Variational parameters and Lagrange functions from the change of variables."""

    A: GridFunction
    b: GridFunction
    lam: GridFunction
    psi: GridFunction
    m0: np.ndarray = None
    P0: np.ndarray = None

    @property
    def lambda_(self):
        return self.lam


def _filter_inverse(ft):
    grid = ft.grid
    Pf_inv = ft.P.map(lambda P: _spd_inverse(P, "filter covariance", grid))
    return Pf_inv


def smooth_type2(ft, model, scheme=None):
    """Backward Type II smoother on the filter grid."""
    grid = ft.grid
    Sigma = _sigma_gf(model, grid)
    Pf_inv = _filter_inverse(ft)
    M = ft.J.combine(Sigma.combine(Pf_inv, np.matmul), np.add)
    c = ft.Ef.combine(M.combine(ft.m, lambda A, x: np.einsum("...ij,...j->...i", A, x)),
                      np.subtract)
    negS = Sigma.map(np.negative)
    mK, PK = ft.m.post[-1], ft.P.post[-1]
    ms, _ = sweep_affine(M, c, mK, "backward")
    Ps, _ = sweep_lyapunov(M, negS, PK, "backward")
    Ps = _sym(Ps)
    h = grid.step

    def dm(M, c, x):
        return np.einsum("...ij,...j->...i", M, x) + c

    def dPs(M, P, S):
        MP = M @ P
        return MP + np.swapaxes(MP, -1, -2) - S

    m_mid = hermite_mid(ms, ms, dm(M.post, c.post, ms), dm(M.pre, c.pre, ms), h)
    P_mid = _sym(hermite_mid(Ps, Ps, dPs(M.post, Ps, Sigma.post), dPs(M.pre, Ps, Sigma.pre), h))
    m_gf = GridFunction(grid, ms, ms.copy(), m_mid)
    P_gf = GridFunction(grid, Ps, Ps.copy(), P_mid)
    return SmootherTrajectory(m_gf, P_gf, ft, scheme or ft.scheme)


def export_variational(ft, st, model):
    """Variational parameters ``(A, b)`` and ``(lambda, Psi)`` implied by the smoother.

    For models with a singular partition, ``A`` and ``b`` are restricted to
    the rows of the stochastic block.
    """
    grid = ft.grid
    Pf_inv = _filter_inverse(ft)
    Ps_inv = st.P.map(lambda P: _spd_inverse(P, "smoother covariance", grid))
    Sigma = _sigma_gf(model, grid)
    rows, _ = stochastic_block(model)

    def mv(A, x):
        return np.einsum("...ij,...j->...i", A, x)

    dmsf = st.m.combine(ft.m, np.subtract)
    lam = Pf_inv.combine(dmsf, lambda Pi, d: -mv(Pi, d))
    psi = Pf_inv.combine(Ps_inv, lambda a, b: _sym(-0.5 * (a - b)))
    SPsi = Sigma.combine(psi, np.matmul)
    A_full = ft.J.combine(SPsi, lambda J, SP: -J + 2.0 * SP)
    Jd = ft.J.combine(dmsf, mv)
    b_full = GridFunction(
        grid,
        *(Ef + jd + mv(A, ms) - mv(S, lm) for Ef, jd, A, ms, S, lm in zip(
            (ft.Ef.post, ft.Ef.pre, ft.Ef.mid), (Jd.post, Jd.pre, Jd.mid),
            (A_full.post, A_full.pre, A_full.mid), (st.m.post, st.m.pre, st.m.mid),
            (Sigma.post, Sigma.pre, Sigma.mid), (lam.post, lam.pre, lam.mid))))
    A = A_full.map(lambda a: a[..., rows, :].copy())
    b = b_full.map(lambda v: v[..., rows].copy())
    return VariationalInit(A, b, lam, psi, st.m.post[0].copy(), st.P.post[0].copy())


def run_gfgs(model, meas, records, grid, prior, scheme="ext", **engine_opts):
    """Filter, smooth and export in one call; returns ``(ft, st, init)``."""
    from .cd_filter import run_filter

    ft = run_filter(model, meas, records, grid, prior, scheme, **engine_opts)
    st = smooth_type2(ft, model)
    return ft, st, export_variational(ft, st, model)
