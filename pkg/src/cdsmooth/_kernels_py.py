"""Pure-Python RK4 sweeps for linear time-varying moment equations.

Both sweeps run over ``K`` intervals in traversal order. Coefficients are
given at the start (``a``), midpoint (``m``) and end (``b``) of each
interval; ``h`` is the signed step. ``jumps`` (``K + 1`` rows, optional) is
added to the state on arrival at each node; the returned ``arrive`` holds
values before the jump and ``depart`` values after it.
"""

import numpy as np


def affine_rk4(Ma, Mm, Mb, ca, cm, cb, y0, h, jumps=None):
    """Integrate ``dy/dt = M(t) y + c(t)``."""
    K, n = ca.shape
    arrive = np.empty((K + 1, n))
    depart = np.empty((K + 1, n))
    y = np.array(y0, dtype=float)
    arrive[0] = y
    if jumps is not None:
        y = y + jumps[0]
    depart[0] = y
    h2 = 0.5 * h
    for k in range(K):
        k1 = Ma[k] @ y + ca[k]
        k2 = Mm[k] @ (y + h2 * k1) + cm[k]
        k3 = Mm[k] @ (y + h2 * k2) + cm[k]
        k4 = Mb[k] @ (y + h * k3) + cb[k]
        y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        arrive[k + 1] = y
        if jumps is not None:
            y = y + jumps[k + 1]
        depart[k + 1] = y
    return arrive, depart


def _lyap(M, Y, S):
    MY = M @ Y
    return MY + MY.T + S


def lyap_rk4(Ma, Mm, Mb, Sa, Sm, Sb, Y0, h, jumps=None):
    """Integrate ``dY/dt = M Y + Y M^T + S`` keeping ``Y`` symmetric.

    ``Y`` must be symmetric, which makes ``(M Y)^T = Y M^T``.
    """
    K = Sa.shape[0]
    n = Y0.shape[0]
    arrive = np.empty((K + 1, n, n))
    depart = np.empty((K + 1, n, n))
    Y = np.array(Y0, dtype=float)
    arrive[0] = Y
    if jumps is not None:
        Y = Y + jumps[0]
    depart[0] = Y
    h2 = 0.5 * h
    for k in range(K):
        k1 = _lyap(Ma[k], Y, Sa[k])
        k2 = _lyap(Mm[k], Y + h2 * k1, Sm[k])
        k3 = _lyap(Mm[k], Y + h2 * k2, Sm[k])
        k4 = _lyap(Mb[k], Y + h * k3, Sb[k])
        Y = Y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        Y = 0.5 * (Y + Y.T)
        arrive[k + 1] = Y
        if jumps is not None:
            Y = Y + jumps[k + 1]
        depart[k + 1] = Y
    return arrive, depart
