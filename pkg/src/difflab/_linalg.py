"""Small dense linear-algebra helpers shared by the numerical modules."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import NumericalError


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def sqrtm_psd(a):
    """Principal square root of a symmetric positive semi-definite matrix."""
    w, q = np.linalg.eigh(symmetrize(a))
    w = np.clip(w, 0.0, None)
    return symmetrize((q * np.sqrt(w)) @ q.T)


def spd_factor(a, what="matrix", time=None):
    """Cholesky factor of an SPD matrix; NumericalError if it is not SPD."""
    try:
        return cho_factor(symmetrize(a), lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        at = f" at t={time!r}" if time is not None else ""
        raise NumericalError(f"{what} is singular or not positive definite{at}", time=time) from None


def spd_solve(factor, b):
    """Solve A x = b for rows or columns: ``b`` of shape (d,) or (d, k)."""
    return cho_solve(factor, b, check_finite=False)


def gaussian_logpdf(x, mean, factor):
    """log N(x; mean, A) for x of shape (m, d) given the Cholesky factor of A."""
    x = np.atleast_2d(x)
    diff = x - mean
    sol = spd_solve(factor, diff.T).T
    d = x.shape[1]
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return -0.5 * (np.einsum("ij,ij->i", diff, sol) + logdet + d * np.log(2.0 * np.pi))


def rk4(rhs, y, t0, t1, m):
    """Classical fourth-order Runge-Kutta with ``m`` equal steps from t0 to t1."""
    dt = (t1 - t0) / m
    for k in range(m):
        t = t0 + k * dt
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y
