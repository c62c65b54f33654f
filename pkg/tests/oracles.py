"""Independent reference computations used as test oracles.

Nothing here imports difflab numerics: the references are written from the
defining equations with plain numpy/scipy so that a shared bug cannot make
both sides agree.
"""
import math

import numpy as np
from scipy.integrate import solve_ivp

J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def rotation_drift(t, decay=(1.0, 2.0), omega1=0.3):
    return -0.5 * np.diag(decay) + omega1 * t * J2


ROTATION_NOISE = np.diag([1.0, 0.5])

# U and Sigma of the rotation-plus-decay process (decay (1, 2), rate 0.3 t,
# g = diag(1, 0.5)) from scipy DOP853 at rtol 1e-13.  Frozen values.
ROTATION_U = {
    1.0: np.array([[0.600540663646988, 0.06540371038796922],
                   [-0.07725256282929209, 0.3631353696818205]]),
    2.0: np.array([[0.31762325375968553, 0.10957795576745066],
                   [-0.15325836653708394, 0.10387567493227202]]),
}
ROTATION_SIGMA = {
    1.0: np.array([[0.6275974831972297, -0.04002620601946077],
                   [-0.04002620601946077, 0.11197333891108804]]),
    2.0: np.array([[0.7935680469685197, -0.16325556664161325],
                   [-0.16325556664161325, 0.17659544492015902]]),
}


def rk4_matrix_ode(rhs, y0, t0, t1, n):
    """Classic RK4 with ``n`` uniform steps; ``y`` may be any array."""
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / n
    for k in range(n):
        t = t0 + k * h
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def propagator_and_covariance(f, D, t1, rtol=1e-12):
    """U(t1) and Sigma(t1) from dU = f U, dSigma = f Sigma + Sigma f^T + D (scipy)."""
    d = np.asarray(D(0.0)).shape[0]

    def rhs(t, y):
        U = y[: d * d].reshape(d, d)
        S = y[d * d:].reshape(d, d)
        F = f(t)
        return np.concatenate([(F @ U).ravel(), (F @ S + S @ F.T + D(t)).ravel()])

    y0 = np.concatenate([np.eye(d).ravel(), np.zeros(d * d)])
    sol = solve_ivp(rhs, (0.0, t1), y0, method="DOP853", rtol=rtol, atol=1e-14)
    y = sol.y[:, -1]
    return y[: d * d].reshape(d, d), y[d * d:].reshape(d, d)


def series_expm(A, terms=30):
    """Truncated Taylor series of exp(A)."""
    A = np.asarray(A, dtype=float)
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


def plain_alpha(t, rate=1.0):
    return math.exp(-rate * t)


def plain_backward(x0, xT, t, T, rate=1.0):
    """sqrt(a_t) x0 + sqrt((1 - a_t)/(1 - a_T)) xT for alpha = exp(-rate t)."""
    a_t, a_T = plain_alpha(t, rate), plain_alpha(T, rate)
    return math.sqrt(a_t) * np.asarray(x0) + math.sqrt((1 - a_t) / (1 - a_T)) * np.asarray(xT)


def euler_maruyama(f, g, x0, T, n_steps, n_paths, rng):
    """Plain EM ensemble at the final time, vectorized over paths."""
    x = np.tile(np.asarray(x0, dtype=float), (n_paths, 1))
    d = x.shape[1]
    h = T / n_steps
    for k in range(n_steps):
        t = k * h
        x = x + h * x @ f(t).T + math.sqrt(h) * rng.standard_normal((n_paths, d)) @ g(t).T
    return x


def gaussian_logpdf(x, mean, cov):
    """log N(x; mean, cov) via explicit inverse and determinant."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    diff = x - mean
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (np.einsum("ij,jk,ik->i", diff, inv, diff) + logdet + d * math.log(2 * math.pi))


def central_gradient(fn, x, h):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = np.empty_like(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        g[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g
