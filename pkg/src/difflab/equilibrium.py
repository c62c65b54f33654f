"""
Equilibrium and non-equilibrium diagnostics for linear diffusions.

Covers the antisymmetric matrix Q with f Q + Q f^T = (f D - D f^T) / 2, the
stationary covariance, probability currents of the exact Gaussian marginal,
the divergence-free circulating current, and the spectral description of
U(t) in a (possibly rotating) eigenbasis of D(t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError, NumericalError
from .evolution import build_evolution
from .process import RotatingDiagonal, ddim_spec, planar_rotation
from ._linalg import gaussian_logpdf, rk4, spd_factor, symmetrize

MAX_DIMENSION = 64


@dataclass
class EquilibriumDiagnostics:
    Q: np.ndarray
    sylvester_residual: float
    stationary_Sigma: np.ndarray | None = None
    current_probes: list = field(default_factory=list)


def _sylvester_operator(f):
    """Row-major vectorization of X -> f X + X f^T."""
    d = f.shape[0]
    eye = np.eye(d)
    return np.kron(f, eye) + np.kron(eye, f)


def _antisymmetric_basis(d):
    cols = []
    for i in range(d):
        for j in range(i + 1, d):
            E = np.zeros((d, d))
            E[i, j], E[j, i] = 1.0, -1.0
            cols.append(E.ravel() / math.sqrt(2.0))
    return np.array(cols).T.reshape(d * d, len(cols))


def _check_square(f, D):
    f = np.asarray(f, dtype=float)
    D = np.asarray(D, dtype=float)
    if f.ndim != 2 or f.shape[0] != f.shape[1] or D.shape != f.shape:
        raise DomainError("f and D must be square matrices of equal size")
    if f.shape[0] > MAX_DIMENSION:
        raise DomainError(f"dense Sylvester solves are limited to d <= {MAX_DIMENSION}")
    return f, D


def sylvester_residual(f, D, Q):
    """|| f Q + Q f^T - (f D - D f^T) / 2 ||_F."""
    return float(np.linalg.norm(f @ Q + Q @ f.T - 0.5 * (f @ D - D @ f.T)))


def solve_Q(f, D, tol=1e-12):
    """Antisymmetric Q solving f Q + Q f^T = (f D - D f^T) / 2.

    The equation is restricted to the antisymmetric subspace, where the
    operator X -> f X + X f^T has eigenvalues mu_i + mu_j (i < j) for the
    eigenvalues mu of f.  A vanishing pair sum makes the solve singular.
    """
    f, D = _check_square(f, D)
    d = f.shape[0]
    if d == 1:
        Q = np.zeros((1, 1))
        return EquilibriumDiagnostics(Q, sylvester_residual(f, D, Q))
    mu = np.linalg.eigvals(f)
    scale = 1.0 + np.max(np.abs(mu))
    for i in range(d):
        for j in range(i + 1, d):
            if abs(mu[i] + mu[j]) <= tol * scale:
                raise NumericalError(
                    f"Sylvester operator is singular on antisymmetric matrices: "
                    f"eigenvalues {mu[i]:.6g} and {mu[j]:.6g} of f sum to zero"
                )
    B = _antisymmetric_basis(d)
    L = B.T @ _sylvester_operator(f) @ B
    rhs = B.T @ (0.5 * (f @ D - D @ f.T)).ravel()
    coef = np.linalg.solve(L, rhs)
    Q = (B @ coef).reshape(d, d)
    Q = 0.5 * (Q - Q.T)
    return EquilibriumDiagnostics(Q, sylvester_residual(f, D, Q))


def stationary_sigma(f, D):
    """Solve f Sigma + Sigma f^T = -D for a Hurwitz f."""
    f, D = _check_square(f, D)
    mu = np.linalg.eigvals(f)
    if np.max(mu.real) >= 0:
        raise DomainError(f"f is not Hurwitz (max real eigenvalue {np.max(mu.real):.6g})")
    d = f.shape[0]
    S = np.linalg.solve(_sylvester_operator(f), -D.ravel()).reshape(d, d)
    return symmetrize(S)


def diagnose(f, D, probes=()):
    """Q, residual, stationary covariance and circulating currents at ``probes``."""
    diag = solve_Q(f, D)
    S = stationary_sigma(f, D)
    diag.stationary_Sigma = S
    pts = np.atleast_2d(np.asarray(probes, dtype=float)) if len(probes) else np.zeros((0, f.shape[0]))
    if pts.shape[0]:
        Jc = circulating_current(diag.Q, S, pts)
        diag.current_probes = [(x, None, jc) for x, jc in zip(pts, Jc)]
    return diag


# ---------------------------------------------------------------------------
# currents
# ---------------------------------------------------------------------------

@dataclass
class Current:
    """Probability current split into drift and diffusive parts.

    Iterating yields ``(J, drift, diffusive)``; ``underflow`` flags points
    where p underflowed and the current was set to zero.
    """

    J: np.ndarray
    drift: np.ndarray
    diffusive: np.ndarray
    underflow: np.ndarray

    def __iter__(self):
        return iter((self.J, self.drift, self.diffusive))


def _marginal(tables, x0, t):
    if t <= 0:
        raise NumericalError("Sigma(0) = 0; the current needs t > 0", time=t)
    mean = tables.K(t, 0.0) @ np.asarray(x0, dtype=float)
    Sigma = tables.Sigma(t)
    return mean, Sigma, spd_factor(Sigma, "Sigma", t)


def probability_current(spec, tables, x0, x, t):
    """J = p (f x - (1/2) D grad log p) for the Gaussian started at ``x0``.

    ``x`` may be a batch of shape (m, d).  Uses the exact score.
    """
    from .score import ScoreModel, exact_score

    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean, Sigma, fac = _marginal(tables, x0, t)
    p = np.exp(gaussian_logpdf(x, mean, fac))
    under = p == 0.0
    grad = exact_score(ScoreModel.single(x0, tables), x, t)
    f, D = spec.f(t), spec.D(t)
    drift = p[:, None] * (x @ f.T)
    diffusive = -0.5 * p[:, None] * (grad @ D.T)
    drift[under] = 0.0
    diffusive[under] = 0.0
    return Current(drift + diffusive, drift, diffusive, under)


def current_closed_form(spec, tables, x0, x, t, form="general"):
    """Closed-form current of the Gaussian marginal.

    ``form='general'`` is p [f x + (1/2) D Sigma^{-1} (x - K x0)], valid for
    any linear process.  ``form='ddim'`` is
    -(1/2) p D [(I - Sigma^{-1}) x + Sigma^{-1} K x0], which assumes
    f = -D/2.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean, Sigma, fac = _marginal(tables, x0, t)
    p = np.exp(gaussian_logpdf(x, mean, fac))
    Sinv = np.linalg.inv(Sigma)
    D = spec.D(t)
    if form == "general":
        return p[:, None] * (x @ spec.f(t).T + 0.5 * (x - mean) @ (D @ Sinv).T)
    if form == "ddim":
        if not spec.is_ddim:
            raise ContractError("the DDIM current form needs f = -D/2")
        d = spec.dimension
        inner = x @ (np.eye(d) - Sinv).T + Sinv @ mean
        return -0.5 * p[:, None] * (inner @ D.T)
    raise DomainError(f"unknown current form {form!r}")


def circulating_current(Q, sigma, x):
    """J_c = -Q Sigma^{-1} x rho(x) with rho = N(0, Sigma)."""
    Q = np.asarray(Q, dtype=float)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    fac = spd_factor(sigma, "stationary Sigma")
    rho = np.exp(gaussian_logpdf(x, np.zeros(x.shape[1]), fac))
    Sinv_x = np.linalg.solve(np.asarray(sigma, dtype=float), x.T).T
    J = -rho[:, None] * (Sinv_x @ Q.T)
    return J[0] if single else J


def divergence(field_fn, x, h=1e-4):
    """Central finite-difference divergence of a vector field at points ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    div = np.zeros(x.shape[0])
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        div += (np.atleast_2d(field_fn(x + e))[:, i] - np.atleast_2d(field_fn(x - e))[:, i]) / (2 * h)
    return div


# ---------------------------------------------------------------------------
# spectral basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralBasis:
    """Orthonormal eigenbasis of D(t).

    ``vectors(t)`` returns the basis as columns, ``eigenvalues(t)`` the
    matching eigenvalues and ``connection(t)`` the antisymmetric matrix
    e_mn = d_n^T (d d_m / dt).
    """

    vectors: Callable
    eigenvalues: Callable
    connection: Callable
    dimension: int

    def check(self, times, tol=1e-10):
        for t in times:
            B = self.vectors(t)
            if np.max(np.abs(B.T @ B - np.eye(self.dimension))) > tol:
                raise ContractError(f"basis is not orthonormal at t={t!r}")
            e = self.connection(t)
            if np.max(np.abs(e + e.T)) > tol:
                raise ContractError(f"connection is not antisymmetric at t={t!r}")

    def diffusion(self, t):
        B = self.vectors(t)
        return (B * self.eigenvalues(t)) @ B.T


def planar_rotation_basis(eigenvalues, omega):
    """d_m(t) = R(omega t) e_m with constant eigenvalues.

    R rotates the (0, 1) plane, so e_{01} = omega and e_{10} = -omega.
    """
    lam = np.array(eigenvalues, dtype=float)
    d = lam.size
    gen = np.zeros((d, d))
    gen[1, 0], gen[0, 1] = 1.0, -1.0   # dR/dtheta = R gen
    conn = float(omega) * gen.T        # e_mn = omega gen[n, m]
    conn = 0.5 * (conn - conn.T)
    return SpectralBasis(
        vectors=lambda t: planar_rotation(float(omega) * t, d),
        eigenvalues=lambda t: lam.copy(),
        connection=lambda t: conn.copy(),
        dimension=d,
    )


def fixed_basis(eigenvalue_fn, vectors=None, dimension=None):
    """Rigid basis (zero connection) with time-dependent eigenvalues."""
    d = dimension if vectors is None else np.asarray(vectors).shape[0]
    B = np.eye(d) if vectors is None else np.asarray(vectors, dtype=float)
    zero = np.zeros((d, d))
    return SpectralBasis(lambda t: B.copy(), lambda t: np.asarray(eigenvalue_fn(t), dtype=float),
                         lambda t: zero.copy(), d)


def _decay_exponents(basis, times):
    """int_0^t lambda_m dt' on the grid by Simpson's rule per interval."""
    lam = np.stack([basis.eigenvalues(t) for t in times])
    mids = np.stack([basis.eigenvalues(0.5 * (a + b)) for a, b in zip(times[:-1], times[1:])])
    h = np.diff(times)[:, None]
    panels = h / 6.0 * (lam[:-1] + 4.0 * mids + lam[1:])
    return np.concatenate([np.zeros((1, lam.shape[1])), np.cumsum(panels, axis=0)])


def rigid_basis_evolution(basis, grid):
    """u_m(t) = exp(-(1/2) int_0^t lambda_m) for a basis with zero connection.

    Returns an array of shape (N + 1, d).
    """
    times = grid.times
    for t in times:
        if np.any(basis.connection(t) != 0.0):
            raise ContractError(f"rigid-basis solution needs a zero connection (t={t!r})")
    return np.exp(-0.5 * _decay_exponents(basis, times))


@dataclass(frozen=True, eq=False)
class PerturbationResult:
    times: np.ndarray
    u0: np.ndarray           # (N + 1, d)
    u1: np.ndarray           # (N + 1, d, d)
    antisymmetric: np.ndarray  # predicted (D Sigma - Sigma D) in the basis, (N + 1, d, d)
    variant: str


def rotating_basis_perturbation(basis, grid, variant="consistent"):
    """First-order correction to U in a rotating eigenbasis of D.

    The zeroth order is u0_m = exp(-(1/2) int lambda_m).  The first-order
    coefficients follow

    * ``consistent``: d u1_ab/dt = -(1/2) lambda_a u1_ab + (u0_b - u0_a) e_ab,
      the linearization of the full coefficient equation; the prediction is
      (lambda_b - lambda_a)(u0_a u1_ba + u0_b u1_ab).
    * ``literal``: d u1_ab/dt = (u0_b - u0_a) e_ab without the decay term.
      u1 is then exactly symmetric and the prediction is
      (lambda_b - lambda_a)(u0_a + u0_b) u1_ab.

    Only the consistent variant converges at second order in the rotation
    rate; the literal one keeps an O(omega) error.
    """
    if variant not in ("consistent", "literal"):
        raise DomainError(f"unknown perturbation variant {variant!r}")
    times = grid.times
    d = basis.dimension
    decay = 1.0 if variant == "consistent" else 0.0

    def rhs(t, state):
        logu0, u1 = state[:, 0], state[:, 1:]
        lam = basis.eigenvalues(t)
        e = basis.connection(t)
        e = 0.5 * (e - e.T)
        u0 = np.exp(logu0)
        du1 = (u0[None, :] - u0[:, None]) * e - decay * 0.5 * lam[:, None] * u1
        return np.concatenate([(-0.5 * lam)[:, None], du1], axis=1)

    state = np.zeros((d, d + 1))
    u0 = np.ones((times.size, d))
    u1 = np.zeros((times.size, d, d))
    for i in range(times.size - 1):
        state = rk4(rhs, state, times[i], times[i + 1], 1)
        u0[i + 1] = np.exp(state[:, 0])
        u1[i + 1] = state[:, 1:]
    pred = np.empty_like(u1)
    for i, t in enumerate(times):
        lam = basis.eigenvalues(t)
        gap = lam[None, :] - lam[:, None]           # lambda_b - lambda_a
        if variant == "consistent":
            pred[i] = gap * (u0[i][:, None] * u1[i].T + u0[i][None, :] * u1[i])
        else:
            pred[i] = gap * (u0[i][:, None] + u0[i][None, :]) * u1[i]
    return PerturbationResult(times, u0, u1, pred, variant)


def rotating_diagonal_exact(eigenvalues, omega, grid, substeps=None):
    """(D Sigma - Sigma D) expressed in the rotating basis, from the full evolution.

    Builds the DDIM process with D(t) = R(omega t) diag(lambda) R(omega t)^T,
    tabulates U by the time-ordered product, sets Sigma = I - U U^T and
    projects the commutator onto the basis vectors.
    """
    noise = RotatingDiagonal(eigenvalues, omega)
    spec = ddim_spec(noise, grid.horizon, alpha_min=np.inf)
    table = build_evolution(spec, grid, substeps=substeps)
    d = noise.dimension
    out = np.empty((grid.times.size, d, d))
    for i, t in enumerate(grid.times):
        U = table.U[i]
        S = np.eye(d) - U @ U.T
        D = spec.D(t)
        B = planar_rotation(float(omega) * t, d)
        out[i] = B.T @ (D @ S - S @ D) @ B
    return out
