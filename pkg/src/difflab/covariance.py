"""
Covariance Sigma(t) of the forward process started from a point, and the
factor V(t) with Sigma = V V^T.

Three independent routes to Sigma are provided: quadrature of
U [int U^{-1} D U^{-T}] U^T, fourth-order integration of
dSigma/dt = D + f Sigma + Sigma f^T, and I - U U^T for DDIM processes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, NumericalError
from .evolution import EvolutionTable, build_evolution
from ._io import write_csv
from ._linalg import gaussian_logpdf, rk4, spd_factor, sqrtm_psd, symmetrize

SIGMA_METHODS = ("quadrature", "ode", "ddim-closed-form")


@dataclass(frozen=True, eq=False)
class CovarianceTrack:
    """Sigma(t_i) and optionally V(t_i) on a grid."""

    grid: object
    Sigma: np.ndarray
    method: str
    V: np.ndarray | None = None

    def __post_init__(self):
        self.Sigma.setflags(write=False)
        if self.V is not None:
            self.V.setflags(write=False)

    def with_V(self, V):
        return CovarianceTrack(self.grid, self.Sigma, self.method, V)

    def check(self, sym_tol=1e-12, eig_tol=1e-10, factor_tol=1e-6):
        """Raise NumericalError at the first grid time violating the track invariants."""
        S = self.Sigma
        norms = np.linalg.norm(S, axis=(1, 2))
        asym = np.linalg.norm(S - np.swapaxes(S, 1, 2), axis=(1, 2))
        bad = np.flatnonzero(asym > sym_tol * (1 + norms))
        if bad.size:
            t = self.grid.times[bad[0]]
            raise NumericalError(f"Sigma is not symmetric at t={t!r}", time=t)
        low = np.linalg.eigvalsh(symmetrize(S))[:, 0]
        bad = np.flatnonzero(low < -eig_tol)
        if bad.size:
            t = self.grid.times[bad[0]]
            raise NumericalError(f"Sigma has a negative eigenvalue {low[bad[0]]:.3e} at t={t!r}", time=t)
        if self.V is not None:
            gap = np.linalg.norm(self.V @ np.swapaxes(self.V, 1, 2) - S, axis=(1, 2))[1:]
            bad = np.flatnonzero(gap > factor_tol)
            if bad.size:
                t = self.grid.times[bad[0] + 1]
                raise NumericalError(f"V V^T deviates from Sigma by {gap[bad[0]]:.2e} at t={t!r}", time=t)

    def to_csv(self, path):
        """Write ``t, Sigma_00, ..., V_00, ...`` rows."""
        n, d, _ = self.Sigma.shape
        header = ["t"] + [f"Sigma_{i}{j}" for i in range(d) for j in range(d)]
        cols = [self.grid.times, self.Sigma.reshape(n, -1)]
        if self.V is not None:
            header += [f"V_{i}{j}" for i in range(d) for j in range(d)]
            cols.append(self.V.reshape(n, -1))
        write_csv(path, header, np.column_stack(cols))


def _D_derivative(spec, t, delta=None):
    """dD/dt by second-order finite differences, one-sided at the horizon ends."""
    T = spec.horizon
    delta = 1e-5 * T if delta is None else delta
    if t - delta < 0.0:
        return (-3 * spec.D(t) + 4 * spec.D(t + delta) - spec.D(t + 2 * delta)) / (2 * delta)
    if t + delta > T:
        return (3 * spec.D(t) - 4 * spec.D(t - delta) + spec.D(t - 2 * delta)) / (2 * delta)
    return (spec.D(t + delta) - spec.D(t - delta)) / (2 * delta)


def sigma_by_quadrature(table: EvolutionTable, spec=None, rule="corrected"):
    """Sigma(t) = U(t) [int_0^t U^{-1} D U^{-T} dt'] U(t)^T.

    Parameters
    ----------
    table : EvolutionTable
    spec : ProcessSpec, optional
        Defaults to ``table.spec``.
    rule : {"corrected", "trapezoid"}
        ``trapezoid`` is the composite trapezoid rule on the grid.
        ``corrected`` adds the endpoint-derivative correction
        (b - a)^2 / 12 (h'(a) - h'(b)) per interval, with
        h' = U^{-1} (dD/dt - f D - D f^T) U^{-T}; this lifts the rule to
        fourth order on smooth integrands.
    """
    spec = table.spec if spec is None else spec
    if rule not in ("corrected", "trapezoid"):
        raise DomainError(f"unknown quadrature rule {rule!r}")
    times = table.grid.times
    n = times.size
    Uinv = table.U_inv
    Ds = np.stack([spec.D(t) for t in times])
    h = Uinv @ Ds @ np.swapaxes(Uinv, 1, 2)
    dt = np.diff(times)[:, None, None]
    panels = 0.5 * dt * (h[:-1] + h[1:])
    if rule == "corrected":
        hp = np.empty_like(h)
        for i, t in enumerate(times):
            f = spec.f(t)
            inner = _D_derivative(spec, t) - f @ Ds[i] - Ds[i] @ f.T
            hp[i] = Uinv[i] @ inner @ Uinv[i].T
        panels = panels + dt * dt / 12.0 * (hp[:-1] - hp[1:])
    integral = np.concatenate([np.zeros((1,) + h.shape[1:]), np.cumsum(panels, axis=0)])
    S = symmetrize(table.U @ integral @ np.swapaxes(table.U, 1, 2))
    S[0] = 0.0
    return CovarianceTrack(table.grid, S, "quadrature")


def sigma_by_ode(spec, grid, substeps=None):
    """Integrate dSigma/dt = D + f Sigma + Sigma f^T from Sigma(0) = 0 with RK4.

    ``substeps`` per grid interval default to keeping the step at most T/2048.
    Raises NumericalError at the first time where Sigma loses symmetry,
    positive semi-definiteness or finiteness.
    """
    times = grid.times
    h = np.diff(times)
    if substeps is None:
        counts = np.maximum(1, np.ceil(h / (grid.horizon / 2048.0) * (1 - 1e-12)).astype(int))
    else:
        counts = np.full(h.size, int(substeps))

    def rhs(t, S):
        f = spec.f(t)
        return spec.D(t) + f @ S + S @ f.T

    d = spec.dimension
    S = np.zeros((times.size, d, d))
    for i in range(times.size - 1):
        nxt = rk4(rhs, S[i], times[i], times[i + 1], counts[i])
        if not np.all(np.isfinite(nxt)):
            raise NumericalError(f"Sigma ODE diverged at t={times[i + 1]!r}", time=times[i + 1])
        S[i + 1] = nxt
    track = CovarianceTrack(grid, S, "ode")
    track.check()
    return track


def sigma_ddim_closed_form(table: EvolutionTable):
    """Sigma(t) = I - U(t) U(t)^T; valid only when f = -D/2."""
    if not table.spec.is_ddim:
        raise ContractError(f"closed-form Sigma = I - U U^T requires a DDIM spec, got kind {table.spec.kind!r}")
    d = table.dimension
    S = symmetrize(np.eye(d) - table.U @ np.swapaxes(table.U, 1, 2))
    S[0] = 0.0
    return CovarianceTrack(table.grid, S, "ddim-closed-form")


def _v_rhs(spec):
    def rhs(t, V):
        try:
            Vinv = np.linalg.inv(V)
        except np.linalg.LinAlgError:
            raise NumericalError(f"V is singular at t={t!r}", time=t) from None
        return 0.5 * spec.D(t) @ Vinv.T + spec.f(t) @ V

    return rhs


def v_factor(spec, table, sigma, seed_time_index=1, method="auto", kappa=0.02):
    """Fill in V(t) with Sigma = V V^T.

    V at the seed index is the principal square root of Sigma there; V is
    then integrated by dV/dt = (1/2) D V^{-T} + f V in both directions with
    RK4.  Substeps are graded near t = 0, where the right side grows like
    t^{-1/2}: an interval starting at t uses at least h / (kappa t) substeps.
    V(0) is the zero matrix.

    ``method='closed-form'`` (the default for the plain-vanilla kind) returns
    V = sqrt(1 - alpha) I, which is what the ODE gives for that kind.
    """
    grid = table.grid
    times = grid.times
    n = times.size
    d = spec.dimension
    if method == "auto":
        method = "closed-form" if spec.kind == "ddim-plain-vanilla" else "ode"
    if method == "closed-form":
        if spec.kind != "ddim-plain-vanilla":
            raise ContractError("closed-form V requires a plain-vanilla DDIM spec")
        alpha = np.asarray(spec.schedule.alpha(times), dtype=float)
        root = np.sqrt(np.clip(1.0 - alpha, 0.0, None))
        root[0] = 0.0
        return sigma.with_V(root[:, None, None] * np.eye(d))
    if method != "ode":
        raise DomainError(f"unknown V method {method!r}")

    s = int(seed_time_index)
    if not 1 <= s < n:
        raise DomainError(f"seed_time_index must lie in [1, {n - 1}]")
    w = np.linalg.eigvalsh(symmetrize(sigma.Sigma[s]))
    if w[0] <= 0:
        raise NumericalError(f"Sigma is not positive definite at the seed time t={times[s]!r}", time=times[s])

    base = np.maximum(1, np.ceil(np.diff(times) / (grid.horizon / 2048.0) * (1 - 1e-12)).astype(int))
    rhs = _v_rhs(spec)
    V = np.zeros((n, d, d))
    V[s] = sqrtm_psd(sigma.Sigma[s])
    for i in range(s, n - 1):
        m = max(base[i], math.ceil((times[i + 1] - times[i]) / (kappa * times[i])))
        V[i + 1] = rk4(rhs, V[i], times[i], times[i + 1], m)
    for i in range(s, 1, -1):
        m = max(base[i - 1], math.ceil((times[i] - times[i - 1]) / (kappa * times[i - 1])))
        V[i - 1] = rk4(rhs, V[i], times[i], times[i - 1], m)
    if not np.all(np.isfinite(V)):
        bad = int(np.argmax(~np.all(np.isfinite(V.reshape(n, -1)), axis=1)))
        raise NumericalError(f"V integration failed at t={times[bad]!r}", time=times[bad])
    return sigma.with_V(V)


def v_identity_residual(spec, table, track, relative=False):
    """Max over grid times t > 0 of || U^{-1}(t) V(t) - (1/2) int_0^t U^{-1} D V^{-T} dt' ||_F.

    The integrand M = U^{-1} D V^{-T} grows like t^{-1/2} near 0, so the
    integral is taken in s = sqrt(t), where H(s) = 2 s M is smooth with
    H(0) = 2 D(0)^{1/2} and H is even in s (dH/ds = 0 at s = 0).  Panels use
    the trapezoid rule with the endpoint-derivative correction,
    dH/ds = 2 M + 4 t dM/dt.  With
    ``relative=True`` each residual is divided by 1 + ||U^{-1} V||_F.
    """
    times = table.grid.times
    Uinv, V = table.U_inv, track.V
    n = times.size
    H = np.empty_like(V)
    dH = np.empty_like(V)
    H[0] = 2.0 * sqrtm_psd(spec.D(0.0))
    dH[0] = 0.0
    for i in range(1, n):
        t = times[i]
        f, D = spec.f(t), spec.D(t)
        VinvT = np.linalg.inv(V[i]).T
        M = Uinv[i] @ D @ VinvT
        Vdot = 0.5 * D @ VinvT + f @ V[i]
        Mdot = Uinv[i] @ (_D_derivative(spec, t) - f @ D) @ VinvT - Uinv[i] @ D @ VinvT @ Vdot.T @ VinvT
        H[i] = 2.0 * math.sqrt(t) * M
        dH[i] = 2.0 * M + 4.0 * t * Mdot
    s = np.sqrt(times)
    ds = np.diff(s)[:, None, None]
    panels = 0.5 * ds * (H[:-1] + H[1:])
    panels += ds ** 2 / 12.0 * (dH[:-1] - dH[1:])
    integral = np.cumsum(panels, axis=0)
    lhs = Uinv[1:] @ V[1:]
    res = np.linalg.norm(lhs - 0.5 * integral, axis=(1, 2))
    if relative:
        res = res / (1.0 + np.linalg.norm(lhs, axis=(1, 2)))
    return float(np.max(res))


# ---------------------------------------------------------------------------
# Tables: U, Sigma and V together, with evaluation off the grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Tables:
    """Evolution table plus covariance track for one process.

    The ``*_at`` accessors return grid values when ``t`` is a grid time and
    otherwise propagate from the nearest earlier grid node (closed forms for
    the plain-vanilla kind).
    """

    spec: object
    evolution: EvolutionTable
    covariance: CovarianceTrack

    @property
    def grid(self):
        return self.evolution.grid

    @property
    def dimension(self):
        return self.spec.dimension

    @property
    def horizon(self):
        return self.spec.horizon

    def _scalar(self):
        return self.spec.kind == "ddim-plain-vanilla"

    def _alpha(self, t):
        if not (0.0 <= t <= self.horizon * (1 + 1e-12)):
            raise DomainError(f"time {t!r} outside [0, {self.horizon}]")
        return float(self.spec.schedule.alpha(t))

    def U(self, t):
        if self._scalar():
            return math.sqrt(self._alpha(t)) * np.eye(self.dimension)
        return self.evolution.U_at(t, interpolate=True)

    def U_inv(self, t):
        if self._scalar():
            return np.eye(self.dimension) / math.sqrt(self._alpha(t))
        return self.evolution.U_inv_at(t, interpolate=True)

    def K(self, t, t_prime):
        if t == t_prime:
            return np.eye(self.dimension)
        if self._scalar():
            return math.sqrt(self._alpha(t) / self._alpha(t_prime)) * np.eye(self.dimension)
        return self.U(t) @ self.U_inv(t_prime)

    def _left(self, t):
        grid = self.grid
        if not (0.0 <= t <= grid.horizon * (1 + 1e-12)):
            raise DomainError(f"time {t!r} outside [0, {grid.horizon}]")
        i = grid.index_of(t)
        if i is not None:
            return i, True
        return int(np.searchsorted(grid.times, t)) - 1, False

    def Sigma(self, t):
        if self._scalar():
            return (1.0 - self._alpha(t)) * np.eye(self.dimension)
        i, exact = self._left(t)
        if exact:
            return self.covariance.Sigma[i]
        t0 = self.grid.times[i]
        m = max(1, math.ceil(8 * (t - t0) / (self.grid.times[i + 1] - t0)))
        spec = self.spec

        def rhs(s, S):
            f = spec.f(s)
            return spec.D(s) + f @ S + S @ f.T

        return symmetrize(rk4(rhs, self.covariance.Sigma[i], t0, t, m))

    def V(self, t):
        if self.covariance.V is None:
            raise ContractError("covariance track has no V factor")
        if self._scalar():
            return math.sqrt(1.0 - self._alpha(t)) * np.eye(self.dimension)
        i, exact = self._left(t)
        if exact:
            return self.covariance.V[i]
        t0, t1 = self.grid.times[i], self.grid.times[i + 1]
        if i == 0:
            # integrate back from the right node, avoiding the singular start
            m = max(8, math.ceil((t1 - t) / (0.02 * t)))
            return rk4(_v_rhs(self.spec), self.covariance.V[1], t1, t, m)
        m = max(8, math.ceil((t - t0) / (0.02 * t0)))
        return rk4(_v_rhs(self.spec), self.covariance.V[i], t0, t, m)

    def f(self, t):
        return self.spec.f(t)

    def D(self, t):
        return self.spec.D(t)

    def to_csv(self, path):
        self.covariance.to_csv(path)


def make_tables(spec, grid, sigma_method="auto", with_V=True, substeps=None):
    """Build U, Sigma and (optionally) V for ``spec`` on ``grid``.

    ``sigma_method='auto'`` uses the DDIM closed form for DDIM kinds and the
    corrected quadrature otherwise.
    """
    evo = build_evolution(spec, grid, substeps=substeps)
    if sigma_method == "auto":
        sigma_method = "ddim-closed-form" if spec.is_ddim else "quadrature"
    if sigma_method == "ddim-closed-form":
        if spec.kind == "ddim-plain-vanilla":
            alpha = np.asarray(spec.schedule.alpha(grid.times), dtype=float)
            S = (1.0 - alpha)[:, None, None] * np.eye(spec.dimension)
            S[0] = 0.0
            track = CovarianceTrack(grid, S, "ddim-closed-form")
        else:
            track = sigma_ddim_closed_form(evo)
    elif sigma_method == "quadrature":
        track = sigma_by_quadrature(evo, spec)
    elif sigma_method == "ode":
        track = sigma_by_ode(spec, grid, substeps)
    else:
        raise DomainError(f"unknown sigma method {sigma_method!r}")
    if with_V:
        track = v_factor(spec, evo, track)
    return Tables(spec, evo, track)


# ---------------------------------------------------------------------------
# Fokker-Planck residual on the exact Gaussian
# ---------------------------------------------------------------------------

def _moments(spec, x0, times, sigma0=None, steps_per_unit=None):
    """Mean U(t) x0 and covariance at sorted ``times`` by fine RK4 of the moment ODEs."""
    d = spec.dimension
    x0 = np.asarray(x0, dtype=float).reshape(d)
    S0 = np.zeros((d, d)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    state = np.concatenate([x0[:, None], S0], axis=1)

    def rhs(t, y):
        f = spec.f(t)
        m, S = y[:, :1], y[:, 1:]
        return np.concatenate([f @ m, spec.D(t) + f @ S + S @ f.T], axis=1)

    rate = steps_per_unit or 4096.0 / spec.horizon
    out = []
    t_prev = 0.0
    for t in times:
        m = max(1, math.ceil((t - t_prev) * rate))
        if t > t_prev:
            state = rk4(rhs, state, t_prev, t, m)
        out.append((state[:, 0].copy(), symmetrize(state[:, 1:])))
        t_prev = t
    return out


def fokker_planck_residual(spec, x0, t, probe_points, h=1e-3, sigma0=None):
    """Max |dp/dt + div(p f x - (1/2) D grad p)| over probe points.

    p is the exact Gaussian of the forward process started at ``x0`` (with
    optional initial covariance ``sigma0``).  All derivatives are central
    finite differences with stencil ``h`` in time and space, so the residual
    decays like h^2.  Probes where p underflows are skipped with a warning.
    """
    d = spec.dimension
    pts = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if pts.shape[1] != d:
        raise DomainError("probe points must have the process dimension")
    if not (h < t and t + h <= spec.horizon):
        raise DomainError("time stencil must stay inside (0, T]")
    (m_lo, S_lo), (m_0, S_0), (m_hi, S_hi) = _moments(spec, x0, [t - h, t, t + h], sigma0)
    facs = [spd_factor(S, "Sigma", tt) for S, tt in ((S_lo, t - h), (S_0, t), (S_hi, t + h))]

    def dens(x, which=1):
        mean = (m_lo, m_0, m_hi)[which]
        return np.exp(gaussian_logpdf(x, mean, facs[which]))

    p0 = dens(pts)
    keep = p0 > np.finfo(float).tiny * 1e10
    if not np.all(keep):
        warnings.warn(f"skipping {int(np.sum(~keep))} probe points where p underflows", stacklevel=2)
        pts, p0 = pts[keep], p0[keep]
    if pts.shape[0] == 0:
        return 0.0

    f, D = spec.f(t), spec.D(t)
    dpdt = (dens(pts, 2) - dens(pts, 0)) / (2 * h)
    eye = np.eye(d)
    div_drift = np.zeros(len(pts))
    diffusion = np.zeros(len(pts))
    for i in range(d):
        e = h * eye[i]
        xp, xm = pts + e, pts - e
        div_drift += (dens(xp) * (xp @ f[i]) - dens(xm) * (xm @ f[i])) / (2 * h)
        diffusion += D[i, i] * (dens(xp) - 2 * p0 + dens(xm)) / (h * h)
        for j in range(i + 1, d):
            if D[i, j] == 0.0 and D[j, i] == 0.0:
                continue
            ej = h * eye[j]
            mixed = (dens(pts + e + ej) - dens(pts + e - ej) - dens(pts - e + ej) + dens(pts - e - ej)) / (4 * h * h)
            diffusion += (D[i, j] + D[j, i]) * mixed
    residual = dpdt + div_drift - 0.5 * diffusion
    return float(np.max(np.abs(residual)))
