"""
Evolution operator U(t) solving dU/dt = f(t) U, U(0) = I, and the
transition kernel K(t, t') = U(t) U^{-1}(t').

U is assembled as a time-ordered product of short-interval matrix
exponentials, later factors to the left.  U^{-1} is the reversed product of
the inverse factors, so U U^{-1} = I holds to rounding even where U decays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError
from .process import ProcessSpec, TimeGrid
from ._io import write_csv
from ._linalg import rk4

METHODS = ("time-ordered-product", "closed-form-scalar", "rk4-ode")

# Pade [13/13] coefficients and the scaling threshold for double precision
# (Higham, "The scaling and squaring method for the matrix exponential revisited").
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def matrix_exponential(A):
    """exp(A) by scaling and squaring with a [13/13] Pade approximant.

    Parameters
    ----------
    A : array_like, shape (d, d) or (n, d, d)
        Square matrix or stack of square matrices.

    Returns
    -------
    ndarray
        Same shape as ``A``.  exp(0) is the identity exactly.

    Raises
    ------
    NumericalError
        If ``A`` has non-finite entries or the result overflows.
    """
    A = np.asarray(A, dtype=float)
    single = A.ndim == 2
    if single:
        A = A[None]
    if A.ndim != 3 or A.shape[-1] != A.shape[-2]:
        raise DomainError("matrix_exponential expects square matrices")
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix exponential of a non-finite matrix")
    n, d, _ = A.shape
    norms = np.abs(A).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norms > _THETA13, np.ceil(np.log2(norms / _THETA13)), 0.0).astype(int)
    A = A / np.ldexp(1.0, s)[:, None, None]

    b = _PADE13
    eye = np.broadcast_to(np.eye(d), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    odd = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
               + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye)
    even = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
            + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye)
    R = np.linalg.solve(even - odd, even + odd)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(int(s.max(initial=0))):
            sel = s > k
            R[sel] = R[sel] @ R[sel]
    if not np.all(np.isfinite(R)):
        raise NumericalError("matrix exponential overflowed")
    R[norms == 0.0] = np.eye(d)
    return R[0] if single else R


def _substep_counts(grid, substeps):
    h = np.diff(grid.times)
    if substeps is None:
        cap = grid.horizon / 2048.0
        return np.maximum(1, np.ceil(h / cap * (1 - 1e-12)).astype(int))
    substeps = int(substeps)
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    return np.full(h.size, substeps)


def _propagators(spec, t0, t1, m, sign=1.0):
    """Midpoint exponentials exp(sign f(mid) dt) for m equal substeps of [t0, t1]."""
    dt = (t1 - t0) / m
    mids = t0 + (np.arange(m) + 0.5) * dt
    F = np.stack([spec.f(t) for t in mids])
    try:
        return matrix_exponential(sign * dt * F)
    except NumericalError as exc:
        raise NumericalError(f"{exc} on [{t0!r}, {t1!r}]", time=t0) from None


def _step_product(spec, t0, t1, m):
    """(P, P_inv): ordered product over [t0, t1] and its reversed inverse product."""
    fwd = _propagators(spec, t0, t1, m, 1.0)
    bwd = _propagators(spec, t0, t1, m, -1.0)
    P = fwd[0]
    P_inv = bwd[0]
    for k in range(1, m):
        P = fwd[k] @ P
        P_inv = P_inv @ bwd[k]
    return P, P_inv


@dataclass(frozen=True, eq=False)
class EvolutionTable:
    """U(t_i) and U^{-1}(t_i) on a grid.

    Attributes
    ----------
    grid : TimeGrid
    U, U_inv : ndarray, shape (N + 1, d, d)
    method : str
        One of ``time-ordered-product``, ``closed-form-scalar``, ``rk4-ode``.
    spec : ProcessSpec
    substeps : ndarray
        Substeps used on each grid interval.
    """

    grid: TimeGrid
    U: np.ndarray
    U_inv: np.ndarray
    method: str
    spec: ProcessSpec
    substeps: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.U, self.U_inv):
            arr.setflags(write=False)

    @property
    def dimension(self):
        return self.U.shape[-1]

    def _closed_form_scalar(self, t):
        a = float(self.spec.schedule.alpha(t))
        return math.sqrt(a) * np.eye(self.dimension), np.eye(self.dimension) / math.sqrt(a)

    def _locate(self, t, interpolate):
        i = self.grid.index_of(t)
        if i is None and not interpolate and self.method != "closed-form-scalar":
            raise DomainError(f"time {t!r} is not on the grid; pass interpolate=True")
        if not (0.0 <= t <= self.grid.horizon * (1 + 1e-12)):
            raise DomainError(f"time {t!r} outside [0, {self.grid.horizon}]")
        return i

    def pair_at(self, t, interpolate=False):
        """(U(t), U^{-1}(t)).

        Off-grid times are propagated from the nearest earlier grid node with
        midpoint exponentials (closed form for the scalar DDIM table).
        """
        i = self._locate(t, interpolate)
        if i is not None:
            return self.U[i], self.U_inv[i]
        if self.method == "closed-form-scalar":
            return self._closed_form_scalar(t)
        j = int(np.searchsorted(self.grid.times, t)) - 1
        t0 = self.grid.times[j]
        h = self.grid.times[j + 1] - t0
        m = max(1, int(math.ceil(self.substeps[j] * (t - t0) / h)))
        P, P_inv = _step_product(self.spec, t0, t, m)
        return P @ self.U[j], self.U_inv[j] @ P_inv

    def U_at(self, t, interpolate=False):
        return self.pair_at(t, interpolate)[0]

    def U_inv_at(self, t, interpolate=False):
        return self.pair_at(t, interpolate)[1]

    def to_csv(self, path):
        """Write ``t, U_00, U_01, ...`` rows (row-major flattening)."""
        d = self.dimension
        header = ["t"] + [f"U_{i}{j}" for i in range(d) for j in range(d)]
        rows = np.column_stack([self.grid.times, self.U.reshape(len(self.grid), -1)])
        write_csv(path, header, rows)


def build_evolution(spec, grid, substeps=None, method=None):
    """Tabulate U and U^{-1} on ``grid``.

    Parameters
    ----------
    spec : ProcessSpec
    grid : TimeGrid
    substeps : int, optional
        Substeps per grid interval.  By default each interval is split so the
        substep length is at most T/2048.
    method : str, optional
        ``time-ordered-product`` (default for general specs), ``rk4-ode`` or
        ``closed-form-scalar`` (default and only closed form for the
        plain-vanilla DDIM kind, where U = sqrt(alpha) I).
    """
    if abs(grid.horizon - spec.horizon) > 1e-12 * spec.horizon:
        raise DomainError("grid horizon does not match the process horizon")
    counts = _substep_counts(grid, substeps)
    d = spec.dimension
    n = len(grid)
    if method is None:
        method = "closed-form-scalar" if spec.kind == "ddim-plain-vanilla" else "time-ordered-product"
    if method not in METHODS:
        raise DomainError(f"unknown evolution method {method!r}")

    if method == "closed-form-scalar":
        if spec.kind != "ddim-plain-vanilla":
            raise DomainError("closed-form-scalar evolution needs a plain-vanilla DDIM spec")
        root = np.sqrt(np.asarray(spec.schedule.alpha(grid.times), dtype=float))
        root[0] = 1.0
        eye = np.eye(d)
        U = root[:, None, None] * eye
        U_inv = (1.0 / root)[:, None, None] * eye
        return EvolutionTable(grid, U, U_inv, method, spec, counts)

    U = np.empty((n, d, d))
    U_inv = np.empty((n, d, d))
    U[0] = U_inv[0] = np.eye(d)
    times = grid.times
    if method == "time-ordered-product":
        starts = np.repeat(times[:-1], counts)
        widths = np.repeat(np.diff(times) / counts, counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        mids = starts + (offsets + 0.5) * widths
        F = np.stack([spec.f(t) for t in mids]) * widths[:, None, None]
        try:
            fwd_all = matrix_exponential(F)
            bwd_all = matrix_exponential(-F)
        except NumericalError as exc:
            raise NumericalError(str(exc)) from None
        k = 0
        for i in range(n - 1):
            P, P_inv = U[i], U_inv[i]
            for _ in range(counts[i]):
                P = fwd_all[k] @ P
                P_inv = P_inv @ bwd_all[k]
                k += 1
            U[i + 1], U_inv[i + 1] = P, P_inv
    else:
        def fwd(t, y):
            return spec.f(t) @ y

        def bwd(t, y):
            return -y @ spec.f(t)

        for i in range(n - 1):
            U[i + 1] = rk4(fwd, U[i], times[i], times[i + 1], counts[i])
            U_inv[i + 1] = rk4(bwd, U_inv[i], times[i], times[i + 1], counts[i])
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(U_inv))):
        bad = int(np.argmax(~np.all(np.isfinite(U.reshape(n, -1)) & np.isfinite(U_inv.reshape(n, -1)), axis=1)))
        raise NumericalError(f"evolution operator is not finite at t={times[bad]!r}", time=times[bad])
    return EvolutionTable(grid, U, U_inv, method, spec, counts)


def kernel(table, t, t_prime, interpolate=False):
    """K(t, t') = U(t) U^{-1}(t').  K(t, t) is the identity exactly."""
    if t == t_prime:
        table.pair_at(t, interpolate)  # domain check only
        return np.eye(table.dimension)
    return table.U_at(t, interpolate) @ table.U_inv_at(t_prime, interpolate)
