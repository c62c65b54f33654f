"""
Exact scores of the forward marginals for point and weighted-mixture data.

For data concentrated at x0 the marginal is N(K(t,0) x0, Sigma(t)); for a
weighted set of points it is the corresponding Gaussian mixture.  All
functions accept a single point of shape (d,) or a batch of shape (m, d).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, DomainError, NumericalError
from ._linalg import gaussian_logpdf, spd_factor, spd_solve


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """Initial data for the exact score.

    Parameters
    ----------
    variant : {"single-point", "mixture"}
    points : array_like, shape (n, d)
    weights : array_like, shape (n,), optional
        Positive weights, normalized internally.  Default is uniform.
    tables : Tables
        Source of U, Sigma and V.
    """

    variant: str
    points: np.ndarray
    tables: object
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise ContractError("a score model needs at least one point")
        if pts.shape[1] != self.tables.dimension:
            raise ContractError("points must have the process dimension")
        if self.variant not in ("single-point", "mixture"):
            raise ContractError(f"unknown score variant {self.variant!r}")
        if self.variant == "single-point" and pts.shape[0] != 1:
            raise ContractError("the single-point variant takes exactly one point")
        w = np.ones(pts.shape[0]) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (pts.shape[0],) or np.any(~(w > 0)) or not np.all(np.isfinite(w)):
            raise ContractError("weights must be finite and strictly positive, one per point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w / w.sum())

    @classmethod
    def single(cls, x0, tables):
        return cls("single-point", np.atleast_2d(x0), tables)

    @classmethod
    def mixture(cls, points, tables, weights=None):
        return cls("mixture", points, tables, weights)

    @property
    def x0(self):
        return self.points[0]

    def __call__(self, x, t):
        if self.variant == "single-point":
            return exact_score(self, x, t)
        return mixture_score(self, x, t)

    def affine(self, t):
        """(A, b) with score(x) = A x + b, for the single-point variant."""
        if self.variant != "single-point":
            raise ContractError("only the single-point score is affine")
        fac = _sigma_factor(self.tables, t)
        A = -spd_solve(fac, np.eye(self.tables.dimension))
        b = spd_solve(fac, self.tables.K(t, 0.0) @ self.x0)
        return A, b

    def log_density(self, x, t):
        """log p(x, t) for the model's marginal."""
        fac = _sigma_factor(self.tables, t)
        means = self.points @ self.tables.K(t, 0.0).T
        x = np.atleast_2d(np.asarray(x, dtype=float))
        logs = np.stack([gaussian_logpdf(x, m, fac) for m in means], axis=1)
        return logsumexp(logs + np.log(self.weights), axis=1)


def _sigma_factor(tables, t):
    if t <= 0:
        raise NumericalError("Sigma(0) = 0 is singular; the score needs t > 0", time=t)
    return spd_factor(tables.Sigma(t), "Sigma", t)


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise DomainError(f"expected points of dimension {d}")
    return x, single


def exact_score(model, x, t):
    """-Sigma^{-1}(t) (x - K(t,0) x0) for the single-point model."""
    if model.variant != "single-point":
        raise ContractError("exact_score needs a single-point model")
    x, single = _as_batch(x, model.tables.dimension)
    fac = _sigma_factor(model.tables, t)
    mean = model.tables.K(t, 0.0) @ model.x0
    out = -spd_solve(fac, (x - mean).T).T
    return out[0] if single else out


def mixture_score(model, x, t):
    """Gradient of the log Gaussian-mixture density.

    Responsibilities are formed in the log domain.  Where every component
    underflows, the score of the nearest component (in Mahalanobis distance)
    is returned with a warning.
    """
    x, single = _as_batch(x, model.tables.dimension)
    fac = _sigma_factor(model.tables, t)
    means = model.points @ model.tables.K(t, 0.0).T            # (n, d)
    diff = x[:, None, :] - means[None, :, :]                   # (m, n, d)
    m, n, d = diff.shape
    sol = spd_solve(fac, diff.reshape(-1, d).T).T.reshape(m, n, d)
    maha = np.einsum("mnd,mnd->mn", diff, sol)
    logs = np.log(model.weights)[None, :] - 0.5 * maha
    norm = logsumexp(logs, axis=1, keepdims=True)
    resp = np.exp(logs - norm)
    out = -np.einsum("mn,mnd->md", resp, sol)

    # densities that underflow even in the log domain are those with enormous
    # Mahalanobis distances; report them against the nearest component
    logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
    logp = norm[:, 0] - 0.5 * (logdet + d * np.log(2 * np.pi))
    lost = ~np.isfinite(out).all(axis=1) | (logp < np.log(np.finfo(float).tiny))
    if np.any(lost):
        warnings.warn(
            f"mixture density underflows at {int(lost.sum())} point(s); using the nearest component",
            stacklevel=2,
        )
        nearest = np.argmin(maha[lost], axis=1)
        out[lost] = -sol[lost][np.arange(nearest.size), nearest]
    return out[0] if single else out


def epsilon_from_score(score_value, tables, t):
    """eps = -V(t)^T score, the noise vector in y = V^{-1}(x - K x0) coordinates."""
    if t <= 0:
        raise NumericalError("V(0) = 0 is singular; eps needs t > 0", time=t)
    V = tables.V(t)
    if np.linalg.matrix_rank(V) < V.shape[0]:
        raise NumericalError(f"V is singular at t={t!r}", time=t)
    s = np.asarray(score_value, dtype=float)
    return -(s @ V) if s.ndim == 2 else -(V.T @ s)


def score_from_epsilon(eps, tables, t):
    """Inverse of :func:`epsilon_from_score`: score = -V^{-T} eps."""
    V = tables.V(t)
    e = np.asarray(eps, dtype=float)
    if e.ndim == 2:
        return -np.linalg.solve(V.T, e.T).T
    return -np.linalg.solve(V.T, e)


def score_matching_cost(model, candidate, times, n_mc, seed):
    """Monte-Carlo denoising score-matching cost of ``candidate``.

    Sums over ``times`` of E || candidate(x, t) - grad log p(x | x0_i) ||^2 with
    i drawn by weight and x ~ p(x, t | x0_i).  The parameter-free constant of
    the equivalent marginal objective is omitted.

    Parameters
    ----------
    model : ScoreModel
    candidate : callable
        ``candidate(x, t)`` with ``x`` of shape (m, d) returning (m, d).
    times : sequence of float or TimeGrid
        Times at which the cost is accumulated (t = 0 is skipped).
    n_mc : int
        Samples per time.
    seed : int
    """
    times = getattr(times, "times", times)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    tables = model.tables
    d = tables.dimension
    total = 0.0
    for t in np.asarray(times, dtype=float):
        if t <= 0:
            continue
        K = tables.K(t, 0.0)
        fac = _sigma_factor(tables, t)
        chol = np.tril(fac[0])
        idx = rng.choice(model.points.shape[0], size=n_mc, p=model.weights)
        eta = rng.standard_normal((n_mc, d))
        centre = model.points[idx] @ K.T
        x = centre + eta @ chol.T
        target = -spd_solve(fac, (x - centre).T).T
        diff = np.asarray(candidate(x, t), dtype=float) - target
        total += float(np.mean(np.sum(diff * diff, axis=1)))
    return total
