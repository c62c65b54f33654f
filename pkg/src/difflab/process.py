"""
Linear diffusion processes dx = f(t) x dt + g(t) dw.

A :class:`ProcessSpec` bundles the drift and noise matrix functions on a
horizon [0, T].  Matrix functions come from a small set of serializable
families (constant, diagonal-schedule, rotation-plus-decay,
rotating-diagonal, ddim-drift, tabulated) so a process can round-trip
through a JSON config.  Scalar noise schedules alpha(t) drive the DDIM
family, where f = (1/2) dlog(alpha)/dt and g = sqrt(-dlog(alpha)/dt).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ScheduleError

KINDS = ("general", "ddim-general", "ddim-plain-vanilla", "paddim")
DDIM_KINDS = ("ddim-general", "ddim-plain-vanilla", "paddim")

DEFAULT_ALPHA_MIN = 1e-4
_TIME_TOL = 1e-12


# ---------------------------------------------------------------------------
# time grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times 0 = t_0 < t_1 < ... < t_N = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise DomainError("a time grid needs at least two points")
        if t[0] != 0.0:
            raise DomainError(f"time grid must start at 0, got {t[0]!r}")
        if not np.all(np.isfinite(t)):
            raise DomainError("time grid contains non-finite values")
        if np.any(np.diff(t) <= 0):
            raise DomainError("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon, n_steps, include=()):
        """Uniform grid with ``n_steps`` intervals, optionally merged with extra times."""
        if n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        t = np.linspace(0.0, float(horizon), int(n_steps) + 1)
        if len(include):
            extra = np.asarray(include, dtype=float)
            if np.any(extra < 0) or np.any(extra > horizon):
                raise DomainError("included times must lie in [0, T]")
            t = np.union1d(t, extra)
            # drop near-duplicates produced by the merge
            keep = np.concatenate([[True], np.diff(t) > _TIME_TOL * max(1.0, horizon)])
            t = t[keep]
            t[-1] = float(horizon)
        return cls(t)

    @property
    def horizon(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    def __len__(self):
        return self.times.size

    def index_of(self, t):
        """Grid index of time ``t``, or ``None`` if ``t`` is not a grid point."""
        tol = _TIME_TOL * max(1.0, self.horizon)
        i = int(np.searchsorted(self.times, t))
        for j in (i - 1, i):
            if 0 <= j < self.times.size and abs(self.times[j] - t) <= tol:
                return j
        return None

    def to_dict(self):
        return {"times": self.times.tolist()}


# ---------------------------------------------------------------------------
# scalar schedules
# ---------------------------------------------------------------------------

class Schedule:
    """Monotone non-increasing alpha(t) with alpha(0) = 1.

    Subclasses implement ``log_alpha`` and ``dlog_alpha``; both accept scalars
    or arrays.
    """

    form = None

    def alpha(self, t):
        return np.exp(self.log_alpha(t))

    def log_alpha(self, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def dlog_alpha(self, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self):  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialRateSchedule(Schedule):
    """alpha(t) = exp(-beta_min t - (beta_max - beta_min) t^2 / (2 T)).

    Equal rates give alpha = exp(-rate t); distinct rates give the linear
    beta(t) schedule of variance-preserving diffusions.
    """

    beta_min: float
    beta_max: float
    horizon: float
    form = "exponential-rate"

    def log_alpha(self, t):
        t = np.asarray(t, dtype=float)
        slope = (self.beta_max - self.beta_min) / self.horizon
        return -self.beta_min * t - 0.5 * slope * t * t

    def dlog_alpha(self, t):
        t = np.asarray(t, dtype=float)
        return -(self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon)

    def to_dict(self):
        if self.beta_min == self.beta_max:
            params = {"rate": self.beta_min}
        else:
            params = {"beta_min": self.beta_min, "beta_max": self.beta_max}
        return {"form": self.form, "params": params}


@dataclass(frozen=True)
class CosineSchedule(Schedule):
    """Cosine-like alpha(t) = c(u) / c(0), c(u) = cos^2(pi/2 (u + s)/(1 + s)).

    ``u = end * t / T``; ``end`` < 1 keeps alpha(T) positive so the drift
    stays finite at the horizon.
    """

    horizon: float
    s: float = 0.008
    end: float = 0.999
    form = "cosine-like"

    def _phase(self, t):
        u = self.end * np.asarray(t, dtype=float) / self.horizon
        return 0.5 * math.pi * (u + self.s) / (1.0 + self.s)

    def log_alpha(self, t):
        phase0 = 0.5 * math.pi * self.s / (1.0 + self.s)
        return 2.0 * (np.log(np.cos(self._phase(t))) - math.log(math.cos(phase0)))

    def dlog_alpha(self, t):
        rate = math.pi * self.end / (self.horizon * (1.0 + self.s))
        return -rate * np.tan(self._phase(t))

    def to_dict(self):
        return {"form": self.form, "params": {"s": self.s, "end": self.end}}


@dataclass(frozen=True, eq=False)
class TabulatedSchedule(Schedule):
    """alpha given at table times, log-linearly interpolated.

    The log-rate is differentiated on the table (central differences inside,
    one-sided at the ends) and linearly interpolated between nodes.
    """

    times: np.ndarray
    values: np.ndarray
    form = "tabulated"
    _rate: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        a = np.array(self.values, dtype=float)
        if t.ndim != 1 or t.shape != a.shape or t.size < 3:
            raise ScheduleError("a tabulated schedule needs matching 1-d arrays of >= 3 points")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ScheduleError("table times must start at 0 and increase strictly")
        if a[0] != 1.0:
            raise ScheduleError(f"alpha(0) must equal 1 exactly, got {a[0]!r}")
        if np.any(np.diff(a) > 0):
            i = int(np.argmax(np.diff(a) > 0))
            raise ScheduleError(f"alpha increases between t={t[i]!r} and t={t[i + 1]!r}")
        if np.any(a <= 0) or not np.all(np.isfinite(a)):
            i = int(np.argmax(~(a > 0)))
            raise DomainError(f"alpha reaches 0 at t={t[i]!r}")
        rate = np.gradient(np.log(a), t, edge_order=1)
        for arr in (t, a, rate):
            arr.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", a)
        object.__setattr__(self, "_rate", rate)

    def log_alpha(self, t):
        return np.interp(t, self.times, np.log(self.values))

    def dlog_alpha(self, t):
        return np.interp(t, self.times, self._rate)

    def to_dict(self):
        return {"form": self.form, "table": {"t": self.times.tolist(), "alpha": self.values.tolist()}}


def exponential_schedule(rate, horizon):
    """alpha(t) = exp(-rate t)."""
    return ExponentialRateSchedule(float(rate), float(rate), float(horizon))


def schedule_from_dict(cfg, horizon, where="schedule"):
    if not isinstance(cfg, dict) or "form" not in cfg:
        raise ConfigError("schedule needs a 'form'", field=where)
    form = cfg["form"]
    params = cfg.get("params", {}) or {}
    try:
        if form == "exponential-rate":
            if "rate" in params:
                return exponential_schedule(params["rate"], horizon)
            return ExponentialRateSchedule(float(params["beta_min"]), float(params["beta_max"]), float(horizon))
        if form == "cosine-like":
            return CosineSchedule(float(horizon), float(params.get("s", 0.008)), float(params.get("end", 0.999)))
        if form == "tabulated":
            table = cfg.get("table")
            if not isinstance(table, dict):
                raise ConfigError("tabulated schedule needs a 'table' with 't' and 'alpha'", field=f"{where}.table")
            return TabulatedSchedule(np.asarray(table["t"], float), np.asarray(table["alpha"], float))
    except KeyError as exc:
        raise ConfigError(f"missing schedule parameter {exc.args[0]!r}", field=f"{where}.params") from None
    raise ConfigError(f"unknown schedule form {form!r}", field=f"{where}.form")


def validate_schedule(schedule, horizon, times=None, alpha_min=DEFAULT_ALPHA_MIN):
    """Check the schedule invariants on ``times`` (default: 257 uniform points).

    Raises ScheduleError for non-monotone or non-decaying schedules and
    DomainError when alpha hits 0 on [0, T].  Warns when alpha(T) > alpha_min,
    since fixing the noise vector from x(T) is then only approximate.
    """
    if times is None:
        times = np.linspace(0.0, horizon, 257)
    times = np.asarray(times, dtype=float)
    a = np.asarray(schedule.alpha(times), dtype=float)
    if float(schedule.alpha(0.0)) != 1.0:
        raise ScheduleError("alpha(0) must equal 1")
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        i = int(np.argmax(~(a > 0)))
        raise DomainError(f"alpha reaches 0 before the horizon (t={times[i]!r})")
    if np.any(np.diff(a) > 0):
        i = int(np.argmax(np.diff(a) > 0))
        raise ScheduleError(f"alpha is not monotone between t={times[i]!r} and t={times[i + 1]!r}")
    rate = np.asarray(schedule.dlog_alpha(times), dtype=float)
    if np.any(~np.isfinite(rate)):
        raise DomainError("dlog(alpha)/dt is not finite on [0, T]")
    if np.any(rate > 0):
        raise ScheduleError("dlog(alpha)/dt must be non-positive")
    a_end = float(schedule.alpha(horizon))
    if a_end >= 1.0 or np.all(rate == 0):
        raise ScheduleError("schedule does not decay (zero noise rate)")
    if a_end > alpha_min:
        warnings.warn(
            f"alpha(T) = {a_end:.3g} exceeds alpha_min = {alpha_min:g}; "
            "eps fixed from x(T) is approximate",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# matrix-valued functions of time
# ---------------------------------------------------------------------------

class MatrixFunction:
    """A d x d matrix as a function of time."""

    family = None
    dimension = None

    def __call__(self, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def batch(self, times):
        return np.stack([self(t) for t in np.asarray(times, dtype=float)])

    def to_dict(self):
        raise ConfigError(f"matrix family {self.family!r} is not serializable")


class ConstantMatrix(MatrixFunction):
    family = "constant"

    def __init__(self, value):
        value = np.array(value, dtype=float)
        if value.ndim != 2 or value.shape[0] != value.shape[1]:
            raise DomainError("constant matrix must be square")
        value.setflags(write=False)
        self.value = value
        self.dimension = value.shape[0]

    def __call__(self, t):
        return self.value.copy()

    def batch(self, times):
        return np.broadcast_to(self.value, (len(times),) + self.value.shape).copy()

    def to_dict(self):
        return {"family": self.family, "params": {"value": self.value.tolist()}}


def _projector_parts(axes, dimension):
    if axes is None:
        return None, None
    axes = np.asarray(axes, dtype=float)
    return axes, np.eye(dimension) - axes.T @ axes


class DiagonalSchedule(MatrixFunction):
    """Drift or noise assembled from per-axis schedules alpha_m.

    ``part='drift'`` gives sum_m (1/2) dlog(alpha_m)/dt d_m d_m^T and
    ``part='noise'`` gives sum_m sqrt(-dlog(alpha_m)/dt) d_m d_m^T.  Without
    ``axes`` the d_m are the coordinate vectors.  With ``k < d`` axes the
    orthogonal complement follows ``default``.
    """

    family = "diagonal-schedule"

    def __init__(self, schedules, part, axes=None, default=None, dimension=None):
        if part not in ("drift", "noise"):
            raise DomainError(f"part must be 'drift' or 'noise', got {part!r}")
        self.schedules = tuple(schedules)
        self.part = part
        if axes is None:
            self.dimension = len(self.schedules) if dimension is None else int(dimension)
            if self.dimension != len(self.schedules):
                raise DomainError("one schedule per coordinate is required without axes")
        else:
            axes = np.asarray(axes, dtype=float)
            self.dimension = axes.shape[1]
            if axes.shape[0] != len(self.schedules):
                raise DomainError("one schedule per axis is required")
        self.axes, self._perp = _projector_parts(axes, self.dimension)
        self.default = default
        if self._perp is not None and axes.shape[0] < self.dimension and default is None:
            raise DomainError("a default schedule is needed for the axes' complement")

    def _coef(self, rate):
        rate = np.asarray(rate, dtype=float)
        if self.part == "drift":
            return 0.5 * rate
        return np.sqrt(np.maximum(-rate, 0.0))

    def __call__(self, t):
        c = self._coef([s.dlog_alpha(t) for s in self.schedules])
        if self.axes is None:
            return np.diag(c)
        m = (self.axes.T * c) @ self.axes
        if self.default is not None and self.axes.shape[0] < self.dimension:
            m = m + self._coef(self.default.dlog_alpha(t)) * self._perp
        return m

    def to_dict(self):
        params = {"part": self.part, "schedules": [s.to_dict() for s in self.schedules]}
        if self.axes is not None:
            params["axes"] = self.axes.tolist()
        if self.default is not None:
            params["default"] = self.default.to_dict()
        return {"family": self.family, "params": params}


def _planar_generator(dimension):
    j = np.zeros((dimension, dimension))
    j[0, 1], j[1, 0] = 1.0, -1.0
    return j


class RotationPlusDecay(MatrixFunction):
    """f(t) = -(1/2) diag(decay) + (omega0 + omega1 t) J, J the (0,1)-plane generator.

    Unequal decays make f(t) at different times non-commuting when
    omega1 != 0.
    """

    family = "rotation-plus-decay"

    def __init__(self, decay, omega0=0.0, omega1=0.0):
        self.decay = np.array(decay, dtype=float)
        if self.decay.ndim != 1 or self.decay.size < 2:
            raise DomainError("rotation-plus-decay needs dimension >= 2")
        self.omega0 = float(omega0)
        self.omega1 = float(omega1)
        self.dimension = self.decay.size
        self._base = -0.5 * np.diag(self.decay)
        self._gen = _planar_generator(self.dimension)

    def __call__(self, t):
        return self._base + (self.omega0 + self.omega1 * float(t)) * self._gen

    def to_dict(self):
        return {
            "family": self.family,
            "params": {"decay": self.decay.tolist(), "omega0": self.omega0, "omega1": self.omega1},
        }


def planar_rotation(theta, dimension=2):
    """Rotation by ``theta`` in the (0, 1) plane, identity elsewhere."""
    r = np.eye(dimension)
    c, s = math.cos(theta), math.sin(theta)
    r[0, 0], r[0, 1], r[1, 0], r[1, 1] = c, -s, s, c
    return r


class RotatingDiagonal(MatrixFunction):
    """Noise g(t) = R(omega t) diag(sqrt(lambda)) R(omega t)^T.

    The diffusion matrix D = R diag(lambda) R^T has a rigidly rotating
    eigenbasis d_m(t) = R(omega t) e_m.
    """

    family = "rotating-diagonal"

    def __init__(self, eigenvalues, omega):
        self.eigenvalues = np.array(eigenvalues, dtype=float)
        if np.any(self.eigenvalues < 0):
            raise DomainError("diffusion eigenvalues must be non-negative")
        self.omega = float(omega)
        self.dimension = self.eigenvalues.size
        self._root = np.sqrt(self.eigenvalues)

    def __call__(self, t):
        r = planar_rotation(self.omega * float(t), self.dimension)
        return (r * self._root) @ r.T

    def to_dict(self):
        return {"family": self.family, "params": {"eigenvalues": self.eigenvalues.tolist(), "omega": self.omega}}


class DDIMDrift(MatrixFunction):
    """f(t) = -(1/2) g(t) g(t)^T for a given noise function."""

    family = "ddim-drift"

    def __init__(self, noise):
        self.noise = noise
        self.dimension = noise.dimension

    def __call__(self, t):
        g = self.noise(t)
        return -0.5 * (g @ g.T)

    def to_dict(self):
        return {"family": self.family}


class TabulatedMatrix(MatrixFunction):
    """Matrices given at times, linearly interpolated entrywise."""

    family = "tabulated"

    def __init__(self, times, values):
        self.times = np.array(times, dtype=float)
        self.values = np.array(values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] != self.times.size:
            raise DomainError("tabulated matrices need shape (n_times, d, d)")
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("tabulated matrix times must increase")
        self.dimension = self.values.shape[1]
        self._flat = self.values.reshape(self.times.size, -1)

    def __call__(self, t):
        d = self.dimension
        t = float(t)
        row = np.array([np.interp(t, self.times, self._flat[:, k]) for k in range(d * d)])
        return row.reshape(d, d)

    def to_dict(self):
        return {"family": self.family, "params": {"times": self.times.tolist(), "values": self.values.tolist()}}


class CallableMatrix(MatrixFunction):
    """Wraps an arbitrary callable; not serializable."""

    family = "callable"

    def __init__(self, fn, dimension):
        self.fn = fn
        self.dimension = int(dimension)

    def __call__(self, t):
        return np.asarray(self.fn(t), dtype=float).reshape(self.dimension, self.dimension)


def matrix_function_from_dict(cfg, dimension, horizon, where):
    if not isinstance(cfg, dict) or "family" not in cfg:
        raise ConfigError("matrix function needs a 'family'", field=where)
    fam = cfg["family"]
    p = cfg.get("params", {}) or {}
    try:
        if fam == "constant":
            fn = ConstantMatrix(p["value"])
        elif fam == "scaled-identity":
            fn = ConstantMatrix(float(p["scale"]) * np.eye(dimension))
        elif fam == "diagonal-schedule":
            scheds = [schedule_from_dict(s, horizon, f"{where}.params.schedules[{i}]")
                      for i, s in enumerate(p["schedules"])]
            default = schedule_from_dict(p["default"], horizon, f"{where}.params.default") if "default" in p else None
            fn = DiagonalSchedule(scheds, p.get("part", "noise"), axes=p.get("axes"), default=default,
                                  dimension=dimension)
        elif fam == "rotation-plus-decay":
            fn = RotationPlusDecay(p["decay"], p.get("omega0", 0.0), p.get("omega1", 0.0))
        elif fam == "rotating-diagonal":
            fn = RotatingDiagonal(p["eigenvalues"], p["omega"])
        elif fam == "tabulated":
            fn = TabulatedMatrix(p["times"], p["values"])
        else:
            raise ConfigError(f"unknown matrix family {fam!r}", field=f"{where}.family")
    except KeyError as exc:
        raise ConfigError(f"missing parameter {exc.args[0]!r}", field=f"{where}.params") from None
    except (DomainError, ScheduleError) as exc:
        raise ConfigError(str(exc), field=where) from None
    if fn.dimension != dimension:
        raise ConfigError(f"matrix function has dimension {fn.dimension}, expected {dimension}", field=where)
    return fn


# ---------------------------------------------------------------------------
# paDDIM axes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AxisScheduleSet:
    """Orthonormal axes d_m (rows of ``axes``) with per-axis schedules.

    Axes beyond the ``active_count`` supplied ones (the orthogonal complement)
    follow ``default_schedule``.
    """

    axes: np.ndarray
    schedules: tuple = ()
    default_schedule: Schedule | None = None

    def __post_init__(self):
        axes = np.array(self.axes, dtype=float)
        if axes.ndim != 2 or axes.shape[0] > axes.shape[1] or axes.shape[0] < 1:
            raise ContractError("axes must be a (k, d) array with 1 <= k <= d")
        gram = axes @ axes.T
        dev = np.max(np.abs(gram - np.eye(axes.shape[0])))
        if dev > 1e-10:
            raise ContractError(f"axes are not orthonormal (Gram deviation {dev:.2e})")
        if self.schedules and len(self.schedules) != axes.shape[0]:
            raise ContractError("one schedule per axis is required")
        axes.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "schedules", tuple(self.schedules))

    @property
    def active_count(self):
        return self.axes.shape[0]

    @property
    def dimension(self):
        return self.axes.shape[1]

    @property
    def complement(self):
        return np.eye(self.dimension) - self.axes.T @ self.axes

    def with_schedules(self, schedules, default_schedule=None):
        return AxisScheduleSet(self.axes, tuple(schedules), default_schedule)


def _tie_broken_basis(vectors, dimension):
    """Re-express a degenerate eigenspace by projecting coordinate vectors in index order."""
    proj = vectors @ vectors.T
    chosen = []
    for j in range(dimension):
        v = proj[:, j].copy()
        for c in chosen:
            v -= (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            chosen.append(v / norm)
        if len(chosen) == vectors.shape[1]:
            break
    return np.column_stack(chosen)


def paddim_axes_from_data(samples, d_prime, rtol=1e-9):
    """Top-``d_prime`` principal axes of a sample set.

    Axes are ordered by descending sample-covariance eigenvalue, the first
    nonzero entry of each axis is positive, and degenerate eigenspaces are
    resolved by projecting the coordinate vectors in index order.  If
    ``d_prime`` exceeds the effective rank, a warning reports the rank and
    the result is truncated to it.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("need at least 2 samples as an (n, d) array")
    d = x.shape[1]
    if not 1 <= d_prime <= d:
        raise DomainError(f"d_prime must lie in [1, {d}], got {d_prime}")
    cov = np.cov(x, rowvar=False).reshape(d, d)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]

    scale = max(evals[0], 0.0)
    rank = int(np.sum(evals > rtol * scale)) if scale > 0 else 0
    if d_prime > rank:
        warnings.warn(f"sample covariance has effective rank {rank}; truncating to {rank} axes", stacklevel=2)
        d_prime = rank
        if rank == 0:
            raise DomainError("samples have zero covariance; no principal axes")

    # group (near-)degenerate eigenvalues and fix a reproducible basis inside each group
    start = 0
    while start < d:
        stop = start + 1
        while stop < d and abs(evals[stop] - evals[start]) <= rtol * max(scale, 1e-300):
            stop += 1
        if stop - start > 1:
            evecs[:, start:stop] = _tie_broken_basis(evecs[:, start:stop], d)
        start = stop

    axes = evecs[:, :d_prime].T.copy()
    for row in axes:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return AxisScheduleSet(axes)


# ---------------------------------------------------------------------------
# process definition
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProcessSpec:
    """dx = f(t) x dt + g(t) dw on [0, horizon]."""

    dimension: int
    horizon: float
    drift: MatrixFunction
    noise: MatrixFunction
    kind: str = "general"
    schedule: Schedule | None = None
    axis_set: AxisScheduleSet | None = None
    alpha_min: float = DEFAULT_ALPHA_MIN

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise DomainError("dimension must be >= 1")
        if not self.horizon > 0 or not math.isfinite(self.horizon):
            raise DomainError("horizon must be a positive finite number")
        if self.kind not in KINDS:
            raise DomainError(f"unknown process kind {self.kind!r}")
        for name, fn in (("drift", self.drift), ("noise", self.noise)):
            if fn.dimension != self.dimension:
                raise DomainError(f"{name} has dimension {fn.dimension}, expected {self.dimension}")
        self.check(np.linspace(0.0, self.horizon, 65))

    @property
    def is_ddim(self):
        return self.kind in DDIM_KINDS

    def _check_time(self, t):
        if not (-_TIME_TOL * self.horizon <= t <= self.horizon * (1 + _TIME_TOL)):
            raise DomainError(f"time {t!r} outside [0, {self.horizon}]")

    def f(self, t):
        self._check_time(t)
        return self.drift(t)

    def g(self, t):
        self._check_time(t)
        return self.noise(t)

    def D(self, t):
        g = self.g(t)
        return g @ g.T

    def check(self, times):
        """Verify finiteness and the kind-specific invariants at ``times``."""
        eye = np.eye(self.dimension)
        for t in np.asarray(times, dtype=float):
            f, g = self.f(t), self.g(t)
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise DomainError(f"drift or noise is not finite at t={t!r}")
            if self.is_ddim:
                gap = np.linalg.norm(f + 0.5 * g @ g.T)
                if gap > 1e-12 * (1.0 + np.linalg.norm(f)):
                    raise ContractError(f"DDIM condition f = -D/2 violated at t={t!r} (gap {gap:.2e})")
            if self.kind == "ddim-plain-vanilla":
                for m in (f, g):
                    if np.max(np.abs(m - m[0, 0] * eye)) > 1e-14 * (1 + abs(m[0, 0])):
                        raise ContractError(f"plain-vanilla drift/noise must be multiples of I (t={t!r})")


def diffusion_matrix(spec, t):
    """D(t) = g(t) g(t)^T."""
    return spec.D(t)


def plain_vanilla_spec(schedule, d, T, alpha_min=DEFAULT_ALPHA_MIN):
    """Scalar-schedule DDIM: f = (1/2) dlog(alpha)/dt I, g = sqrt(-dlog(alpha)/dt) I."""
    validate_schedule(schedule, T, alpha_min=alpha_min)
    if isinstance(schedule, TabulatedSchedule):
        validate_schedule(schedule, T, schedule.times[schedule.times <= T], alpha_min=np.inf)
    scheds = [schedule] * int(d)
    return ProcessSpec(
        int(d), float(T), DiagonalSchedule(scheds, "drift"), DiagonalSchedule(scheds, "noise"),
        kind="ddim-plain-vanilla", schedule=schedule, alpha_min=alpha_min,
    )


def ddim_spec(noise, T, alpha_min=DEFAULT_ALPHA_MIN):
    """General DDIM process with drift -g g^T / 2."""
    return ProcessSpec(noise.dimension, float(T), DDIMDrift(noise), noise, kind="ddim-general", alpha_min=alpha_min)


def paddim_spec(axis_set, T, alpha_min=DEFAULT_ALPHA_MIN):
    """Per-axis DDIM: each principal axis d_m decays with its own alpha_m."""
    if not axis_set.schedules:
        raise ContractError("axis set has no schedules")
    for s in axis_set.schedules + ((axis_set.default_schedule,) if axis_set.default_schedule else ()):
        validate_schedule(s, T, alpha_min=alpha_min)
    args = (axis_set.schedules,)
    kw = dict(axes=axis_set.axes, default=axis_set.default_schedule)
    return ProcessSpec(
        axis_set.dimension, float(T),
        DiagonalSchedule(*args, "drift", **kw), DiagonalSchedule(*args, "noise", **kw),
        kind="paddim", axis_set=axis_set, alpha_min=alpha_min,
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _require(cfg, key, where):
    if key not in cfg:
        raise ConfigError(f"missing required key {key!r}", field=f"{where}.{key}" if where else key)
    return cfg[key]


def grid_from_dict(cfg, horizon, where="grid"):
    if cfg is None:
        n = max(2048, 1)
        return TimeGrid.uniform(horizon, n)
    if not isinstance(cfg, dict):
        raise ConfigError("grid must be a mapping", field=where)
    try:
        if "times" in cfg:
            grid = TimeGrid(np.asarray(cfg["times"], dtype=float))
            if abs(grid.horizon - horizon) > _TIME_TOL * horizon:
                raise ConfigError("explicit grid must end at the horizon", field=f"{where}.times")
            return grid
        if "n_steps" in cfg:
            return TimeGrid.uniform(horizon, int(cfg["n_steps"]), cfg.get("include", ()))
    except DomainError as exc:
        raise ConfigError(str(exc), field=where) from None
    raise ConfigError("grid needs 'n_steps' or 'times'", field=where)


def process_from_dict(cfg, where=""):
    """Build ``(ProcessSpec, TimeGrid)`` from a config mapping.

    Keys: ``dimension``, ``horizon``, ``kind``, ``schedule``, ``grid``,
    optionally ``alpha_min``, ``drift``/``noise`` (general and ddim-general
    kinds), ``axes`` and ``axis_schedules`` (paddim).
    """
    p = (lambda k: f"{where}.{k}" if where else k)
    if not isinstance(cfg, dict):
        raise ConfigError("process config must be a mapping", field=where or None)
    try:
        d = int(_require(cfg, "dimension", where))
        T = float(_require(cfg, "horizon", where))
    except (TypeError, ValueError):
        raise ConfigError("dimension and horizon must be numbers", field=where or None) from None
    kind = cfg.get("kind", "general")
    alpha_min = float(cfg.get("alpha_min", DEFAULT_ALPHA_MIN))
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {KINDS}", field=p("kind"))
    grid = grid_from_dict(cfg.get("grid"), T, p("grid"))
    try:
        if kind == "ddim-plain-vanilla":
            sched = schedule_from_dict(_require(cfg, "schedule", where), T, p("schedule"))
            spec = plain_vanilla_spec(sched, d, T, alpha_min)
        elif kind == "paddim":
            axes = np.asarray(_require(cfg, "axes", where), dtype=float)
            scheds = [schedule_from_dict(s, T, f"{p('axis_schedules')}[{i}]")
                      for i, s in enumerate(_require(cfg, "axis_schedules", where))]
            default = schedule_from_dict(cfg["schedule"], T, p("schedule")) if "schedule" in cfg else None
            spec = paddim_spec(AxisScheduleSet(axes, tuple(scheds), default), T, alpha_min)
        elif kind == "ddim-general":
            noise = matrix_function_from_dict(_require(cfg, "noise", where), d, T, p("noise"))
            spec = ddim_spec(noise, T, alpha_min)
        else:
            drift = matrix_function_from_dict(_require(cfg, "drift", where), d, T, p("drift"))
            noise = matrix_function_from_dict(_require(cfg, "noise", where), d, T, p("noise"))
            spec = ProcessSpec(d, T, drift, noise, kind="general", alpha_min=alpha_min)
    except (DomainError, ScheduleError, ContractError) as exc:
        raise ConfigError(str(exc), field=where or None) from None
    spec.check(grid.times)
    return spec, grid


def process_to_dict(spec, grid=None):
    """Inverse of :func:`process_from_dict`."""
    out = {"dimension": spec.dimension, "horizon": spec.horizon, "kind": spec.kind, "alpha_min": spec.alpha_min}
    if spec.kind == "ddim-plain-vanilla":
        out["schedule"] = spec.schedule.to_dict()
    elif spec.kind == "paddim":
        out["axes"] = spec.axis_set.axes.tolist()
        out["axis_schedules"] = [s.to_dict() for s in spec.axis_set.schedules]
        if spec.axis_set.default_schedule is not None:
            out["schedule"] = spec.axis_set.default_schedule.to_dict()
    elif spec.kind == "ddim-general":
        out["noise"] = spec.noise.to_dict()
    else:
        out["drift"] = spec.drift.to_dict()
        out["noise"] = spec.noise.to_dict()
    if grid is not None:
        out["grid"] = grid.to_dict()
    return out
