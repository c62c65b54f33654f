"""
Trajectory generators for linear diffusions.

Stochastic paths are produced in fixed-size chunks; chunk ``k`` of stream
``s`` draws from its own Philox generator keyed by (seed, s, k), so a batch
is reproducible bit for bit whatever the number of worker threads
(``DIFFLAB_THREADS``).
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NumericalError
from .process import AxisScheduleSet
from .score import ScoreModel

CHUNK = 4096
EPS_MODES = ("fixed-vector", "from-xT", "state-dependent")


def worker_count():
    """Worker threads for path batches, capped by DIFFLAB_THREADS."""
    cap = os.environ.get("DIFFLAB_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise DomainError(f"DIFFLAB_THREADS must be an integer, got {cap!r}") from None
    return n


def chunk_generator(seed, stream, chunk):
    """Counter-based generator for one chunk of paths."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def _run_chunks(n_paths, work):
    bounds = [(k, s, min(s + CHUNK, n_paths)) for k, s in enumerate(range(0, n_paths, CHUNK))]
    workers = min(worker_count(), len(bounds))
    if workers <= 1:
        return [work(*b) for b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: work(*b), bounds))


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Sample paths recorded at ``times``.

    ``paths`` has shape (n_paths, len(times), d).  For reverse batches the
    times run downward from the start time.
    """

    times: np.ndarray
    paths: np.ndarray
    direction: str
    seed: int | None
    method: str
    grid: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.paths.ndim != 3 or self.paths.shape[0] < 1:
            raise ContractError("a trajectory batch needs at least one path")
        if self.paths.shape[1] != len(self.times):
            raise ContractError("paths and times disagree in length")
        if not np.all(np.isfinite(self.paths)):
            raise NumericalError("trajectory batch has non-finite entries")

    @property
    def n_paths(self):
        return self.paths.shape[0]

    def at(self, t):
        """Samples of shape (n_paths, d) at recorded time ``t``."""
        idx = np.flatnonzero(np.abs(self.times - t) <= 1e-12 * max(1.0, abs(t)))
        if not idx.size:
            raise DomainError(f"time {t!r} was not recorded")
        return self.paths[:, idx[0], :]

    def rows(self):
        """(path_id, t, x_0, ..., x_{d-1}) rows in path-major order."""
        n, k, d = self.paths.shape
        ids = np.repeat(np.arange(n), k)
        ts = np.tile(self.times, n)
        return np.column_stack([ids, ts, self.paths.reshape(n * k, d)])


def ensemble_moments(samples):
    """Sample mean and covariance with Monte-Carlo standard errors.

    Returns
    -------
    dict with ``mean`` (d,), ``cov`` (d, d), ``se_mean`` (d,), ``se_cov`` (d, d).
    The covariance uses ddof=1; its standard error is the standard error of
    the mean of the centred products.
    """
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    mean = x.mean(axis=0)
    c = x - mean
    prod = c[:, :, None] * c[:, None, :]
    cov = prod.sum(axis=0) / (n - 1)
    se_cov = prod.std(axis=0, ddof=1) / math.sqrt(n)
    se_mean = c.std(axis=0, ddof=1) / math.sqrt(n)
    return {"mean": mean, "cov": cov, "se_mean": se_mean, "se_cov": se_cov}


def _record_indices(times, record_times):
    if record_times is None:
        return np.arange(times.size)
    out = []
    tol = 1e-12 * max(1.0, float(np.max(np.abs(times))))
    for t in record_times:
        hit = np.flatnonzero(np.abs(times - t) <= tol)
        if not hit.size:
            raise DomainError(f"record time {t!r} is not a grid time")
        out.append(hit[0])
    return np.array(sorted(set(out), key=lambda i: out.index(i)))


# ---------------------------------------------------------------------------
# forward Euler-Maruyama
# ---------------------------------------------------------------------------

def forward_em(spec, x0_draws, grid, seed, n_paths=None, record_times=None, stream=0):
    """Euler-Maruyama paths x_{i+1} = x_i + f(t_i) x_i dt + g(t_i) sqrt(dt) xi.

    Parameters
    ----------
    spec : ProcessSpec
    x0_draws : array_like, shape (n, d) or (d,)
        Starting points.  A single vector is broadcast to ``n_paths`` paths.
    grid : TimeGrid
    seed : int
    n_paths : int, optional
        Required when ``x0_draws`` is a single vector.
    record_times : sequence of float, optional
        Grid times to keep (default: every grid time).  Stepping stops at
        the last recorded time.
    stream : int
        Independent stream index for running several batches off one seed.
    """
    d = spec.dimension
    x0 = np.asarray(x0_draws, dtype=float)
    if x0.ndim == 1:
        if n_paths is None:
            raise DomainError("n_paths is needed with a single starting point")
        x0 = np.broadcast_to(x0.reshape(1, d), (int(n_paths), d))
    if x0.shape[1] != d:
        raise DomainError("starting points must have the process dimension")
    times = grid.times
    n = x0.shape[0]
    keep = _record_indices(times, record_times)
    slot = {int(i): k for k, i in enumerate(keep)}
    dt = np.diff(times)
    F = np.stack([spec.f(t) for t in times[:-1]]) * dt[:, None, None]
    G = np.stack([spec.g(t) for t in times[:-1]]) * np.sqrt(dt)[:, None, None]
    Ft = np.ascontiguousarray(np.swapaxes(F, 1, 2))
    Gt = np.ascontiguousarray(np.swapaxes(G, 1, 2))
    out = np.empty((n, keep.size, d))
    last = int(keep.max())  # nothing after the last recorded time is needed

    def work(k, lo, hi):
        rng = chunk_generator(seed, stream, k)
        x = np.array(x0[lo:hi])
        if 0 in slot:
            out[lo:hi, slot[0]] = x
        for i in range(last):
            xi = rng.standard_normal((hi - lo, d))
            x = x + x @ Ft[i] + xi @ Gt[i]
            j = slot.get(i + 1)
            if j is not None:
                out[lo:hi, j] = x

    _run_chunks(n, work)
    return TrajectoryBatch(times[keep], out, "forward", int(seed), "em", grid)


# ---------------------------------------------------------------------------
# exact backward trajectory and probability flow
# ---------------------------------------------------------------------------

def _vinv_T(tables, vector):
    VT = tables.V(tables.horizon)
    try:
        return np.linalg.solve(VT, vector.T).T
    except np.linalg.LinAlgError:
        raise NumericalError("V(T) is singular", time=tables.horizon) from None


def fixed_epsilon(tables, x0, xT, pin_endpoint=False):
    """eps = V^{-1}(T) x_T, or V^{-1}(T)(x_T - U(T) x0) with ``pin_endpoint``."""
    xT = np.asarray(xT, dtype=float)
    if pin_endpoint:
        xT = xT - np.asarray(x0, dtype=float) @ tables.U(tables.horizon).T
    return _vinv_T(tables, xT)


def exact_backward_path(tables, x0, xT, t, pin_endpoint=False):
    """U(t) x0 + V(t) V^{-1}(T) x_T.

    At t = 0 this is x0 exactly.  At t = T it is x_T + U(T) x0; with
    ``pin_endpoint`` the noise vector is V^{-1}(T)(x_T - U(T) x0) so the
    path passes through x_T.  Inputs may be batches of shape (m, d).
    """
    x0 = np.asarray(x0, dtype=float)
    eps = fixed_epsilon(tables, x0, xT, pin_endpoint)
    if t == 0.0:
        return np.broadcast_to(x0, np.broadcast_shapes(x0.shape, eps.shape)).copy()
    return x0 @ tables.U(t).T + eps @ tables.V(t).T


def _score_fn(score):
    if isinstance(score, ScoreModel):
        return score.__call__
    return score


def probability_flow_integrate(spec, tables, score, x_start, t_start, t_end, steps,
                               t_min=None, record_times=None, spacing="uniform"):
    """RK4 integration of dx/dt = f x - (1/2) D score(x, t).

    Integration may run backward (``t_end < t_start``).  The end time is
    floored at ``t_min`` (default 1e-4 T), where the score is still finite.
    With ``record_times`` the step sequence is split so each requested time
    is hit exactly; the return value is then ``(times, states)`` with
    states of shape (len(times), ..., d).  Otherwise the final state.

    ``spacing='geometric'`` places steps in geometric progression, keeping
    h/t fixed; the flow stiffens like 1/t near 0, where uniform steps lose
    accuracy long before they lose stability.
    """
    if spacing not in ("uniform", "geometric"):
        raise DomainError(f"unknown spacing {spacing!r}")
    fn = _score_fn(score)
    T = spec.horizon
    t_min = 1e-4 * T if t_min is None else t_min
    if t_end < t_min:
        t_end = t_min
    if t_start < t_min:
        raise DomainError("t_start lies below the integration floor")
    if steps < 1:
        raise DomainError("steps must be >= 1")
    x = np.asarray(x_start, dtype=float)

    if isinstance(score, ScoreModel) and score.variant == "single-point":
        # the flow is affine in x; k2/k3 and k4/next-k1 share evaluation times
        cache = {}

        def rhs(t, y):
            if t not in cache:
                if len(cache) > 4:
                    cache.clear()
                A, b = score.affine(t)
                D = spec.D(t)
                cache[t] = ((spec.f(t) - 0.5 * D @ A).T, -0.5 * D @ b)
            At, c = cache[t]
            return y @ At + c
    else:
        def rhs(t, y):
            return y @ spec.f(t).T - 0.5 * fn(y, t) @ spec.D(t).T

    marks = [t_start]
    if record_times is not None:
        lo, hi = min(t_start, t_end), max(t_start, t_end)
        inner = sorted({float(r) for r in record_times if lo < r < hi}, reverse=bool(t_end < t_start))
        marks += inner
    marks.append(t_end)
    span = abs(t_end - t_start)
    states = [x.copy()]
    if spacing == "geometric":
        span = abs(math.log(t_end / t_start))
    for a, b in zip(marks[:-1], marks[1:]):
        width = abs(math.log(b / a)) if spacing == "geometric" else abs(b - a)
        m = max(1, int(round(steps * width / span))) if span > 0 else 1
        if spacing == "geometric":
            nodes = a * (b / a) ** (np.arange(m + 1) / m)
        else:
            nodes = a + (b - a) * np.arange(m + 1) / m
        nodes[-1] = b
        for k in range(m):
            t, h = nodes[k], nodes[k + 1] - nodes[k]
            k1 = rhs(t, x)
            k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = rhs(nodes[k + 1], x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        states.append(x.copy())
    if record_times is None:
        return x
    return np.array(marks), np.stack(states)


# ---------------------------------------------------------------------------
# reverse SDE family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReverseConfig:
    """Settings for reverse-time generation.

    ``lam`` is the noise multiplier of the reverse SDE family (0 gives the
    probability flow); ``epsilon_mode`` applies to EI/DDIM/paDDIM chains.
    """

    lam: float
    score: object
    epsilon_mode: str = "state-dependent"
    t_min: float | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ContractError(f"lambda must be non-negative, got {self.lam!r}")
        if self.epsilon_mode not in EPS_MODES:
            raise ContractError(f"unknown epsilon mode {self.epsilon_mode!r}")


def reverse_grid(grid, t_min):
    """Grid times >= t_min in decreasing order, ending exactly at t_min."""
    t = grid.times[grid.times > t_min * (1 + 1e-12)][::-1]
    return np.append(t, t_min)


def reverse_sde_sample(spec, tables, config, xT_draws, grid, seed, n_paths=None,
                       record_times=None, stream=0, t_stop=None):
    """Euler-Maruyama on dx = [f x - (1 + lam^2)/2 D score] dt + lam g dw, dt < 0.

    Time runs from T down to ``config.t_min`` (default 1e-4 T) or ``t_stop``
    over the reversed grid.  A single-point score is applied through its
    affine form, precomputed per step.
    """
    d = spec.dimension
    T = spec.horizon
    t_min = 1e-4 * T if config.t_min is None else config.t_min
    stop = t_min if t_stop is None else max(t_min, float(t_stop))
    times = reverse_grid(grid, stop)
    xT = np.asarray(xT_draws, dtype=float)
    if xT.ndim == 1:
        if n_paths is None:
            raise DomainError("n_paths is needed with a single terminal point")
        xT = np.broadcast_to(xT.reshape(1, d), (int(n_paths), d))
    n = xT.shape[0]
    keep = _record_indices(times, record_times)
    slot = {int(i): k for k, i in enumerate(keep)}
    lam = float(config.lam)
    c = 0.5 * (1.0 + lam * lam)
    dt = np.diff(times)                      # negative
    affine = isinstance(config.score, ScoreModel) and config.score.variant == "single-point"
    steps = times.size - 1
    fns = _score_fn(config.score)
    if affine:
        # drift(x) = x A_k^T + b_k
        At = np.empty((steps, d, d))
        b = np.empty((steps, d))
        for k in range(steps):
            t = times[k]
            S_A, S_b = config.score.affine(t)
            Dm = spec.D(t)
            At[k] = ((spec.f(t) - c * Dm @ S_A) * dt[k]).T
            b[k] = -c * Dm @ S_b * dt[k]
    else:
        Ft = np.stack([spec.f(t).T for t in times[:-1]]) * dt[:, None, None]
        Dt = np.stack([spec.D(t).T for t in times[:-1]]) * (c * dt)[:, None, None]
    Gt = np.stack([spec.g(t).T for t in times[:-1]]) * (lam * np.sqrt(-dt))[:, None, None]
    out = np.empty((n, keep.size, d))

    def work(k, lo, hi):
        rng = chunk_generator(seed, stream, k)
        x = np.array(xT[lo:hi])
        if 0 in slot:
            out[lo:hi, slot[0]] = x
        for i in range(steps):
            if affine:
                nxt = x + x @ At[i] + b[i]
            else:
                nxt = x + x @ Ft[i] - fns(x, times[i]) @ Dt[i]
            if lam > 0:
                nxt = nxt + rng.standard_normal((hi - lo, d)) @ Gt[i]
            x = nxt
            j = slot.get(i + 1)
            if j is not None:
                out[lo:hi, j] = x

    _run_chunks(n, work)
    return TrajectoryBatch(times[keep], out, "reverse", int(seed), "sde", grid, {"lambda": lam})


# ---------------------------------------------------------------------------
# exponential integrator, DDIM and paDDIM steps
# ---------------------------------------------------------------------------

def _check_on_grid(tables, times, interpolate):
    if interpolate or tables.spec.kind == "ddim-plain-vanilla":
        return
    for t in times:
        if tables.grid.index_of(t) is None:
            raise DomainError(f"time {t!r} is off the grid; pass interpolate=True")


def ei_step(tables, x_s, t_s, t_prev, eps, interpolate=False, ordering="consistent"):
    """Exact one-step propagation from t_s down to t_prev for constant eps.

    x_prev = K(t_prev, t_s) x_s + U(t_prev) [U^{-1}(t_prev) V(t_prev) - U^{-1}(t_s) V(t_s)] eps

    ``ordering='literal'`` multiplies V U^{-1} instead of U^{-1} V; the two
    agree only when U and V commute and the option exists to show that.
    """
    if t_prev > t_s:
        raise DomainError("ei_step runs backward: t_prev must not exceed t_s")
    _check_on_grid(tables, (t_s, t_prev), interpolate)
    x_s = np.asarray(x_s, dtype=float)
    if t_prev == t_s:
        return x_s.copy()
    eps = np.asarray(eps, dtype=float)
    U_p, Ui_p = tables.U(t_prev), tables.U_inv(t_prev)
    Ui_s = tables.U_inv(t_s)
    V_p = tables.V(t_prev) if t_prev > 0 else np.zeros_like(U_p)
    V_s = tables.V(t_s)
    if ordering == "consistent":
        M = U_p @ (Ui_p @ V_p - Ui_s @ V_s)
    elif ordering == "literal":
        M = U_p @ (V_p @ Ui_p - V_s @ Ui_s)
    else:
        raise DomainError(f"unknown ordering {ordering!r}")
    K = U_p @ Ui_s
    return x_s @ K.T + eps @ M.T


def ddim_step(alpha_s, alpha_prev, x_s, eps):
    """x_prev = sqrt(a_prev / a_s) x_s + sqrt(a_prev) (sqrt(1/a_prev - 1) - sqrt(1/a_s - 1)) eps."""
    a_s, a_p = float(alpha_s), float(alpha_prev)
    if not (0 < a_s <= 1 and 0 < a_p <= 1):
        raise DomainError(f"alphas must lie in (0, 1], got {a_s!r} and {a_p!r}")
    x_s = np.asarray(x_s, dtype=float)
    if a_s == a_p:
        return x_s.copy()
    coef = math.sqrt(a_p) * (math.sqrt(1.0 / a_p - 1.0) - math.sqrt(1.0 / a_s - 1.0))
    return math.sqrt(a_p / a_s) * x_s + coef * np.asarray(eps, dtype=float)


def _scalar_ddim(a_s, a_p, x, e):
    coef = np.sqrt(a_p) * (np.sqrt(1.0 / a_p - 1.0) - np.sqrt(1.0 / a_s - 1.0))
    return np.sqrt(a_p / a_s) * x + coef * e


def paddim_step(axes, t_s, t_prev, x_s, eps):
    """Per-axis DDIM step along orthonormal axes, each with its own schedule.

    Components x_m = d_m^T x and eps_m = d_m^T eps follow the scalar DDIM
    recursion with alpha_m; the orthogonal complement of the axes follows the
    set's default schedule.
    """
    A = np.asarray(axes.axes, dtype=float)
    k, d = A.shape
    if not isinstance(axes, AxisScheduleSet):   # validated and frozen at construction otherwise
        dev = np.max(np.abs(A @ A.T - np.eye(k)))
        if dev > 1e-10:
            raise ContractError(f"axes are not orthonormal (Gram deviation {dev:.2e})")
    if len(axes.schedules) != k:
        raise ContractError("paddim_step needs one schedule per axis")
    if k < d and axes.default_schedule is None:
        raise ContractError("axes do not span the space and no default schedule is set")
    x_s = np.asarray(x_s, dtype=float)
    eps = np.asarray(eps, dtype=float)
    a_s = np.array([float(s.alpha(t_s)) for s in axes.schedules])
    a_p = np.array([float(s.alpha(t_prev)) for s in axes.schedules])
    if np.any(a_s <= 0) or np.any(a_p <= 0):
        raise DomainError("per-axis alpha must be positive at both times")
    xm = x_s @ A.T
    em = eps @ A.T
    out = _scalar_ddim(a_s, a_p, xm, em) @ A
    if k < d:
        P = np.eye(d) - A.T @ A
        ds, dp = float(axes.default_schedule.alpha(t_s)), float(axes.default_schedule.alpha(t_prev))
        out = out + _scalar_ddim(ds, dp, x_s @ P, eps @ P)
    return out


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

def chain_times(grid, steps, t_end=0.0):
    """``steps + 1`` decreasing grid times from T to ``t_end``, evenly spread over the grid."""
    times = grid.times
    lo = 0 if t_end == 0.0 else grid.index_of(t_end)
    if lo is None:
        raise DomainError(f"chain end {t_end!r} is not a grid time")
    idx = np.unique(np.round(np.linspace(lo, times.size - 1, steps + 1)).astype(int))
    return times[idx][::-1]


def _epsilon(mode, tables, x, t, score, eps_fixed):
    if mode == "state-dependent":
        s = _score_fn(score)(x, t)
        V = tables.V(t)
        return -(s @ V)
    return eps_fixed


def ei_chain(tables, x_start, times_desc, mode, score=None, eps=None, interpolate=False):
    """Chain of EI steps over decreasing ``times_desc``; returns states at every time.

    ``mode`` is ``fixed-vector`` (use ``eps``), ``from-xT`` (eps = V^{-1}(T) x_start)
    or ``state-dependent`` (eps = -V^T score at each step's start).
    """
    x = np.asarray(x_start, dtype=float)
    if mode == "from-xT":
        eps = _vinv_T(tables, x)
    elif mode == "fixed-vector" and eps is None:
        raise DomainError("fixed-vector mode needs eps")
    elif mode == "state-dependent" and score is None:
        raise DomainError("state-dependent mode needs a score")
    elif mode not in EPS_MODES:
        raise DomainError(f"unknown epsilon mode {mode!r}")
    states = [x]
    for t_s, t_p in zip(times_desc[:-1], times_desc[1:]):
        e = _epsilon(mode, tables, x, t_s, score, eps)
        x = ei_step(tables, x, t_s, t_p, e, interpolate=interpolate)
        states.append(x)
    return np.stack(states)


def ddim_chain(alphas_desc, x_start, mode, eps=None, eps_fn=None):
    """Scalar DDIM recursion over increasing alphas (decreasing times)."""
    x = np.asarray(x_start, dtype=float)
    if mode == "from-xT":
        eps = x / math.sqrt(1.0 - alphas_desc[0])
    states = [x]
    for a_s, a_p in zip(alphas_desc[:-1], alphas_desc[1:]):
        e = eps_fn(x, a_s) if mode == "state-dependent" else eps
        x = ddim_step(a_s, a_p, x, e)
        states.append(x)
    return np.stack(states)


def paddim_chain(axes, times_desc, x_start, mode, eps=None, eps_fn=None):
    """paDDIM recursion over decreasing ``times_desc``."""
    x = np.asarray(x_start, dtype=float)
    if mode == "from-xT":
        T = times_desc[0]
        A = axes.axes
        scale = np.array([1.0 / math.sqrt(1.0 - float(s.alpha(T))) for s in axes.schedules])
        eps = ((x @ A.T) * scale) @ A
        if A.shape[0] < A.shape[1]:
            P = np.eye(A.shape[1]) - A.T @ A
            eps = eps + (x @ P) / math.sqrt(1.0 - float(axes.default_schedule.alpha(T)))
    states = [x]
    for t_s, t_p in zip(times_desc[:-1], times_desc[1:]):
        e = eps_fn(x, t_s) if mode == "state-dependent" else eps
        x = paddim_step(axes, t_s, t_p, x, e)
        states.append(x)
    return np.stack(states)
