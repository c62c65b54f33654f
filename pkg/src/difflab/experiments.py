"""
Config-driven experiments.  Each experiment reads a parsed config mapping,
writes CSV tables into an output directory and returns the written paths.

Config layout::

    {
      "experiment": "<tag>" or ["<tag>", ...],
      "seed": 0,
      "process": {...},            # see process.process_from_dict
      "params": {...},             # experiment specific
      "cases": [{"name": ..., "process": {...}, "params": {...}}, ...]
    }
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .covariance import (
    make_tables, sigma_by_ode, sigma_by_quadrature, sigma_ddim_closed_form, v_factor,
    v_identity_residual, fokker_planck_residual,
)
from .equilibrium import (
    circulating_current, current_closed_form, divergence, planar_rotation_basis,
    probability_current, rotating_basis_perturbation, rotating_diagonal_exact, solve_Q,
    stationary_sigma,
)
from .errors import ConfigError, NumericalError
from .evolution import build_evolution
from .process import (
    AxisScheduleSet, TimeGrid, exponential_schedule, planar_rotation, process_from_dict,
    schedule_from_dict,
)
from .samplers import (
    ReverseConfig, chain_times, chunk_generator, ddim_chain, ddim_step, ei_chain, ei_step,
    ensemble_moments, exact_backward_path, fixed_epsilon, forward_em, paddim_chain, paddim_step,
    probability_flow_integrate, reverse_sde_sample,
)
from .score import ScoreModel, exact_score, mixture_score
from ._io import write_csv

EXPERIMENTS = (
    "forward-moments", "covariance-methods", "backward-exact", "ei-chain", "ddim-chain",
    "paddim-chain", "lambda-marginals", "score-check", "equilibrium", "rotating-basis",
)


def _vec(cfg, key, where, default=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing parameter {key!r}", field=f"{where}.{key}")
        return np.asarray(default, dtype=float)
    try:
        return np.asarray(cfg[key], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {key!r} must be numeric", field=f"{where}.{key}") from None


def _cases(cfg):
    """(name, process config, params) for each case, falling back to the top level."""
    base = cfg.get("params", {}) or {}
    if "cases" in cfg:
        out = []
        for i, case in enumerate(cfg["cases"]):
            if not isinstance(case, dict):
                raise ConfigError("each case must be a mapping", field=f"cases[{i}]")
            params = dict(base)
            params.update(case.get("params", {}) or {})
            out.append((case.get("name", f"case{i}"), case.get("process"), params, f"cases[{i}]"))
        return out
    return [("main", cfg.get("process"), base, "")]


def _process(pcfg, where):
    if pcfg is None:
        raise ConfigError("missing 'process' section", field=f"{where}.process" if where else "process")
    return process_from_dict(pcfg, f"{where}.process" if where else "process")


def _names(prefix, d, matrix=False):
    if matrix:
        return [f"{prefix}_{i}{j}" for i in range(d) for j in range(d)]
    return [f"{prefix}_{i}" for i in range(d)]


def _check_evolution(table):
    gap = np.linalg.norm(table.U @ table.U_inv - np.eye(table.dimension), axis=(1, 2))
    if np.max(gap) > 1e-8:
        i = int(np.argmax(gap))
        t = table.grid.times[i]
        raise NumericalError(f"evolution: U U^-1 deviates from I by {gap[i]:.2e} at t={t!r}", time=t)


# ---------------------------------------------------------------------------

def forward_moments(cfg, out, seed, paths_to_write=0):
    files = []
    for name, pcfg, params, where in _cases(cfg):
        spec, grid = _process(pcfg, where)
        d = spec.dimension
        x0 = _vec(params, "x0", "params")
        n_paths = int(params.get("n_paths", 10000))
        rec = [float(t) for t in params.get("record_times", [grid.horizon])]
        tables = make_tables(spec, grid, with_V=False)
        _check_evolution(tables.evolution)
        batch = forward_em(spec, x0, grid, seed, n_paths=n_paths, record_times=rec)
        if d == 1:
            header = ["t", "mean", "variance", "mean_closed_form", "variance_closed_form",
                      "se_mean", "se_variance", "n_paths"]
        else:
            header = (["t"] + _names("mean", d) + _names("cov", d, True) + _names("mean_closed_form", d)
                      + _names("cov_closed_form", d, True) + _names("se_mean", d) + _names("se_cov", d, True)
                      + ["n_paths"])
        rows = []
        for t in rec:
            mom = ensemble_moments(batch.at(t))
            m_cf = tables.K(t, 0.0) @ x0
            S_cf = tables.Sigma(t)
            if d == 1:
                rows.append([t, mom["mean"][0], mom["cov"][0, 0], m_cf[0], S_cf[0, 0],
                             mom["se_mean"][0], mom["se_cov"][0, 0], n_paths])
            else:
                rows.append([t, *mom["mean"], *mom["cov"].ravel(), *m_cf, *S_cf.ravel(),
                             *mom["se_mean"], *mom["se_cov"].ravel(), n_paths])
        suffix = "" if name == "main" else f"_{name}"
        files.append(write_csv(out / f"forward_moments{suffix}.csv", header, rows))
        if paths_to_write:
            k = min(paths_to_write, batch.n_paths)
            sub = batch.paths[:k]
            n_t = sub.shape[1]
            rows = np.column_stack([np.repeat(np.arange(k), n_t), np.tile(batch.times, k), sub.reshape(-1, d)])
            files.append(write_csv(out / f"forward_paths{suffix}.csv", ["path_id", "t"] + _names("x", d), rows))
    return files


def covariance_methods(cfg, out, seed):
    files = []
    summary = []
    for name, pcfg, params, where in _cases(cfg):
        spec, grid = _process(pcfg, where)
        d = spec.dimension
        table = build_evolution(spec, grid)
        _check_evolution(table)
        quad = sigma_by_quadrature(table, spec, rule=params.get("rule", "corrected"))
        ode = sigma_by_ode(spec, grid)
        quad.check()
        closed = sigma_ddim_closed_form(table) if spec.is_ddim else None
        qo = np.linalg.norm(quad.Sigma - ode.Sigma, axis=(1, 2))
        if closed is not None:
            qc = np.linalg.norm(quad.Sigma - closed.Sigma, axis=(1, 2))
            oc = np.linalg.norm(ode.Sigma - closed.Sigma, axis=(1, 2))
        else:
            qc = oc = np.full(qo.shape, np.nan)
        files.append(write_csv(
            out / f"covariance_{name}.csv", ["t", "quad_vs_ode", "quad_vs_closed", "ode_vs_closed"],
            np.column_stack([grid.times, qo, qc, oc])))
        vvt = vid = np.nan
        if params.get("v_factor", True):
            track = v_factor(spec, table, quad)
            track.check()
            vvt = float(np.max(np.linalg.norm(track.V @ np.swapaxes(track.V, 1, 2) - track.Sigma, axis=(1, 2))[1:]))
            vid = v_identity_residual(spec, table, track)
        else:
            track = quad
        track.to_csv(out / f"sigma_{name}.csv")
        table.to_csv(out / f"evolution_{name}.csv")
        files += [out / f"sigma_{name}.csv", out / f"evolution_{name}.csv"]
        summary.append([name, spec.kind, grid.n_steps, np.max(qo), np.max(qc), np.max(oc), vvt, vid])
    files.append(write_csv(
        out / "covariance_summary.csv",
        ["case", "kind", "n_steps", "max_quad_vs_ode", "max_quad_vs_closed", "max_ode_vs_closed",
         "max_vvt_gap", "v_identity_residual"], summary))
    return files


def backward_exact(cfg, out, seed):
    (name, pcfg, params, where), = _cases(cfg)[:1]
    spec, grid = _process(pcfg, where)
    d = spec.dimension
    T = spec.horizon
    x0 = _vec(params, "x0", "params")
    xT = _vec(params, "xT", "params")
    times = sorted((float(t) for t in params.get("times", np.linspace(0.1, 0.9, 8) * T)), reverse=True)
    steps = int(params.get("steps", 10000))
    pin = bool(params.get("pin_endpoint", False))
    tables = make_tables(spec, grid)
    score = ScoreModel.single(x0, tables)
    start = exact_backward_path(tables, x0, xT, T, pin_endpoint=pin)
    marks, states = probability_flow_integrate(spec, tables, score, start, T, times[-1], steps, record_times=times)
    rows = []
    for t, x in zip(marks, states):
        cf = exact_backward_path(tables, x0, xT, float(t), pin_endpoint=pin)
        rows.append([t, *cf, *x, float(np.max(np.abs(cf - x)))])
    header = ["t"] + _names("closed_form", d) + _names("pf_ode", d) + ["max_abs_diff"]
    return [write_csv(out / "backward_exact.csv", header, rows)]


def ei_chain_experiment(cfg, out, seed):
    (name, pcfg, params, where), = _cases(cfg)[:1]
    spec, grid = _process(pcfg, where)
    d = spec.dimension
    T = spec.horizon
    tables = make_tables(spec, grid)
    rng = chunk_generator(seed, 0, 0)
    n = int(params.get("n_triples", 20))
    scale = float(params.get("x0_scale", 2.0))
    single_rows = []
    for k in range(n):
        x0 = rng.normal(size=d) * scale
        xT = rng.normal(size=d)
        t = float(rng.uniform(0.0, T))
        eps = fixed_epsilon(tables, x0, xT)
        start = exact_backward_path(tables, x0, xT, T)
        one = ei_step(tables, start, T, t, eps, interpolate=True)
        cf = exact_backward_path(tables, x0, xT, t)
        single_rows.append([k, t, *x0, *xT, *one, *cf, float(np.max(np.abs(one - cf)))])
    files = [write_csv(out / "ei_single_step.csv",
                       ["trial", "t"] + _names("x0", d) + _names("xT", d) + _names("ei", d)
                       + _names("closed_form", d) + ["max_abs_diff"], single_rows)]

    steps = int(params.get("chain_steps", 50))
    x0 = _vec(params, "x0", "params", default=np.ones(d))
    xT = _vec(params, "xT", "params", default=np.full(d, 0.3))
    times = chain_times(grid, steps)
    eps = fixed_epsilon(tables, x0, xT)
    start = exact_backward_path(tables, x0, xT, T)
    states = ei_chain(tables, start, times, "fixed-vector", eps=eps)
    rows = []
    for t, x in zip(times, states):
        cf = exact_backward_path(tables, x0, xT, float(t))
        rows.append([t, *x, *cf, float(np.max(np.abs(x - cf)))])
    files.append(write_csv(out / "ei_chain.csv", ["t"] + _names("ei", d) + _names("closed_form", d)
                           + ["max_abs_diff"], rows))

    score = ScoreModel.single(x0, tables)
    states = ei_chain(tables, start, times, "state-dependent", score=score)
    rows = [[t, *x, float(np.max(np.abs(x - exact_backward_path(tables, x0, xT, float(t)))))]
            for t, x in zip(times, states)]
    files.append(write_csv(out / "ei_chain_state_dependent.csv", ["t"] + _names("ei", d) + ["max_abs_diff"], rows))
    return files


def ddim_chain_experiment(cfg, out, seed):
    (name, pcfg, params, where), = _cases(cfg)[:1]
    spec, grid = _process(pcfg, where)
    if spec.kind != "ddim-plain-vanilla":
        raise ConfigError("ddim-chain needs a ddim-plain-vanilla process", field="process.kind")
    d = spec.dimension
    T = spec.horizon
    tables = make_tables(spec, grid)
    sched = spec.schedule
    rng = chunk_generator(seed, 1, 0)
    a_min = float(sched.alpha(T))
    rows = []
    for k in range(int(params.get("trials", 1000))):
        t_s, t_p = sorted(rng.uniform(0.0, T, size=2), reverse=True)
        a_s, a_p = float(sched.alpha(t_s)), float(sched.alpha(t_p))
        x = rng.normal(size=d)
        e = rng.normal(size=d)
        dd = ddim_step(a_s, a_p, x, e)
        ei = ei_step(tables, x, float(t_s), float(t_p), e, interpolate=True)
        rows.append([k, a_s, a_p, float(np.max(np.abs(dd - ei)))])
    files = [write_csv(out / "ddim_vs_ei.csv", ["trial", "alpha_s", "alpha_prev", "max_abs_diff"], rows)]

    steps = int(params.get("chain_steps", 50))
    xT = _vec(params, "xT", "params", default=np.full(d, 0.3))
    x0 = np.zeros(d)
    times = chain_times(grid, steps)
    alphas = np.array([float(sched.alpha(t)) for t in times])
    states = ddim_chain(alphas, xT, "from-xT")
    rows = []
    for t, a, x in zip(times, alphas, states):
        cf = exact_backward_path(tables, x0, xT, float(t))
        rows.append([t, a, *x, *cf, float(np.max(np.abs(x - cf)))])
    files.append(write_csv(out / "ddim_chain.csv", ["t", "alpha"] + _names("ddim", d) + _names("closed_form", d)
                           + ["max_abs_diff"], rows))
    return files


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def paddim_chain_experiment(cfg, out, seed):
    (name, pcfg, params, where), = _cases(cfg)[:1]
    spec, grid = _process(pcfg, where)
    if spec.kind != "paddim":
        raise ConfigError("paddim-chain needs a paddim process", field="process.kind")
    axes = spec.axis_set
    d = spec.dimension
    T = spec.horizon
    rng = chunk_generator(seed, 2, 0)
    trials = int(params.get("trials", 1000))
    theta = float(params.get("theta", math.pi / 6))
    common = axes.schedules[0]
    coord = AxisScheduleSet(np.eye(d), tuple(axes.schedules[m % len(axes.schedules)] for m in range(d)),
                            axes.default_schedule)
    R = planar_rotation(theta, d)
    rotated = AxisScheduleSet(R.T, coord.schedules, coord.default_schedule)
    rows = []
    for k in range(trials):
        t_s, t_p = (float(v) for v in sorted(rng.uniform(0.0, T, size=2), reverse=True))
        x = rng.normal(size=d)
        e = rng.normal(size=d)
        # identical schedules on random orthonormal axes reduce to scalar DDIM
        same = AxisScheduleSet(_random_rotation(rng, d), (common,) * d)
        pa = paddim_step(same, t_s, t_p, x, e)
        dd = ddim_step(float(common.alpha(t_s)), float(common.alpha(t_p)), x, e)
        rows.append([k, "identical-schedules", float(np.max(np.abs(pa - dd)))])
        # coordinate axes: each component follows its own scalar recursion
        pa = paddim_step(coord, t_s, t_p, x, e)
        per = np.array([ddim_step(float(s.alpha(t_s)), float(s.alpha(t_p)), x[m], e[m])
                        for m, s in enumerate(coord.schedules)])
        rows.append([k, "coordinate-axes", float(np.max(np.abs(pa - per)))])
        # rotated axes: conjugation by the rotation
        pa = paddim_step(rotated, t_s, t_p, x, e)
        back = R @ paddim_step(coord, t_s, t_p, R.T @ x, R.T @ e)
        rows.append([k, "rotated-equivariance", float(np.max(np.abs(pa - back)))])
    files = [write_csv(out / "paddim_reductions.csv", ["trial", "check", "max_abs_diff"], rows)]

    steps = int(params.get("chain_steps", 50))
    xT = _vec(params, "xT", "params", default=np.full(d, 0.3))
    times = chain_times(grid, steps)
    states = paddim_chain(axes, times, xT, "from-xT")
    A = axes.axes
    eps_axes = xT @ A.T / np.sqrt([1.0 - float(s.alpha(T)) for s in axes.schedules])
    rows = []
    for t, x in zip(times, states):
        cf = (eps_axes * np.sqrt([1.0 - float(s.alpha(t)) for s in axes.schedules])) @ A
        if A.shape[0] < d:
            P = np.eye(d) - A.T @ A
            aT, at = float(axes.default_schedule.alpha(T)), float(axes.default_schedule.alpha(t))
            cf = cf + (xT @ P) * math.sqrt((1.0 - at) / (1.0 - aT))
        rows.append([t, *x, *cf, float(np.max(np.abs(x - cf)))])
    files.append(write_csv(out / "paddim_chain.csv", ["t"] + _names("paddim", d) + _names("closed_form", d)
                           + ["max_abs_diff"], rows))
    return files


def lambda_marginals(cfg, out, seed):
    (name, pcfg, params, where), = _cases(cfg)[:1]
    spec, grid = _process(pcfg, where)
    d = spec.dimension
    T = spec.horizon
    x0 = _vec(params, "x0", "params")
    lams = [float(v) for v in params.get("lambdas", [0.0, 1.0, 2.0])]
    n_paths = int(params.get("n_paths", 100000))
    t_check = float(params.get("t_check", 1.0))
    tables = make_tables(spec, grid)
    score = ScoreModel.single(x0, tables)
    mean_T = tables.K(T, 0.0) @ x0
    chol_T = np.linalg.cholesky(tables.Sigma(T))
    rows, moms = [], []
    for k, lam in enumerate(lams):
        # terminal draws from the exact marginal at T, one stream per lambda
        rng = chunk_generator(seed, 1000 + k, 0)
        xT = mean_T + rng.standard_normal((n_paths, d)) @ chol_T.T
        batch = reverse_sde_sample(spec, tables, ReverseConfig(lam, score), xT, grid, seed,
                                   record_times=[t_check], stream=k, t_stop=t_check)
        mom = ensemble_moments(batch.at(t_check))
        moms.append(mom)
        rows.append([lam, t_check, n_paths, *mom["mean"], *mom["se_mean"], *mom["cov"].ravel(),
                     *mom["se_cov"].ravel(), *(tables.K(t_check, 0.0) @ x0), *tables.Sigma(t_check).ravel()])
    header = (["lambda", "t", "n_paths"] + _names("mean", d) + _names("se_mean", d) + _names("cov", d, True)
              + _names("se_cov", d, True) + _names("mean_closed_form", d) + _names("cov_closed_form", d, True))
    files = [write_csv(out / "lambda_marginals.csv", header, rows)]
    pairs = []
    iu = np.triu_indices(d)
    for a in range(len(lams)):
        for b in range(a + 1, len(lams)):
            ma, mb = moms[a], moms[b]
            for i in range(d):
                diff = ma["mean"][i] - mb["mean"][i]
                se = math.hypot(ma["se_mean"][i], mb["se_mean"][i])
                pairs.append([lams[a], lams[b], f"mean_{i}", diff, se, abs(diff) / se])
            for i, j in zip(*iu):
                diff = ma["cov"][i, j] - mb["cov"][i, j]
                se = math.hypot(ma["se_cov"][i, j], mb["se_cov"][i, j])
                pairs.append([lams[a], lams[b], f"cov_{i}{j}", diff, se, abs(diff) / se])
    files.append(write_csv(out / "lambda_pairs.csv",
                           ["lambda_a", "lambda_b", "statistic", "difference", "se", "z"], pairs))
    return files


def _fd_gradient(fn, x, h):
    d = x.shape[1]
    g = np.empty_like(x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def score_check(cfg, out, seed):
    (name, pcfg, params, where), = _cases(cfg)[:1]
    spec, grid = _process(pcfg, where)
    d = spec.dimension
    t = float(params.get("t", grid.times[len(grid) // 2]))
    h = float(params.get("h", 1e-5))
    n = int(params.get("n_probes", 100))
    x0 = _vec(params, "x0", "params")
    points = _vec(params, "points", "params")
    weights = params.get("weights")
    tables = make_tables(spec, grid)
    single = ScoreModel.single(x0, tables)
    mix = ScoreModel.mixture(points, tables, weights)
    one = ScoreModel.mixture(x0[None, :], tables)
    rng = chunk_generator(seed, 3, 0)
    chol = np.linalg.cholesky(tables.Sigma(t))
    rows = []
    probes = tables.K(t, 0.0) @ x0 + rng.standard_normal((n, d)) @ chol.T
    err = np.max(np.abs(exact_score(single, probes, t) - _fd_gradient(lambda x: single.log_density(x, t), probes, h)), axis=1)
    rows += [[k, "single-point", *p, e] for k, (p, e) in enumerate(zip(probes, err))]
    centre = points[rng.integers(0, points.shape[0], size=n)] @ tables.K(t, 0.0).T
    mprobes = centre + rng.standard_normal((n, d)) @ chol.T
    err = np.max(np.abs(mixture_score(mix, mprobes, t) - _fd_gradient(lambda x: mix.log_density(x, t), mprobes, h)), axis=1)
    rows += [[k, "mixture", *p, e] for k, (p, e) in enumerate(zip(mprobes, err))]
    red = np.max(np.abs(mixture_score(one, probes, t) - exact_score(single, probes, t)), axis=1)
    rows += [[k, "mixture-n1-vs-single", *p, e] for k, (p, e) in enumerate(zip(probes, red))]
    return [write_csv(out / "score_check.csv", ["probe", "check"] + _names("x", d) + ["max_abs_error"], rows)]


def _box(params, key, d, default_n=5):
    box = params.get(key, [[-2.0, 2.0]] * d)
    n = int(params.get(f"{key}_n", default_n))
    axes = [np.linspace(lo, hi, n) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def equilibrium(cfg, out, seed):
    params = cfg.get("params", {}) or {}
    files = []
    q_rows = []
    for i, case in enumerate(params.get("ddim_cases", [])):
        where = f"params.ddim_cases[{i}]"
        spec, grid = process_from_dict(case.get("process"), f"{where}.process")
        if not spec.is_ddim:
            raise ConfigError("ddim_cases must hold DDIM processes", field=f"{where}.process.kind")
        tables = make_tables(spec, grid, with_V=False)
        sym = 0.0
        for k, t in enumerate(grid.times):
            fS = spec.f(t) @ tables.covariance.Sigma[k]
            sym = max(sym, float(np.linalg.norm(fS - fS.T)))
        for t in np.linspace(0.0, spec.horizon, int(case.get("n_times", 9))):
            f, D = spec.f(t), spec.D(t)
            diag = solve_Q(f, D)
            S = stationary_sigma(f, D)
            q_rows.append([case.get("name", f"ddim{i}"), t, float(np.max(np.abs(diag.Q))), diag.sylvester_residual,
                           float(np.max(np.abs(S - np.eye(spec.dimension)))), sym])
    files.append(write_csv(out / "equilibrium_ddim_Q.csv",
                           ["case", "t", "max_abs_Q", "sylvester_residual", "stationary_sigma_minus_I",
                            "max_f_sigma_asymmetry"], q_rows))

    crafted = params.get("crafted", {"f": [[-1.0, 1.0], [0.0, -1.0]], "D": [[1.0, 0.0], [0.0, 1.0]]})
    f = _vec(crafted, "f", "params.crafted")
    D = _vec(crafted, "D", "params.crafted")
    d = f.shape[0]
    diag = solve_Q(f, D)
    S = stationary_sigma(f, D)
    files.append(write_csv(out / "equilibrium_crafted.csv",
                           _names("Q", d, True) + _names("stationary_sigma", d, True)
                           + ["sylvester_residual", "antisymmetry", "q_vs_sigma_relation"],
                           [[*diag.Q.ravel(), *S.ravel(), diag.sylvester_residual,
                             float(np.max(np.abs(diag.Q + diag.Q.T))),
                             float(np.max(np.abs(diag.Q - (-f @ S - 0.5 * D))))]]))
    probes = _box(params, "probe_box", d)
    stencil = float(params.get("divergence_h", 1e-4))
    Jc = circulating_current(diag.Q, S, probes)
    div = divergence(lambda x: circulating_current(diag.Q, S, x), probes, stencil)
    files.append(write_csv(out / "circulating_divergence.csv",
                           _names("x", d) + _names("Jc", d) + ["divergence"],
                           np.column_stack([probes, Jc, div])))

    fp = params.get("fokker_planck")
    if fp is not None:
        spec, grid = process_from_dict(fp.get("process"), "params.fokker_planck.process")
        x0 = _vec(fp, "x0", "params.fokker_planck")
        t = float(fp.get("t", 0.5))
        pts = _box(fp, "probe_box", spec.dimension)
        rows, prev = [], None
        for h in fp.get("h", [1e-2, 5e-3, 2.5e-3]):
            r = fokker_planck_residual(spec, x0, t, pts, float(h))
            rows.append([float(h), r, (prev / r) if prev else float("nan")])
            prev = r
        files.append(write_csv(out / "fokker_planck.csv", ["h", "residual", "ratio_to_previous"], rows))

    cur = params.get("current")
    if cur is not None:
        spec, grid = process_from_dict(cur.get("process"), "params.current.process")
        x0 = _vec(cur, "x0", "params.current")
        t = float(cur.get("t", 0.5))
        pts = _box(cur, "probe_box", spec.dimension, default_n=9)
        tables = make_tables(spec, grid, with_V=False)
        res = probability_current(spec, tables, x0, pts, t)
        cf = current_closed_form(spec, tables, x0, pts, t)
        dd = spec.dimension
        files.append(write_csv(out / "current_field.csv",
                               _names("x", dd) + _names("J", dd) + _names("J_closed_form", dd) + ["max_abs_diff"],
                               np.column_stack([pts, res.J, cf, np.max(np.abs(res.J - cf), axis=1)])))
    return files


def rotating_basis(cfg, out, seed):
    params = cfg.get("params", {}) or {}
    lam = [float(v) for v in params.get("eigenvalues", [1.0, 2.0])]
    omegas = [float(w) for w in params.get("omegas", [0.2, 0.1, 0.05])]
    T = float(params.get("horizon", 1.0))
    n = int(params.get("n_steps", 2048))
    variants = params.get("variants", ["consistent", "literal"])
    grid = TimeGrid.uniform(T, n)
    rows = []
    exact = {w: rotating_diagonal_exact(lam, w, grid) for w in omegas}
    for variant in variants:
        prev = None
        for w in omegas:
            pred = rotating_basis_perturbation(planar_rotation_basis(lam, w), grid, variant)
            ex = exact[w][-1]
            err = float(np.linalg.norm(pred.antisymmetric[-1] - ex) / np.linalg.norm(ex))
            rows.append([variant, w, w * T, int(w * T <= 0.25), err,
                         (prev / err) if prev else float("nan"),
                         float(np.max(np.abs(pred.u1[-1] - pred.u1[-1].T)))])
            prev = err
    return [write_csv(out / "rotating_basis.csv",
                      ["variant", "omega", "omega_T", "in_window", "relative_error", "ratio_to_previous",
                       "u1_asymmetry"], rows)]


RUNNERS = {
    "forward-moments": forward_moments,
    "covariance-methods": covariance_methods,
    "backward-exact": backward_exact,
    "ei-chain": ei_chain_experiment,
    "ddim-chain": ddim_chain_experiment,
    "paddim-chain": paddim_chain_experiment,
    "lambda-marginals": lambda_marginals,
    "score-check": score_check,
    "equilibrium": equilibrium,
    "rotating-basis": rotating_basis,
}


def run_experiments(cfg, out, seed):
    """Run every experiment in ``cfg`` into ``out``; return written files.

    ``experiment`` may be one tag or a list of tags sharing the top-level
    process.  Alternatively ``stages`` lists sub-configs, each with its own
    ``experiment``, ``process`` and ``params``, run in order.
    """
    if "stages" in cfg:
        files = []
        for i, stage in enumerate(cfg["stages"]):
            if not isinstance(stage, dict):
                raise ConfigError("each stage must be a mapping", field=f"stages[{i}]")
            try:
                files += run_experiments(stage, out, seed)
            except ConfigError as exc:
                if exc.field and not exc.field.startswith("stages"):
                    exc.field = f"stages[{i}].{exc.field}"
                raise
        return files
    tags = cfg.get("experiment")
    if tags is None:
        raise ConfigError("missing 'experiment'", field="experiment")
    tags = [tags] if isinstance(tags, str) else list(tags)
    files = []
    for tag in tags:
        if tag not in RUNNERS:
            raise ConfigError(f"unknown experiment {tag!r}; expected one of {EXPERIMENTS}", field="experiment")
        files += RUNNERS[tag](cfg, Path(out), seed)
    return files
