"""Command-line entry point: ``difflab <subcommand> --config FILE [--seed N] [--out DIR]``.

Exit status 0 on success, 2 on configuration or schema errors, 3 on
numerical failures.  Config files are JSON; ``pkg:<name>`` refers to a
config shipped with the package (``difflab list-configs`` shows them).
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
import time
from importlib import metadata, resources
from pathlib import Path

import numpy as np
import scipy

from . import experiments
from .errors import ConfigError, ContractError, DomainError, NumericalError, ScheduleError
from ._io import sha256_file, write_csv, write_json

log = logging.getLogger("difflab")

SUBCOMMAND_EXPERIMENTS = {
    "simulate-forward": "forward-moments",
    "covariance": "covariance-methods",
    "reverse-path": "backward-exact",
    "diagnose-equilibrium": "equilibrium",
    "rotating-basis": "rotating-basis",
}
SAMPLE_METHODS = ("em", "sde", "pf-ode", "ei", "ddim", "paddim")


def packaged_configs():
    root = resources.files("difflab") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _locate_field(text, field):
    """Best-effort line number of the last key of a dotted field path."""
    if not field:
        return None
    key = re.split(r"[.\[]", field.rstrip("]"))[-1]
    if not key or key.isdigit():
        key = re.split(r"[.\[]", field)[0]
    for n, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return n
    return None


def load_config(ref):
    """Parse a JSON config from a path or ``pkg:<name>``; return (mapping, text)."""
    if ref.startswith("pkg:"):
        name = ref[4:]
        res = resources.files("difflab") / "configs" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"no packaged config {name!r}; available: {packaged_configs()}", field="config")
        text = res.read_text()
    else:
        path = Path(ref)
        if not path.is_file():
            raise ConfigError(f"config file {ref!r} does not exist", field="config")
        text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return cfg, text


def _versions():
    out = {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}
    try:
        out["difflab"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - running from source
        out["difflab"] = "unknown"
    return out


def write_manifest(out, command, cfg, seed, files):
    """manifest.json with config echo, versions, seed and CSV digests."""
    out = Path(out)
    digests = {str(Path(f).relative_to(out)): sha256_file(f) for f in sorted(set(map(str, files)))}
    return write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "seed": seed,
        "versions": _versions(),
        "files": digests,
    })


# ---------------------------------------------------------------------------
# sample subcommand
# ---------------------------------------------------------------------------

def _initial_points(params, d):
    if "points" in params:
        pts = np.atleast_2d(np.asarray(params["points"], dtype=float))
    elif "x0" in params:
        pts = np.atleast_2d(np.asarray(params["x0"], dtype=float))
    else:
        raise ConfigError("sample needs params.x0 or params.points", field="params.x0")
    if pts.shape[1] != d:
        raise ConfigError("initial points must have the process dimension", field="params.points")
    w = np.asarray(params.get("weights", np.ones(pts.shape[0])), dtype=float)
    return pts, w / w.sum()


def _draw_mixture(rng, pts, w, n, mean_map, chol):
    idx = rng.choice(pts.shape[0], size=n, p=w)
    base = pts[idx] @ mean_map.T
    if chol is None:
        return base
    return base + rng.standard_normal((n, pts.shape[1])) @ chol.T


def sample(cfg, out, seed, method, lam, steps, n_paths, eps_mode):
    from .covariance import make_tables
    from .process import TimeGrid
    from .samplers import (
        ReverseConfig, chunk_generator, ddim_chain, ei_chain, forward_em, paddim_chain,
        probability_flow_integrate, reverse_sde_sample,
    )
    from .score import ScoreModel, epsilon_from_score

    if method not in SAMPLE_METHODS:
        raise ConfigError(f"unknown method {method!r}", field="method")
    spec, grid = experiments._process(cfg.get("process"), "")
    params = cfg.get("params", {}) or {}
    d, T = spec.dimension, spec.horizon
    if steps:
        grid = TimeGrid.uniform(T, int(steps))
    steps = grid.n_steps
    pts, w = _initial_points(params, d)
    tables = make_tables(spec, grid)
    score = ScoreModel.single(pts[0], tables) if pts.shape[0] == 1 else ScoreModel.mixture(pts, tables, w)
    rng = chunk_generator(seed, 500, 0)
    t_min = float(params.get("t_min", 0.0 if method in ("ei", "ddim", "paddim") else 1e-3 * T))

    if method == "em":
        x0 = _draw_mixture(rng, pts, w, n_paths, np.eye(d), None)
        batch = forward_em(spec, x0, grid, seed)
        times, paths = batch.times, batch.paths
    else:
        chol = np.linalg.cholesky(tables.Sigma(T))
        xT = _draw_mixture(rng, pts, w, n_paths, tables.K(T, 0.0), chol)
        if method == "sde":
            batch = reverse_sde_sample(spec, tables, ReverseConfig(lam, score, t_min=max(t_min, 1e-12)),
                                       xT, grid, seed)
            times, paths = batch.times, batch.paths
        elif method == "pf-ode":
            rec = np.geomspace(T, max(t_min, 1e-12), min(steps, 64) + 1)
            times, states = probability_flow_integrate(spec, tables, score, xT, T, rec[-1], steps,
                                                       record_times=rec[1:-1], spacing="geometric")
            paths = np.swapaxes(states, 0, 1)
        else:
            times = np.linspace(T, 0.0, steps + 1)
            if times[-1] < t_min:
                times = np.append(times[times > t_min], t_min)
            if eps_mode == "fixed-vector":
                raise ConfigError("fixed-vector mode is only available through the ei-chain experiment",
                                  field="eps-mode")
            states = []
            for x in xT:
                if method == "ei":
                    st = ei_chain(tables, x, times, eps_mode, score=score, interpolate=True)
                elif method == "ddim":
                    if spec.kind != "ddim-plain-vanilla":
                        raise ConfigError("ddim sampling needs a ddim-plain-vanilla process", field="process.kind")
                    alphas = np.array([float(spec.schedule.alpha(t)) for t in times])
                    st = ddim_chain(alphas, x, eps_mode, eps_fn=lambda y, a, _t=dict(zip(alphas, times)):
                                    epsilon_from_score(score(y, _t[a]), tables, _t[a]))
                else:
                    if spec.kind != "paddim":
                        raise ConfigError("paddim sampling needs a paddim process", field="process.kind")
                    st = paddim_chain(spec.axis_set, times, x, eps_mode,
                                      eps_fn=lambda y, t: epsilon_from_score(score(y, t), tables, t))
                states.append(st)
            paths = np.stack(states)
    n_t = times.size
    rows = np.column_stack([np.repeat(np.arange(paths.shape[0]), n_t), np.tile(times, paths.shape[0]),
                            paths.reshape(-1, d)])
    header = ["path_id", "t"] + [f"x_{i}" for i in range(d)]
    return [write_csv(Path(out) / "samples.csv", header,
                      ([int(r[0]), *r[1:]] for r in rows))]


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="difflab", description="Linear-SDE diffusion laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config path or pkg:<name>")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default="difflab-out", help="output directory")

    common(sub.add_parser("run", help="run the experiment(s) named in the config"))
    for name, tag in SUBCOMMAND_EXPERIMENTS.items():
        sp = sub.add_parser(name, help=f"run the {tag} experiment")
        common(sp)
        if name == "simulate-forward":
            sp.add_argument("--write-paths", type=int, default=16, help="number of paths to dump")
    sp = sub.add_parser("sample", help="generate sample paths")
    common(sp)
    sp.add_argument("--method", choices=SAMPLE_METHODS, default="pf-ode")
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--paths", type=int, default=16)
    sp.add_argument("--eps-mode", choices=("from-xT", "state-dependent", "fixed-vector"),
                    default="state-dependent")
    sp = sub.add_parser("plot", help="render a result CSV as SVG")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--kind", choices=("lines", "scatter", "vector-field"), default="lines")
    sp.add_argument("--out", default=None, help="SVG path (default: CSV path with .svg)")
    sp.add_argument("--title", default=None)
    sub.add_parser("list-configs", help="list configs shipped with the package")
    return p


def _dispatch(args):
    if args.command == "list-configs":
        for name in packaged_configs():
            print(name)
        return 0
    if args.command == "plot":
        from .plotting import plot_csv

        if not Path(args.csv).is_file():
            raise ConfigError(f"CSV {args.csv!r} does not exist", field="csv")
        target = args.out or str(Path(args.csv).with_suffix(".svg"))
        plot_csv(args.csv, args.kind, target, args.title)
        log.info("wrote %s", target)
        return 0

    cfg, text = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        if args.seed is not None:
            raise ConfigError("--seed must be a non-negative integer", field="--seed")
        raise ConfigError("seed must be a non-negative integer", field="seed", line=_locate_field(text, "seed"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        if args.command == "run":
            files = experiments.run_experiments(cfg, out, seed)
        elif args.command == "sample":
            files = sample(cfg, out, seed, args.method, args.lam, args.steps, args.paths, args.eps_mode)
        elif args.command == "simulate-forward":
            files = experiments.forward_moments(cfg, out, seed, paths_to_write=args.write_paths)
        else:
            files = experiments.RUNNERS[SUBCOMMAND_EXPERIMENTS[args.command]](cfg, out, seed)
    except ConfigError as exc:
        if exc.line is None:
            exc.line = _locate_field(text, exc.field)
        raise
    write_manifest(out, args.command, cfg, seed, files)
    log.info("%s: %d file(s) in %s (%.2f s)", args.command, len(files), out, time.perf_counter() - start)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="difflab: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"difflab: config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ContractError, DomainError, ScheduleError, np.linalg.LinAlgError) as exc:
        where = f" at t={exc.time!r}" if getattr(exc, "time", None) is not None else ""
        module = type(exc).__module__
        tb = exc.__traceback__
        while tb is not None and tb.tb_next is not None:
            tb = tb.tb_next
        if tb is not None:
            module = Path(tb.tb_frame.f_code.co_filename).stem
        print(f"difflab: numerical error in {module}{where}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
