"""``gp3`` command line: lipschitz, verify, roa and simulate.

Exit status: 0 on success, 2 for usage or configuration errors, 3 when the
numerics fail (non-positive-definite covariance, non-finite bounds,
integration failure, analysis time limit). Outputs are written only after a
run has finished, and the manifest goes last.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .dynamics import (IntegrationError, SMIBParams, integrate, linear_decay_system,
                       oscillator_system, smib_system, zero_system)
from .geometry import Ball, Hyperrectangle
from .gp import TrainingSet, fit, optimize_hyperparameters
from .kernels import Family, KernelSpec
from .verify import AnalysisTimeout, NonFiniteError, ProblemSpec, Status, run_analysis

log = logging.getLogger("gp3")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (np.linalg.LinAlgError, NonFiniteError, IntegrationError, AnalysisTimeout,
                  ArithmeticError)

SYSTEMS = {
    "smib": lambda m1: smib_system(SMIBParams(m1=m1)),
    "decay": lambda m1: linear_decay_system(2),
    "oscillator": lambda m1: oscillator_system(),
    "zero": lambda m1: zero_system(2),
}


class UsageError(Exception):
    pass


def resolve_workers(flag: int | None, config_value: int | None) -> int:
    """Command-line flag, then ``GP3_WORKERS``, then the config file, then 1."""
    if flag is not None:
        return flag
    env = os.environ.get("GP3_WORKERS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise io.ConfigError(f"GP3_WORKERS={env!r} is not an integer") from None
        if value < 1:
            raise io.ConfigError("GP3_WORKERS must be positive")
        return value
    return config_value or 1


def _load(args) -> dict:
    cfg = io.load_config(args.config) if args.config else io.parse_config({})
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    return cfg


def _dynamics_system(cfg):
    dyn = cfg["dynamics"]
    if dyn["system"] == "decay":
        return linear_decay_system(2)
    return smib_system(SMIBParams(m1=dyn["m1"], d1=dyn["d1"], a12=dyn["a12"], theta1=dyn["theta1"]))


def _domain(cfg, default=None) -> Hyperrectangle:
    dom = cfg["domain"]
    if dom["lower"] is None:
        if default is None:
            raise io.ConfigError("domain.lower and domain.upper are required")
        return Hyperrectangle.from_bounds(*default)
    return Hyperrectangle.from_bounds(dom["lower"], dom["upper"])


def _exclusions(cfg, d):
    out = []
    for item in cfg["exclusions"]:
        if item["type"] == "ball":
            if len(item["center"]) != d:
                raise io.ConfigError("exclusion ball dimension does not match the domain")
            out.append(Ball(item["center"], item["radius"]))
        else:
            if len(item["lower"]) != d:
                raise io.ConfigError("exclusion box dimension does not match the domain")
            out.append(Hyperrectangle.from_bounds(item["lower"], item["upper"]))
    return out


def _training(cfg, domain: Hyperrectangle | None = None):
    from .recipes import builtin_training_set
    data = cfg["data"]
    if data is None or data == "builtin":
        lip = cfg["lipschitz"]
        return builtin_training_set(lip["n_samples"], lip["noise_std"], lip["seed"], domain)
    return io.read_training_csv(data)


def _kernel(cfg, d, default: KernelSpec | None = None) -> KernelSpec:
    k = cfg["kernel"]
    if k["lengthscales"] is None:
        if default is None:
            raise io.ConfigError("kernel.lengthscales is required")
        return default
    if len(k["lengthscales"]) != d:
        raise io.ConfigError(f"kernel.lengthscales has {len(k['lengthscales'])} entries, data have d={d}")
    return KernelSpec(k["family"], k["sigma_f2"], k["lengthscales"])


def _prepare_output(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, command, cfg, started, workers, files, extra=None):
    manifest = io.build_manifest(command, cfg, started, workers, [str(f) for f in files] +
                                 [str(out / "manifest.json")], extra)
    io.write_json_atomic(out / "manifest.json", manifest)
    return manifest


# -- lipschitz -----------------------------------------------------------------------

def cmd_lipschitz(args) -> int:
    from .recipes import LipschitzRecipeConfig, run_lipschitz_recipe, relative_change_last_decade
    cfg = _load(args)
    started = io.now_iso()
    lip = cfg["lipschitz"]
    families = [Family.parse(args.kernel).value] if args.kernel else lip["families"]
    budget = args.budget if args.budget is not None else lip["cell_budget"]
    if budget < 1:
        raise io.ConfigError("--budget must be positive")
    lip["families"], lip["cell_budget"] = families, budget
    workers = resolve_workers(args.workers, cfg["workers"])
    from .recipes import LIPSCHITZ_DOMAIN
    domain = _domain(cfg, LIPSCHITZ_DOMAIN)
    train = _training(cfg, domain)
    if train.dim != domain.dim:
        raise io.ConfigError(f"training data have d={train.dim}, domain has d={domain.dim}")
    hyper = {}
    k = cfg["kernel"]
    if k["lengthscales"] is not None:
        if len(k["lengthscales"]) != domain.dim:
            raise io.ConfigError("kernel.lengthscales does not match the domain dimension")
        hyper[Family.parse(k["family"])] = (k["sigma_f2"], tuple(k["lengthscales"]))
    rc = LipschitzRecipeConfig(families=tuple(families), lower=tuple(domain.lower),
                               upper=tuple(domain.upper), optimize=k["optimize"],
                               hyperparameters=hyper, noise_variance=k["sigma_n2"],
                               cell_budget=budget, training=train, workers=workers,
                               seed=lip["seed"])
    results = run_lipschitz_recipe(rc)

    out = _prepare_output(cfg)
    files, summary = [], {}
    for fam, res in results.items():
        path = out / f"curve_{fam.value}.csv"
        io.write_curve_csv(path, res.curve)
        files.append(path)
        try:
            decade = relative_change_last_decade(res.curve)
        except ValueError:
            decade = None
        summary[fam.value] = {"naive": res.naive, "final": res.final, "cells": res.curve[-1][0],
                              "relative_change_last_decade": decade,
                              "signal_variance": res.spec.signal_variance,
                              "length_scales": list(res.spec.length_scales),
                              "noise_variance": res.noise_variance}
        if budget == 1:
            print(f"{fam.value}: single-cell Lipschitz bound {res.naive:.6g}")
        else:
            print(f"{fam.value}: naive {res.naive:.6g}, final {res.final:.6g} "
                  f"after {res.curve[-1][0]} cells")
    io.write_json_atomic(out / "summary.json", summary)
    files.append(out / "summary.json")
    _finish(out, "lipschitz", cfg, started, workers, files)
    return EXIT_OK


# -- verify ----------------------------------------------------------------------------

class NearestGrid:
    """Snap points to the nearest node of a full rectangular grid of training inputs."""

    def __init__(self, X):
        self.axes = [np.unique(X[:, j]) for j in range(X.shape[1])]
        if math.prod(len(a) for a in self.axes) != len(X):
            raise io.ConfigError("nearest-grid needs training inputs on a full rectangular grid")
        spacing = [np.diff(a).max() if len(a) > 1 else 0.0 for a in self.axes]
        self.spacing = np.array(spacing)

    def __call__(self, Y):
        Y = np.atleast_2d(Y)
        out = np.empty_like(Y)
        for j, a in enumerate(self.axes):
            idx = np.clip(np.searchsorted(a, Y[:, j]), 1, max(len(a) - 1, 1))
            lo, hi = a[idx - 1], a[np.minimum(idx, len(a) - 1)]
            out[:, j] = np.where(np.abs(Y[:, j] - lo) <= np.abs(hi - Y[:, j]), lo, hi)
        return out

    def radius(self, C, B):
        # each snap moves a coordinate by at most half the local spacing
        return np.linalg.norm(B + self.spacing, axis=1)


class TableLookup:
    """Training targets looked up at (snapped) training inputs."""

    def __init__(self, train: TrainingSet):
        from scipy.spatial import cKDTree
        self.tree = cKDTree(train.X)
        self.y = train.y

    def __call__(self, Y):
        dist, idx = self.tree.query(np.atleast_2d(Y))
        if np.any(dist > 1e-9 * (1 + np.abs(Y).max())):
            raise NonFiniteError(Y[int(np.argmax(dist))], np.zeros(Y.shape[1]),
                                 "table lookup (point is not a training input)")
        return self.y[idx]


def build_problem(cfg, train: TrainingSet, domain: Hyperrectangle) -> ProblemSpec:
    from .dynamics import flow_map
    from .recipes import builtin_target
    p = cfg["problem"]
    f = f_radius = None
    L_f = p["L_f"]
    if p["f"] == "nearest-grid":
        f = NearestGrid(train.X)
        f_radius = f.radius
    elif p["f"] == "flow":
        f = flow_map(_dynamics_system(cfg), cfg["dynamics"]["dt"])
        if domain.dim != 2:
            raise io.ConfigError("flow map needs a 2-dimensional domain")
    g, L_g = None, p["L_g"]
    if p["g"] == "zero":
        g, L_g = (lambda Y: np.zeros(len(Y))), 0.0
    elif p["g"] == "builtin":
        if domain.dim != 2:
            raise io.ConfigError("g = builtin needs a 2-dimensional domain")
        g = builtin_target
        L_g = math.sqrt(1.0 + 1.0 / 16.0) if L_g is None else L_g
    elif p["g"] == "table":
        if p["f"] != "nearest-grid":
            raise io.ConfigError("g = table needs f = nearest-grid")
        g = TableLookup(train)
        if L_g is None:
            raise io.ConfigError("g = table needs problem.L_g")
    if p["g"] == "mu" and p["f"] == "identity":
        log.info("g = mu with identity f: the difference is identically zero")
    inf = math.inf
    return ProblemSpec(domain, g=g, f=f, L_f=L_f, L_g=L_g,
                       target_lower=inf if p["eps1_bar"] is None else p["eps1_bar"],
                       target_upper=inf if p["eps2_bar"] is None else p["eps2_bar"],
                       b_min=p["b_min"], initial_cells=p["initial_cells"], f_radius=f_radius)


def cmd_verify(args) -> int:
    cfg = _load(args)
    started = io.now_iso()
    workers = resolve_workers(args.workers, cfg["workers"])
    if cfg["data"] is None:
        raise io.ConfigError("verify needs a 'data' entry (CSV path or 'builtin')")
    domain = _domain(cfg)
    train = _training(cfg, domain)
    if train.dim != domain.dim:
        raise io.ConfigError(f"training data have d={train.dim}, domain has d={domain.dim}")
    spec = _kernel(cfg, train.dim)
    exclusions = _exclusions(cfg, domain.dim)
    problem = build_problem(cfg, train, domain)
    noise = cfg["kernel"]["sigma_n2"]
    if cfg["kernel"]["optimize"]:
        spec, noise = optimize_hyperparameters(train, spec.family, init=spec, noise_variance=noise)
    model = fit(train, spec, noise)
    report = run_analysis(problem, model, exclusions, workers=workers,
                          time_limit=cfg["problem"]["time_limit"])

    out = _prepare_output(cfg)
    counts = {s.value: int(report.mask(s).sum()) for s in Status}
    summary = {"cells": len(report), "status_counts": counts, "eps1": report.eps1,
               "eps2": report.eps2, "total_cells_evaluated": report.total_cells_evaluated,
               "max_depth": report.max_depth, "wall_time": report.wall_time,
               "initial_grid": list(report.initial_grid), "warnings": report.warnings}
    csv_path, json_path = out / "cells.csv", out / "cells.json"
    io.write_report_csv(csv_path, report)
    files = [csv_path, json_path]
    manifest = io.build_manifest("verify", cfg, started, workers,
                                 [str(f) for f in files] + [str(out / "manifest.json")],
                                 {"summary": summary})
    io.write_report_json(json_path, report, manifest)
    io.write_json_atomic(out / "manifest.json", manifest)
    print(f"{len(report)} cells ({counts['satisfied']} satisfied, {counts['min_size_reached']} "
          f"at minimum size, {counts['assumed_verified']} excluded); "
          f"eps1 = {report.eps1:.6g}, eps2 = {report.eps2:.6g}")
    return EXIT_OK


# -- roa -------------------------------------------------------------------------------

def cmd_roa(args) -> int:
    from .recipes import RoaRecipeConfig, run_roa_recipe
    cfg = _load(args)
    started = io.now_iso()
    if args.m1 is not None:
        if args.m1 == 0:
            raise io.ConfigError("--m1 must be non-zero")
        cfg["dynamics"]["m1"] = args.m1
    if args.skip_baseline:
        cfg["roa"]["skip_baseline"] = True
    workers = resolve_workers(args.workers, cfg["workers"])
    domain = _domain(cfg, ((-5.0, -5.0), (5.0, 5.0)))
    if domain.dim != 2:
        raise io.ConfigError("the region-of-attraction recipe needs a 2-dimensional domain")
    dyn, roa, p = cfg["dynamics"], cfg["roa"], cfg["problem"]
    default_kernel = RoaRecipeConfig().kernel
    spec = _kernel(cfg, 2, default_kernel)
    noise = cfg["kernel"]["sigma_n2"]
    rc = RoaRecipeConfig(
        params=SMIBParams(m1=dyn["m1"], d1=dyn["d1"], a12=dyn["a12"], theta1=dyn["theta1"]),
        lower=tuple(domain.lower), upper=tuple(domain.upper), n_samples=roa["n_samples"],
        horizon=dyn["K"], dt=dyn["dt"], kernel=spec, noise_variance=noise,
        optimize=cfg["kernel"]["optimize"], L_f=p["L_f"], b_min=p["b_min"], radius=roa["radius"],
        initial_cells=p["initial_cells"], baseline_grid=roa["baseline_grid"],
        baseline_steps=roa["baseline_steps"], baseline_radius=roa["baseline_radius"],
        skip_baseline=roa["skip_baseline"],
        system=linear_decay_system(2) if dyn["system"] == "decay" else None,
        workers=workers, time_limit=p["time_limit"])
    result = run_roa_recipe(rc)

    out = _prepare_output(cfg)
    rep = result.report
    files = []
    for name, mask in (("W_cells.csv", result.W), ("V_cells.csv", result.V)):
        io.write_report_csv(out / name, rep, mask)
        files.append(out / name)
    io.write_report_csv(out / "all_cells.csv", rep)
    files.append(out / "all_cells.csv")
    if result.baseline_points is not None:
        io.write_points_csv(out / "baseline.csv", result.baseline_points, result.baseline_converged)
        files.append(out / "baseline.csv")
    summary = {"c_star": result.c_star, "W_cells": int(result.W.sum()), "V_cells": int(result.V.sum()),
               "unverified_cells": int(rep.mask(Status.MIN_SIZE).sum()),
               "excluded_cells": int(rep.mask(Status.ASSUMED).sum()),
               "total_cells_evaluated": rep.total_cells_evaluated, "warnings": result.warnings,
               "timings": result.timings}
    io.write_json_atomic(out / "summary.json", summary)
    files.append(out / "summary.json")
    _finish(out, "roa", cfg, started, workers, files)
    print(f"W: {summary['W_cells']} cells, V: {summary['V_cells']} cells, c* = {result.c_star:.6g}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# -- simulate ----------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    system = SYSTEMS[args.system](args.m1)
    x0 = np.asarray(args.x0, dtype=float)
    if len(x0) != system.dim:
        raise UsageError(f"system {args.system!r} needs {system.dim} initial values, got {len(x0)}")
    if args.steps < 1 or not args.dt > 0:
        raise UsageError("--steps must be positive and --dt must be positive")
    times = args.dt * np.arange(1, args.steps + 1)
    traj = np.vstack([x0, integrate(system, x0, times)])
    t = np.concatenate([[0.0], times])
    w = sys.stdout
    w.write(",".join(["t"] + [f"x{i}" for i in range(1, system.dim + 1)]) + "\n")
    for ti, row in zip(t, traj):
        w.write(",".join(repr(float(v)) for v in (ti, *row)) + "\n")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gp3", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON configuration file")
        p.add_argument("--workers", type=int, help="worker processes (overrides GP3_WORKERS)")
        p.add_argument("--output-dir", help="directory for result files")

    p = sub.add_parser("lipschitz", help="Lipschitz envelopes of a learned function")
    common(p)
    p.add_argument("--kernel", help="run a single kernel family (se, matern32, matern52)")
    p.add_argument("--budget", type=int, help="maximum number of cells")
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("verify", help="certified bounds of g(f(x)) - mu(x) over a domain")
    common(p, config_required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("roa", help="region of attraction from a learned Lyapunov function")
    common(p)
    p.add_argument("--skip-baseline", action="store_true", help="do not simulate the baseline grid")
    p.add_argument("--m1", type=float, help="override the machine inertia")
    p.set_defaults(func=cmd_roa)

    p = sub.add_parser("simulate", help="print a trajectory as CSV")
    p.add_argument("system", choices=sorted(SYSTEMS))
    p.add_argument("--x0", type=float, nargs="+", required=True, help="initial state")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--m1", type=float, default=1.0, help="inertia for the smib system")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("gp3: error: --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (io.ConfigError, UsageError) as exc:
        print(f"gp3: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"gp3: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation errors from the library are input problems
        print(f"gp3: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
