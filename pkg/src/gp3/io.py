"""Run configuration, training-data CSV, cell export and the run manifest."""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .gp import TrainingSet
from .verify import Status, VerificationReport


class ConfigError(ValueError):
    """Invalid or unreadable configuration (command-line exit status 2)."""


# section -> key -> default; ``None`` means "not set"
SCHEMA = {
    "kernel": {"family": "se", "sigma_f2": 1.0, "lengthscales": None, "sigma_n2": 0.1,
               "optimize": False},
    "domain": {"lower": None, "upper": None},
    "problem": {"g": "mu", "f": "identity", "L_f": 1.0, "L_g": None, "eps1_bar": None,
                "eps2_bar": None, "b_min": 1e-3, "initial_cells": 1, "time_limit": None},
    "dynamics": {"system": "smib", "m1": 1.0, "d1": 20.0, "a12": 10.0,
                 "theta1": math.asin(0.05), "dt": 0.01, "K": 1000},
    "lipschitz": {"families": ["se", "matern32", "matern52"], "cell_budget": 2000,
                  "n_samples": 100, "noise_std": 0.0, "seed": 0},
    "roa": {"n_samples": 1024, "radius": 0.1, "baseline_grid": 63, "baseline_steps": 10_000,
            "baseline_radius": 0.1, "skip_baseline": False},
}
TOP_LEVEL = {"kernel", "domain", "problem", "dynamics", "exclusions", "output_dir", "workers",
             "data", "lipschitz", "roa"}

G_CHOICES = ("mu", "zero", "builtin", "table")
F_CHOICES = ("identity", "nearest-grid", "flow")


def _number(value, where, positive=False, allow_inf=True):
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
        value = math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    value = float(value)
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ConfigError(f"{where} must be finite")
    if positive and not value > 0:
        raise ConfigError(f"{where} must be positive")
    return value


def _vector(value, where):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{where} must be a non-empty list of numbers")
    return [_number(v, f"{where}[{i}]", allow_inf=False) for i, v in enumerate(value)]


def _section(raw, name):
    given = raw.get(name) or {}
    if not isinstance(given, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(given) - set(SCHEMA[name])
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    out = copy.deepcopy(SCHEMA[name])
    out.update(given)
    return out


def parse_config(raw: dict) -> dict:
    """Validate a configuration object and fill in defaults.

    The result is a plain JSON-serialisable dict; ``parse_config`` applied to
    it again returns an equal dict.
    """
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = {name: _section(raw, name) for name in SCHEMA}

    k = cfg["kernel"]
    from .kernels import Family
    try:
        k["family"] = Family.parse(k["family"]).value
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    k["sigma_f2"] = _number(k["sigma_f2"], "kernel.sigma_f2", positive=True, allow_inf=False)
    k["sigma_n2"] = _number(k["sigma_n2"], "kernel.sigma_n2", allow_inf=False)
    if k["sigma_n2"] < 0:
        raise ConfigError("kernel.sigma_n2 must be non-negative")
    k["lengthscales"] = _vector(k["lengthscales"], "kernel.lengthscales")
    if k["lengthscales"] and any(v <= 0 for v in k["lengthscales"]):
        raise ConfigError("kernel.lengthscales must be positive")
    k["optimize"] = bool(k["optimize"])

    dom = cfg["domain"]
    dom["lower"] = _vector(dom["lower"], "domain.lower")
    dom["upper"] = _vector(dom["upper"], "domain.upper")
    if (dom["lower"] is None) != (dom["upper"] is None):
        raise ConfigError("domain needs both lower and upper")
    if dom["lower"] is not None:
        if len(dom["lower"]) != len(dom["upper"]):
            raise ConfigError("domain.lower and domain.upper differ in length")
        if any(lo > hi for lo, hi in zip(dom["lower"], dom["upper"])):
            raise ConfigError("domain.lower exceeds domain.upper")
        if k["lengthscales"] is not None and len(k["lengthscales"]) != len(dom["lower"]):
            raise ConfigError("kernel.lengthscales and domain differ in dimension")

    p = cfg["problem"]
    if p["g"] not in G_CHOICES:
        raise ConfigError(f"problem.g must be one of {G_CHOICES}")
    if p["f"] not in F_CHOICES:
        raise ConfigError(f"problem.f must be one of {F_CHOICES}")
    p["L_f"] = _number(p["L_f"], "problem.L_f", allow_inf=False)
    p["L_g"] = _number(p["L_g"], "problem.L_g", allow_inf=False)
    for key in ("L_f", "L_g"):
        if p[key] is not None and p[key] < 0:
            raise ConfigError(f"problem.{key} must be non-negative")
    p["eps1_bar"] = _number(p["eps1_bar"], "problem.eps1_bar")
    p["eps2_bar"] = _number(p["eps2_bar"], "problem.eps2_bar")
    p["b_min"] = _number(p["b_min"], "problem.b_min", positive=True, allow_inf=False)
    p["time_limit"] = _number(p["time_limit"], "problem.time_limit", positive=True)
    if not isinstance(p["initial_cells"], int) or p["initial_cells"] < 1:
        raise ConfigError("problem.initial_cells must be a positive integer")

    dyn = cfg["dynamics"]
    if dyn["system"] not in ("smib", "decay"):
        raise ConfigError("dynamics.system must be 'smib' or 'decay'")
    for key in ("m1", "d1", "a12", "theta1"):
        dyn[key] = _number(dyn[key], f"dynamics.{key}", allow_inf=False)
    if dyn["m1"] == 0:
        raise ConfigError("dynamics.m1 must be non-zero")
    dyn["dt"] = _number(dyn["dt"], "dynamics.dt", positive=True, allow_inf=False)
    if not isinstance(dyn["K"], int) or dyn["K"] < 0:
        raise ConfigError("dynamics.K must be a non-negative integer")

    lip = cfg["lipschitz"]
    try:
        lip["families"] = [Family.parse(f).value for f in lip["families"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"lipschitz.families: {exc}") from None
    if not isinstance(lip["cell_budget"], int) or lip["cell_budget"] < 1:
        raise ConfigError("lipschitz.cell_budget must be a positive integer")
    lip["noise_std"] = _number(lip["noise_std"], "lipschitz.noise_std", allow_inf=False)

    roa = cfg["roa"]
    roa["radius"] = _number(roa["radius"], "roa.radius", positive=True, allow_inf=False)
    roa["baseline_radius"] = _number(roa["baseline_radius"], "roa.baseline_radius", positive=True,
                                     allow_inf=False)
    for key in ("n_samples", "baseline_grid", "baseline_steps"):
        if not isinstance(roa[key], int) or roa[key] < 1:
            raise ConfigError(f"roa.{key} must be a positive integer")
    roa["skip_baseline"] = bool(roa["skip_baseline"])

    cfg["exclusions"] = _exclusions(raw.get("exclusions") or [])
    cfg["output_dir"] = str(raw.get("output_dir") or "gp3-out")
    workers = raw.get("workers")
    if workers is not None and (not isinstance(workers, int) or workers < 1):
        raise ConfigError("workers must be a positive integer")
    cfg["workers"] = workers
    data = raw.get("data")
    if data is not None and not isinstance(data, str):
        raise ConfigError("data must be a file path or 'builtin'")
    cfg["data"] = data
    return cfg


def _exclusions(items):
    if not isinstance(items, list):
        raise ConfigError("exclusions must be a list")
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or item.get("type") not in ("ball", "box"):
            raise ConfigError(f"exclusions[{i}] needs type 'ball' or 'box'")
        if item["type"] == "ball":
            if set(item) - {"type", "center", "radius"}:
                raise ConfigError(f"exclusions[{i}]: unknown keys")
            out.append({"type": "ball", "center": _vector(item.get("center"), f"exclusions[{i}].center"),
                        "radius": _number(item.get("radius"), f"exclusions[{i}].radius",
                                          allow_inf=False)})
            if out[-1]["center"] is None or out[-1]["radius"] is None or out[-1]["radius"] < 0:
                raise ConfigError(f"exclusions[{i}] needs a center and a non-negative radius")
        else:
            if set(item) - {"type", "lower", "upper"}:
                raise ConfigError(f"exclusions[{i}]: unknown keys")
            lo = _vector(item.get("lower"), f"exclusions[{i}].lower")
            hi = _vector(item.get("upper"), f"exclusions[{i}].upper")
            if lo is None or hi is None or len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
                raise ConfigError(f"exclusions[{i}] needs matching lower <= upper")
            out.append({"type": "box", "lower": lo, "upper": hi})
    return out


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(raw)


def _json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def dump_config(cfg: dict) -> str:
    return json.dumps(_json_safe(cfg), indent=2, sort_keys=True)


# -- training data ----------------------------------------------------------------

def read_training_csv(path) -> TrainingSet:
    """CSV with header ``x1,...,xd,y``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read training data {path}: {exc.strerror or exc}") from None
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header != [f"x{i}" for i in range(1, d + 1)] + ["y"]:
        raise ConfigError(f"{path}: header must be x1,...,xd,y")
    body = [r for r in rows[1:] if r]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != d + 1:
        raise ConfigError(f"{path}: every row needs {d + 1} values")
    try:
        return TrainingSet(data[:, :d], data[:, d])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_training_csv(path, train: TrainingSet):
    header = [f"x{i}" for i in range(1, train.dim + 1)] + ["y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(train.X, train.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


# -- cell export --------------------------------------------------------------------

def cell_columns(d: int) -> list[str]:
    return ([f"c{i}" for i in range(1, d + 1)] + [f"b{i}" for i in range(1, d + 1)]
            + ["lo", "hi", "L_mu", "status"])


def _cell_rows(centers, half_widths, lo, hi, L, statuses):
    for c, b, l, h, L_, s in zip(centers, half_widths, lo, hi, L, statuses):
        yield [*map(float, c), *map(float, b), float(l), float(h), float(L_), s]


def _fmt(v):
    return v if isinstance(v, str) else repr(v)


def write_cells_csv(path, centers, half_widths, lo, hi, L, statuses):
    d = np.shape(centers)[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cell_columns(d))
        for row in _cell_rows(centers, half_widths, lo, hi, L, statuses):
            w.writerow([_fmt(v) for v in row])


def report_columns(report: VerificationReport, mask=None):
    m = np.ones(len(report), dtype=bool) if mask is None else mask
    statuses = [s.value for s, keep in zip(report.statuses, m) if keep]
    return (report.centers[m], report.half_widths[m], report.lo[m], report.hi[m],
            report.L_mu[m], statuses)


def write_report_csv(path, report: VerificationReport, mask=None):
    write_cells_csv(path, *report_columns(report, mask))


def write_report_json(path, report: VerificationReport, manifest: dict | None = None, mask=None):
    C, B, lo, hi, L, statuses = report_columns(report, mask)
    cells = [{"c": list(map(float, c)), "b": list(map(float, b)), "lo": float(l), "hi": float(h),
              "L_mu": float(L_), "status": s} for c, b, l, h, L_, s in zip(C, B, lo, hi, L, statuses)]
    doc = {"cells": cells, "total_cells_evaluated": report.total_cells_evaluated,
           "max_depth": report.max_depth, "wall_time": report.wall_time,
           "eps1": report.eps1, "eps2": report.eps2, "waves": report.waves,
           "warnings": report.warnings}
    if manifest is not None:
        doc["manifest"] = manifest
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(doc), fh, indent=1)


def read_cells_csv(path) -> dict:
    """Parse a cell export back into arrays (``centers``, ``half_widths``, ...)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = (len(header) - 4) // 2
    if header != cell_columns(d):
        raise ValueError(f"{path}: unexpected columns {header}")
    body = rows[1:]
    num = np.array([[float(v) for v in r[:-1]] for r in body], dtype=float).reshape(len(body), 2 * d + 3)
    statuses = [Status(r[-1]) for r in body]
    return {"centers": num[:, :d], "half_widths": num[:, d:2 * d], "lo": num[:, 2 * d],
            "hi": num[:, 2 * d + 1], "L_mu": num[:, 2 * d + 2], "status": statuses}


def write_curve_csv(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cells", "L"])
        for n, L in curve:
            w.writerow([int(n), repr(float(L))])


def write_points_csv(path, points, flags, flag_name="converged"):
    d = np.shape(points)[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(1, d + 1)] + [flag_name])
        for p, f in zip(points, flags):
            w.writerow([repr(float(v)) for v in p] + [int(bool(f))])


# -- manifest -------------------------------------------------------------------------

def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_json_atomic(path, obj):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_manifest(command: str, config: dict, started: str, workers: int, outputs: list,
                   extra: dict | None = None) -> dict:
    from . import __version__
    import scipy
    manifest = {
        "command": command,
        "config": config,
        "tool_version": __version__,
        "versions": {"numpy": np.__version__, "scipy": scipy.__version__},
        "started": started,
        "finished": now_iso(),
        "workers": workers,
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    return manifest
