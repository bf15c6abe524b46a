"""Command-line entry point: ``nrmsim --config run.json [--seed N] [--workers N] [--out DIR]``.

The configuration document has two sections::

    {
      "instance": {"resources": 1, "capacity_ratios": [0.5],
                   "types": [{"a": [1], "p": 1.0, "reward": {"kind": "uniform", "l": 0, "u": 1}}]},
      "experiment": {"kind": "sweep", "policies": [{"kind": "log2_fluid"}],
                     "T_grid": [1000, 2000], "replications": 1000, "seed": 0}
    }

``instance`` may instead name a preset: ``{"preset": "example2", "epsilon": 0.1}``
or ``{"preset": "single_resource_uniform", "ratio": 0.5}``.

Exit codes: 0 success, 1 solver failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .harness import (RegretRow, dual_convergence_experiment, estimate_regret, fit_growth,
                      myopic_decay_experiment, resolve_workers, FitError, DEFAULT_CHUNK)
from .model import ConfigurationError, DomainError, build_instance, example2, make_distribution, \
    single_resource_uniform, InstanceSpec
from .offline import OfflineError
from .policies import POLICY_KINDS, EstimatorConfig
from .simplex import SimplexError
from .solvers import SolverError, solve_fluid

log = logging.getLogger("nrmsim")

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2
EXPERIMENT_KINDS = ("simulate", "sweep", "dualconv", "myopic", "solve")
CSV_COLUMNS = ("experiment", "policy", "T_or_s", "mean", "stderr", "reps", "extra")
PROB_TOL = 1e-9

_REWARD_KEYS = {"kind", "l", "u", "alpha", "beta", "f_l", "f_u"}
_TYPE_KEYS = {"a", "p", "reward"}
_INSTANCE_KEYS = {"resources", "capacity_ratios", "types"}
_PRESETS = {"example2": {"preset", "epsilon"}, "single_resource_uniform": {"preset", "ratio"}}
_POLICY_KEYS = {"kind", "kappa1", "resolve_every", "name"}
_EXPERIMENT_DEFAULTS = {
    "kind": None,
    "policies": [],
    "T_grid": [],
    "s_grid": [],
    "horizon": 1000,
    "replications": 1000,
    "seed": 0,
    "workers": None,
    "chunk_size": DEFAULT_CHUNK,
    "ratio": None,
    "kappa1": 1.0,
    "benchmark": "lp",
    "output": "results",
}


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending path."""


@dataclass(frozen=True)
class RunConfig:
    instance: dict
    experiment: dict
    spec: InstanceSpec = field(compare=False, repr=False, default=None)

    @property
    def policies(self) -> list:
        return [EstimatorConfig(**p) for p in self.experiment["policies"]]

    def to_document(self) -> dict:
        return {"instance": json.loads(json.dumps(self.instance)),
                "experiment": json.loads(json.dumps(self.experiment))}


# -- validation helpers --------------------------------------------------------------


def _unknown(obj: dict, allowed, path: str):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown key")


def _obj(v, path):
    if not isinstance(v, dict):
        raise ConfigError(f"{path}: expected an object")
    return v


def _num(v, path, positive=False, nonneg=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{path}: expected a finite number")
    if positive and v <= 0:
        raise ConfigError(f"{path}: must be > 0")
    if nonneg and v < 0:
        raise ConfigError(f"{path}: must be >= 0")
    return float(v)


def _int(v, path, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return int(v)


def _list(v, path, nonempty=True):
    if not isinstance(v, list):
        raise ConfigError(f"{path}: expected a list")
    if nonempty and not v:
        raise ConfigError(f"{path}: must not be empty")
    return v


def _parse_reward(doc, path):
    doc = _obj(doc, path)
    _unknown(doc, _REWARD_KEYS, path)
    for key in ("kind", "l", "u"):
        if key not in doc:
            raise ConfigError(f"{path}.{key}: missing")
    kind = doc["kind"]
    if kind not in ("uniform", "truncated-linear", "point-mass"):
        raise ConfigError(f"{path}.kind: unknown reward kind {kind!r}")
    out = {"kind": kind, "l": _num(doc["l"], f"{path}.l", nonneg=True), "u": _num(doc["u"], f"{path}.u")}
    params = {}
    if kind == "truncated-linear":
        for key in ("f_l", "f_u"):
            if key not in doc:
                raise ConfigError(f"{path}.{key}: required for truncated-linear rewards")
            out[key] = params[key] = _num(doc[key], f"{path}.{key}", nonneg=True)
    for key in ("alpha", "beta"):
        if key in doc:
            out[key] = _num(doc[key], f"{path}.{key}", nonneg=True)
    try:
        dist = make_distribution(kind, out["l"], out["u"], **params)
    except (ConfigurationError, DomainError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    # declared density bounds must be consistent with the distribution itself
    if "alpha" in out and out["alpha"] > dist.density_floor * (1 + 1e-9):
        raise ConfigError(f"{path}.alpha: exceeds the density floor {dist.density_floor}")
    if "beta" in out and out["beta"] < dist.density_ceiling * (1 - 1e-9):
        raise ConfigError(f"{path}.beta: below the density ceiling {dist.density_ceiling}")
    return out, dist


def _parse_instance(doc):
    doc = _obj(doc, "instance")
    if "preset" in doc:
        name = doc["preset"]
        if name not in _PRESETS:
            raise ConfigError(f"instance.preset: unknown preset {name!r}")
        _unknown(doc, _PRESETS[name], "instance")
        if name == "example2":
            eps = _num(doc.get("epsilon", 0.1), "instance.epsilon", positive=True)
            if eps >= 1:
                raise ConfigError("instance.epsilon: must be < 1")
            return {"preset": name, "epsilon": eps}, example2(eps, 1)
        ratio = _num(doc.get("ratio", 0.5), "instance.ratio", positive=True)
        return {"preset": name, "ratio": ratio}, single_resource_uniform(ratio, 1)
    _unknown(doc, _INSTANCE_KEYS, "instance")
    for key in _INSTANCE_KEYS:
        if key not in doc:
            raise ConfigError(f"instance.{key}: missing")
    m = _int(doc["resources"], "instance.resources", minimum=1)
    ratios = [_num(v, f"instance.capacity_ratios[{i}]", positive=True)
              for i, v in enumerate(_list(doc["capacity_ratios"], "instance.capacity_ratios"))]
    if len(ratios) != m:
        raise ConfigError(f"instance.capacity_ratios: has {len(ratios)} entries, resources = {m}")
    types_out, cons, probs, dists = [], [], [], []
    for j, t in enumerate(_list(doc["types"], "instance.types")):
        path = f"instance.types[{j}]"
        t = _obj(t, path)
        _unknown(t, _TYPE_KEYS, path)
        for key in _TYPE_KEYS:
            if key not in t:
                raise ConfigError(f"{path}.{key}: missing")
        a = [_num(v, f"{path}.a[{i}]", nonneg=True) for i, v in enumerate(_list(t["a"], f"{path}.a"))]
        if len(a) != m:
            raise ConfigError(f"{path}.a: has {len(a)} entries, resources = {m}")
        p = _num(t["p"], f"{path}.p", positive=True)
        if p > 1:
            raise ConfigError(f"{path}.p: must be <= 1")
        reward, dist = _parse_reward(t["reward"], f"{path}.reward")
        types_out.append({"a": a, "p": p, "reward": reward})
        cons.append(a)
        probs.append(p)
        dists.append(dist)
    total = math.fsum(probs)
    if abs(total - 1.0) > PROB_TOL:
        raise ConfigError(f"instance.types[*].p: probabilities sum to {total!r}, expected 1")
    # sums within tolerance are renormalised so downstream checks see exactly 1
    probs = [p / total for p in probs]
    try:
        spec = build_instance(cons, probs, dists, ratios, 1)
    except ConfigurationError as exc:
        raise ConfigError(f"instance: {exc}") from None
    norm = {"resources": m, "capacity_ratios": ratios, "types": types_out}
    return norm, spec


def _parse_policy(doc, path):
    doc = _obj(doc, path)
    _unknown(doc, _POLICY_KEYS, path)
    if doc.get("kind") not in POLICY_KINDS:
        raise ConfigError(f"{path}.kind: expected one of {', '.join(POLICY_KINDS)}")
    out = {"kind": doc["kind"], "kappa1": _num(doc.get("kappa1", 1.0), f"{path}.kappa1", positive=True)}
    if doc.get("resolve_every") is not None:
        out["resolve_every"] = _int(doc["resolve_every"], f"{path}.resolve_every", minimum=1)
    if doc.get("name") is not None:
        if not isinstance(doc["name"], str) or not doc["name"]:
            raise ConfigError(f"{path}.name: expected a nonempty string")
        out["name"] = doc["name"]
    return out


def _parse_experiment(doc):
    doc = _obj(doc, "experiment")
    _unknown(doc, _EXPERIMENT_DEFAULTS, "experiment")
    out = dict(_EXPERIMENT_DEFAULTS)
    out.update(doc)
    if out["kind"] not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind: expected one of {', '.join(EXPERIMENT_KINDS)}")
    out["policies"] = [_parse_policy(p, f"experiment.policies[{i}]")
                       for i, p in enumerate(_list(out["policies"], "experiment.policies", nonempty=False))]
    labels = [p.get("name", p["kind"]) for p in out["policies"]]
    if len(set(labels)) != len(labels):
        raise ConfigError("experiment.policies: duplicate policy labels; set distinct names")
    out["T_grid"] = [_int(v, f"experiment.T_grid[{i}]", 1)
                     for i, v in enumerate(_list(out["T_grid"], "experiment.T_grid", nonempty=False))]
    out["s_grid"] = [_int(v, f"experiment.s_grid[{i}]", 2)
                     for i, v in enumerate(_list(out["s_grid"], "experiment.s_grid", nonempty=False))]
    out["horizon"] = _int(out["horizon"], "experiment.horizon", 1)
    out["replications"] = _int(out["replications"], "experiment.replications", 2)
    out["seed"] = _int(out["seed"], "experiment.seed", 0)
    if out["workers"] is not None:
        out["workers"] = _int(out["workers"], "experiment.workers", 1)
    out["chunk_size"] = _int(out["chunk_size"], "experiment.chunk_size", 1)
    if out["ratio"] is not None:
        out["ratio"] = _num(out["ratio"], "experiment.ratio", positive=True)
    out["kappa1"] = _num(out["kappa1"], "experiment.kappa1", positive=True)
    if not isinstance(out["output"], str) or not out["output"]:
        raise ConfigError("experiment.output: expected a nonempty path string")
    bench = out["benchmark"]
    if bench != "lp" and bench not in labels:
        raise ConfigError("experiment.benchmark: expected 'lp' or the name of a configured policy")
    kind = out["kind"]
    if kind in ("simulate", "sweep") and not out["policies"]:
        raise ConfigError("experiment.policies: at least one policy is required")
    if kind == "sweep" and not out["T_grid"]:
        raise ConfigError("experiment.T_grid: required for sweep")
    if kind in ("dualconv", "myopic") and not out["s_grid"]:
        raise ConfigError("experiment.s_grid: required for this experiment kind")
    return out


def parse_config(document) -> RunConfig:
    """Validate a configuration given as JSON text, bytes or an already-decoded object."""
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"$: invalid JSON ({exc})") from None
    doc = _obj(document, "$")
    _unknown(doc, {"instance", "experiment"}, "$")
    if "instance" not in doc:
        raise ConfigError("instance: missing")
    if "experiment" not in doc:
        raise ConfigError("experiment: missing")
    instance, spec = _parse_instance(doc["instance"])
    experiment = _parse_experiment(doc["experiment"])
    return RunConfig(instance, experiment, spec)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_document(), indent=2, sort_keys=True)


# -- output --------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


class ResultWriter:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.rows: list = []

    def add(self, experiment, policy, x, mean, stderr, reps, extra=""):
        self.rows.append((experiment, policy, x, mean, stderr, reps, extra))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def flush(self, meta: dict):
        os.makedirs(self.out_dir, exist_ok=True)
        with open(os.path.join(self.out_dir, "results.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())
        with open(os.path.join(self.out_dir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _versions() -> dict:
    import scipy

    return {"nrmsim": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


# -- experiments ---------------------------------------------------------------------


def _fit_dict(fit):
    if fit is None:
        return None
    return {"exponent": fit.exponent, "coefficient": fit.coefficient, "r_squared": fit.r_squared}


def _run_solve(cfg, spec, exp, writer, meta, stream):
    T = exp["horizon"]
    sol = solve_fluid(spec.with_horizon(T), spec.capacity_ratio * T, T)
    q = [float(v) for v in sol.quantiles]
    mu = [float(v) for v in sol.dual]
    print(f"q* = ({', '.join(f'{v:.10g}' for v in q)})", file=stream)
    print(f"mu* = ({', '.join(f'{v:.10g}' for v in mu)})", file=stream)
    print(f"objective = {sol.objective:.12g}  kkt_residual = {sol.kkt_residual:.3g}", file=stream)
    extra = json.dumps({"q": q, "mu": mu, "kkt_residual": sol.kkt_residual}, sort_keys=True)
    writer.add("solve", "", T, sol.objective, None, None, extra)


def _benchmark(exp, policies):
    if exp["benchmark"] == "lp":
        return "lp"
    return next(p for p in policies if p.label == exp["benchmark"])


def _run_sweep(cfg, spec, exp, writer, meta, workers, grid, experiment):
    policies = cfg.policies

    def emit(row: RegretRow):
        extra = ""
        if row.mean_vs_integer is not None:
            extra = json.dumps({"mean_vs_integer": row.mean_vs_integer,
                                "stderr_vs_integer": row.stderr_vs_integer}, sort_keys=True)
        writer.add(experiment, row.policy, row.T, row.mean, row.stderr, row.reps, extra)

    table = estimate_regret(spec, policies, grid, exp["replications"], exp["seed"], workers=workers,
                            chunk_size=exp["chunk_size"], benchmark=_benchmark(exp, policies), on_row=emit)
    # rows arrive grouped by horizon; the file is ordered by policy, then horizon
    order = {p.label: i for i, p in enumerate(policies)}
    writer.rows.sort(key=lambda r: (order.get(r[1], -1), r[2]))
    fits = {}
    for p in policies:
        try:
            fits[p.label] = _fit_dict(fit_growth(table, p.label))
        except FitError:
            fits[p.label] = None
    meta["growth_fits"] = fits


def _run_dualconv(cfg, spec, exp, writer, meta, workers):
    ratio = exp["ratio"] if exp["ratio"] is not None else spec.capacity_ratio
    rows, fit = dual_convergence_experiment(spec, ratio, exp["s_grid"], exp["replications"], exp["seed"],
                                            workers=workers, chunk_size=exp["chunk_size"])
    for r in sorted(rows, key=lambda r: (r.type, r.s)):
        writer.add("dualconv", f"type{r.type}", r.s, r.mean, r.stderr, r.reps)
    meta["growth_fits"] = {"dual_gap": _fit_dict(fit)}


def _run_myopic(cfg, spec, exp, writer, meta, workers):
    policies = cfg.policies
    kappa1 = policies[0].kappa1 if policies else exp["kappa1"]
    label = policies[0].label if policies else "log2_fluid"
    rows, fit = myopic_decay_experiment(spec, exp["s_grid"], exp["replications"], exp["seed"], kappa1=kappa1,
                                        workers=workers, chunk_size=exp["chunk_size"])
    for r in rows:
        writer.add("myopic", label, r.s, r.mean, r.stderr, r.reps)
    meta["growth_fits"] = {"myopic": _fit_dict(fit)}


def run(cfg: RunConfig, seed: int | None = None, workers: int | None = None, out: str | None = None,
        stream=None) -> int:
    """Execute ``cfg``; writes ``results.csv`` and ``meta.json`` under the output directory."""
    stream = stream or sys.stdout
    exp = dict(cfg.experiment)
    if seed is not None:
        exp["seed"] = int(seed)
    n_workers = resolve_workers(workers if workers is not None else exp["workers"])
    out_dir = out or exp["output"]
    writer = ResultWriter(out_dir)
    started = time.time()
    meta = {"config": {"instance": cfg.instance, "experiment": exp}, "seed": exp["seed"],
            "workers": n_workers, "versions": _versions(), "partial": False}
    spec = cfg.spec
    code = EXIT_OK
    try:
        kind = exp["kind"]
        if kind == "solve":
            _run_solve(cfg, spec, exp, writer, meta, stream)
        elif kind == "sweep":
            _run_sweep(cfg, spec, exp, writer, meta, n_workers, exp["T_grid"], "sweep")
        elif kind == "simulate":
            _run_sweep(cfg, spec, exp, writer, meta, n_workers, [exp["horizon"]], "simulate")
        elif kind == "dualconv":
            _run_dualconv(cfg, spec, exp, writer, meta, n_workers)
        elif kind == "myopic":
            _run_myopic(cfg, spec, exp, writer, meta, n_workers)
    except (SolverError, OfflineError, SimplexError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.error("experiment failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        meta["partial"] = True
        meta["error"] = str(exc)
        code = EXIT_SOLVER
    meta["wall_time_s"] = time.time() - started
    writer.flush(meta)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nrmsim", description="Online resource allocation experiments.")
    ap.add_argument("--config", required=True, help="path to the JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    ap.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
    ap.add_argument("--out", default=None, help="output directory (default: experiment.output)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers: must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg, seed=args.seed, workers=args.workers, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
