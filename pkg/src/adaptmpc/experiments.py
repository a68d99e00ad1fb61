"""Experiment harness: hold-one-out prior training, comparison matrix,
target-offset robustness sweep, and trial replay.

Everything is driven by one nested JSON-compatible config. Each trial runs
with ``seed = base_seed + trial`` and writes a JSON-lines trajectory log plus
a ``.meta.json`` sidecar holding what is needed to replay it.
"""

import copy
import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from adaptmpc.data import TransitionDataset, hold_one_out
from adaptmpc.envs import TaskCost, collect_dataset, make_env
from adaptmpc.mpc import MpcConfig, make_controller, run_episode
from adaptmpc.nn import MLPModel, TrainConfig, train
from adaptmpc.online import AdaptConfig, RunningMoments, initialize_from_dataset
from adaptmpc.priors import (NeuralNetPrior, estimate_residual_cov, fit_gaussian_prior,
                             fit_gmm, prior_from_json, prior_to_json)

logger = logging.getLogger(__name__)

FAMILIES = ("gaussian", "gmm", "nn1", "nn2")

_ARM_SOURCES = [
    {"tag": "free", "env": "reach", "policy": {"kind": "random"}, "seed": 1},
    {"tag": "reach", "env": "reach", "policy": {"kind": "scripted"}, "seed": 2},
    {"tag": "insertion", "env": "insertion",
     "policy": {"kind": "scripted", "via_offset": 0.05}, "seed": 3},
    {"tag": "insertion_hf", "env": "insertion_hf",
     "policy": {"kind": "scripted", "via_offset": 0.05}, "seed": 4},
]

_POINT_MASS_SOURCES = [
    {"tag": "pm_free", "env": "point_mass", "policy": {"kind": "random"}, "seed": 11},
    {"tag": "pm_other", "env": "point_mass", "env_cfg": {"target": [-0.25, 0.1]},
     "policy": {"kind": "scripted", "kp": 20.0, "kd": 8.0}, "seed": 12},
    {"tag": "point_mass", "env": "point_mass",
     "policy": {"kind": "scripted", "kp": 20.0, "kd": 8.0}, "seed": 13},
]

DEFAULT_CONFIG = {
    "seed": 0,
    "trials": 10,
    "T_max": 200,
    "data": {
        "episodes": 20,
        "steps": 100,
        "dir": None,
        "suites": {"arm": _ARM_SOURCES, "point_mass": _POINT_MASS_SOURCES},
    },
    "envs": {},
    "prior": {
        "n0": 1.0,
        "m": 1.0,
        "alpha": 1.0,
        "gmm_k": 8,
        "train": {"learning_rate": 1e-3, "momentum": 0.9, "batch_size": 64,
                  "epochs": 200, "weight_decay": 1e-5, "val_fraction": 0.1},
    },
    "mpc": {"horizon": 15, "rate": 20.0, "gamma": 0.95, "ilqr_iters": 2,
            "noise_scale": 0.01, "psd_cost": True, "mean_rule": "strengths"},
    "adapt": {"eta0": 8.0, "nu0": 1.0, "beta_min": 0.0, "beta_max": 0.9995,
              "n_min": 1.0, "n_max": 50.0},
    "matrix": {"envs": ["reach", "insertion"], "families": list(FAMILIES),
               "adapt": [True, False]},
    "robustness": {"env": "insertion", "family": "nn2",
                   "offsets": [0.0, 0.005, 0.01, 0.015], "adapt": [True, False]},
}


# -- config --------------------------------------------------------------------

def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(path=None):
    """Defaults, recursively overridden by the JSON document at ``path``."""
    cfg = default_config()
    if path:
        _merge(cfg, json.loads(Path(path).read_text()))
    return cfg


def _merge(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def set_path(cfg, assignment):
    """Apply ``"a.b.c=value"``; the value is parsed as JSON when possible."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ValueError(f"expected KEY=VALUE, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"{key!r} passes through a non-section value")
    node[parts[-1]] = value
    return cfg


def validate_config(cfg):
    if int(cfg["trials"]) < 0:
        raise ValueError("trials must be >= 0")
    for fam in cfg["matrix"]["families"] + [cfg["robustness"]["family"]]:
        if fam not in FAMILIES:
            raise ValueError(f"unknown prior family {fam!r}; choose from {FAMILIES}")
    if any(o < 0 for o in cfg["robustness"]["offsets"]):
        raise ValueError("offsets must be nonnegative")
    for env_id in cfg["matrix"]["envs"] + [cfg["robustness"]["env"]]:
        suite_for(cfg, env_id)
    mpc_config(cfg, 0)


def config_hash(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def mpc_config(cfg, seed, adapt=True):
    return MpcConfig(seed=seed, adapt=adapt, adapt_cfg=AdaptConfig(**cfg["adapt"]), **cfg["mpc"])


def build_env(cfg, env_id, extra=None):
    kwargs = dict(cfg.get("envs", {}).get(env_id, {}))
    kwargs.update(extra or {})
    return make_env(env_id, **kwargs)


# -- data ----------------------------------------------------------------------

def suite_for(cfg, env_id):
    for name, sources in cfg["data"]["suites"].items():
        if any(s["tag"] == env_id for s in sources):
            return name
    raise ValueError(f"no data suite contains task {env_id!r}")


def collect_suite(cfg, suite):
    data = cfg["data"]
    out = []
    for src in data["suites"][suite]:
        env = build_env(cfg, src["env"], src.get("env_cfg"))
        ds = collect_dataset(env, src["policy"], src.get("episodes", data["episodes"]),
                             seed=src["seed"], steps=src.get("steps", data["steps"]),
                             tag=src["tag"])
        ds.metadata["tag"] = src["tag"]
        out.append(ds)
    return out


def load_suite(cfg, suite, data_dir):
    paths = [Path(data_dir) / f"{s['tag']}.jsonl" for s in cfg["data"]["suites"][suite]]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError("missing dataset files: " + ", ".join(missing))
    return [TransitionDataset.load(p) for p in paths]


def suite_datasets(cfg, suite):
    if cfg["data"].get("dir"):
        return load_suite(cfg, suite, cfg["data"]["dir"])
    return collect_suite(cfg, suite)


def cmd_collect_data(cfg, out):
    out = Path(out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for suite in cfg["data"]["suites"]:
        for ds in collect_suite(cfg, suite):
            path = out / f"{ds.metadata['tag']}.jsonl"
            ds.save(path)
            written.append({"path": str(path), "records": len(ds)})
    return written


# -- priors --------------------------------------------------------------------

def train_prior(cfg, family, held_out, datasets):
    """Fit ``family`` on every dataset except the one tagged ``held_out``.

    :returns: (prior, training dataset, report dict)
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown prior family {family!r}")
    if len(datasets) < 2:
        raise ValueError("need datasets for at least two tasks")
    pc = cfg["prior"]
    train_set = hold_one_out(datasets, held_out)
    total = sum(len(d) for d in datasets)
    report = {"family": family, "held_out": held_out, "records_total": total,
              "records_used": len(train_set), "tags": train_set.task_tags()}
    seed = int(cfg["seed"])
    if family == "gaussian":
        prior = fit_gaussian_prior(train_set, pc["n0"], pc["m"])
    elif family == "gmm":
        prior = fit_gmm(train_set, K=int(pc["gmm_k"]), seed=seed, n0=pc["n0"], m=pc["m"])
        report.update(log_likelihood=float(prior.log_likelihood[-1]), em_iters=len(prior.log_likelihood),
                      reseeds=prior.reseeds)
    else:
        dt = datasets[0].metadata.get("dt", 0.05)
        net = MLPModel(train_set.d_x, train_set.d_u, dt, context=(family == "nn2"), seed=seed)
        net, tl, vl = train(net, train_set, TrainConfig(seed=seed, **pc["train"]))
        prior = NeuralNetPrior(net, pc["alpha"], estimate_residual_cov(net, train_set),
                               pc["n0"], pc["m"])
        report.update(train_loss=float(tl), val_loss=float(vl), input_dim=net.in_dim)
    return prior, train_set, report


def cmd_train_prior(cfg, out, env_id, family):
    suite = suite_for(cfg, env_id)
    prior, train_set, report = train_prior(cfg, family, env_id, suite_datasets(cfg, suite))
    out = Path(out) / "priors"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{env_id}_{family}.json"
    path.write_text(prior_to_json(prior, {"held_out": env_id, "family": family}))
    moments_path = out / f"{env_id}_{family}.moments.json"
    moments_path.write_text(initialize_from_dataset(train_set, AdaptConfig(**cfg["adapt"])).to_json())
    report.update(path=str(path), moments=str(moments_path))
    (out / f"{env_id}_{family}.report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


@lru_cache(maxsize=16)
def _load_prior(path):
    return prior_from_json(Path(path).read_text())


# -- trials --------------------------------------------------------------------

def offset_target(env, offset, seed):
    """True target moved by ``offset`` metres in a seeded random planar direction."""
    if offset == 0:
        return env.target.copy()
    phi = np.random.default_rng([seed, 3]).uniform(0.0, 2.0 * math.pi)
    return env.target + offset * np.array([math.cos(phi), math.sin(phi)])


def run_trial(spec):
    """Run one episode described by a JSON-compatible ``spec``.

    Any exception inside the episode is caught and reported as a failed
    trial so that a sweep keeps going.
    """
    cfg = spec["config"]
    seed = int(cfg["seed"]) + int(spec["trial"])
    row = {"env": spec["env"], "family": spec["family"], "adapt": bool(spec["adapt"]),
           "offset": float(spec["offset"]), "trial": int(spec["trial"]), "seed": seed,
           "config_hash": config_hash(cfg), "success": False, "final_distance": float("nan"),
           "time_to_success": float("nan"), "aborted": False, "mean_wall_ms": float("nan"),
           "error": ""}
    try:
        env = build_env(cfg, spec["env"])
        prior = _load_prior(spec["prior_path"])
        moments = RunningMoments.from_json(spec["moments"])
        mcfg = mpc_config(cfg, seed, spec["adapt"])
        ctrl = make_controller(prior, moments, env.d_x, env.d_u, mcfg)
        cost = TaskCost(env, target=offset_target(env, spec["offset"], seed))
        x0 = env.reset(seed)
        res = run_episode(env, ctrl, cost, mcfg, x0, T_max=int(cfg["T_max"]),
                          log_path=spec.get("log_path"))
        row.update(success=bool(res.success), final_distance=float(res.final_distance),
                   time_to_success=float(res.time_to_success), aborted=bool(res.aborted),
                   mean_wall_ms=float(np.mean([r["wall_ms"] for r in res.records])))
    except Exception as err:  # recorded, sweep continues
        logger.exception("trial %s failed", spec["trial"])
        row["error"] = f"{type(err).__name__}: {err}"
    if spec.get("log_path"):
        meta = {k: v for k, v in spec.items() if k != "log_path"}
        meta["seed"] = seed
        meta["config_hash"] = row["config_hash"]
        Path(spec["log_path"] + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return row


def _run_all(specs, jobs):
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_trial, specs))
    return [run_trial(s) for s in specs]


def wilson_interval(successes, n, z=1.959963984540054):
    if n == 0:
        return float("nan"), float("nan")
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


CELL_FIELDS = ["env", "family", "adapt", "offset", "successes", "trials", "success_rate",
               "ci_low", "ci_high", "mean_time_to_success", "mean_final_distance",
               "mean_wall_ms", "errors", "base_seed", "config_hash"]


def aggregate(rows, cfg, cells=None):
    """Group trial rows into cells keyed by (env, family, adapt, offset).

    ``cells`` fixes the key order and lets empty cells (dry runs) appear.
    """
    keys = list(cells or [])
    groups = {k: [] for k in keys}
    for r in rows:
        k = (r["env"], r["family"], r["adapt"], r["offset"])
        if k not in groups:
            keys.append(k)
            groups[k] = []
        groups[k].append(r)
    out = []
    for k in keys:
        g = groups[k]
        n = len(g)
        s = sum(r["success"] for r in g)
        lo, hi = wilson_interval(s, n)
        times = [r["time_to_success"] for r in g if r["success"] and not math.isnan(r["time_to_success"])]
        dists = [r["final_distance"] for r in g if math.isfinite(r["final_distance"])]
        walls = [r["mean_wall_ms"] for r in g if math.isfinite(r["mean_wall_ms"])]
        out.append({
            "env": k[0], "family": k[1], "adapt": k[2], "offset": k[3],
            "successes": s, "trials": n, "success_rate": s / n if n else float("nan"),
            "ci_low": lo, "ci_high": hi,
            "mean_time_to_success": float(np.mean(times)) if times else float("nan"),
            "mean_final_distance": float(np.mean(dists)) if dists else float("nan"),
            "mean_wall_ms": float(np.mean(walls)) if walls else float("nan"),
            "errors": sum(1 for r in g if r["error"]),
            "base_seed": int(cfg["seed"]), "config_hash": config_hash(cfg),
        })
    return out


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    return v


def write_results(out, cfg, cells, rows):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CELL_FIELDS)
        w.writeheader()
        for c in cells:
            w.writerow({k: ("" if isinstance(c[k], float) and math.isnan(c[k]) else c[k])
                        for k in CELL_FIELDS})
    doc = {"config": cfg, "config_hash": config_hash(cfg), "cells": cells, "trials": rows}
    (out / "results.json").write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=True))


def read_results_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _prepare_priors(cfg, out, env_id, families):
    """Train and save one hold-one-out prior per family; return artifact paths."""
    suite = suite_for(cfg, env_id)
    datasets = suite_datasets(cfg, suite)
    pdir = Path(out) / "priors"
    pdir.mkdir(parents=True, exist_ok=True)
    paths = {}
    reports = {}
    for fam in families:
        prior, train_set, report = train_prior(cfg, fam, env_id, datasets)
        path = pdir / f"{env_id}_{fam}.json"
        path.write_text(prior_to_json(prior, {"held_out": env_id, "family": fam}))
        moments = initialize_from_dataset(train_set, AdaptConfig(**cfg["adapt"])).to_json()
        paths[fam] = (str(path.resolve()), moments)
        reports[fam] = report
    return paths, reports


def _specs(cfg, out, env_id, fam, adapt, offset, prior_path, moments, tag):
    logs = Path(out) / "logs" / tag
    logs.mkdir(parents=True, exist_ok=True)
    return [{"config": cfg, "env": env_id, "family": fam, "adapt": adapt, "offset": offset,
             "trial": n, "prior_path": prior_path, "moments": moments,
             "log_path": str(logs / f"trial_{n}.jsonl")}
            for n in range(int(cfg["trials"]))]


def _cell_tag(env_id, fam, adapt, offset):
    return f"{env_id}_{fam}_{'adapt' if adapt else 'fixed'}_{offset:g}"


def cmd_run_matrix(cfg, out, jobs=1):
    """Every (env, prior family, adapt flag) cell; returns the aggregated cells."""
    validate_config(cfg)
    mx = cfg["matrix"]
    keys, specs = [], []
    for env_id in mx["envs"]:
        paths = {}
        if int(cfg["trials"]) > 0:
            paths, _ = _prepare_priors(cfg, out, env_id, mx["families"])
        for fam in mx["families"]:
            for adapt in mx["adapt"]:
                keys.append((env_id, fam, bool(adapt), 0.0))
                if paths:
                    specs += _specs(cfg, out, env_id, fam, bool(adapt), 0.0, *paths[fam],
                                    _cell_tag(env_id, fam, adapt, 0.0))
    rows = _run_all(specs, jobs)
    cells = aggregate(rows, cfg, keys)
    write_results(out, cfg, cells, rows)
    return cells


def cmd_robustness(cfg, out, jobs=1):
    """Target-offset sweep for adaptive and non-adaptive control."""
    validate_config(cfg)
    rb = cfg["robustness"]
    env_id, fam = rb["env"], rb["family"]
    keys, specs = [], []
    paths = {}
    if int(cfg["trials"]) > 0:
        paths, _ = _prepare_priors(cfg, out, env_id, [fam])
    for adapt in rb["adapt"]:
        for off in rb["offsets"]:
            keys.append((env_id, fam, bool(adapt), float(off)))
            if paths:
                specs += _specs(cfg, out, env_id, fam, bool(adapt), float(off), *paths[fam],
                                _cell_tag(env_id, fam, adapt, float(off)))
    rows = _run_all(specs, jobs)
    cells = aggregate(rows, cfg, keys)
    write_results(out, cfg, cells, rows)
    return cells


# -- replay --------------------------------------------------------------------

def _read_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def compare_logs(a, b, tol=1e-12):
    """Largest numeric difference between two trajectory logs, ignoring wall time.

    :returns: (match, max_abs_diff)
    """
    if len(a) != len(b):
        return False, float("inf")
    worst = 0.0
    for ra, rb in zip(a, b):
        for key in ("t", "x", "u", "rho", "beta", "n_eff", "planned_cost"):
            va, vb = ra.get(key), rb.get(key)
            if va is None or vb is None:
                if va is not vb:
                    return False, float("inf")
                continue
            d = float(np.max(np.abs(np.asarray(va, float) - np.asarray(vb, float)), initial=0.0))
            worst = max(worst, d)
    return worst <= tol, worst


def cmd_replay(log_path, tol=1e-12):
    """Re-run a logged trial from its sidecar and compare trajectories."""
    log_path = str(log_path)
    meta = json.loads(Path(log_path + ".meta.json").read_text())
    fresh = log_path + ".replay"
    spec = dict(meta)
    spec.pop("seed", None)
    spec.pop("config_hash", None)
    spec["log_path"] = fresh
    run_trial(spec)
    try:
        ok, diff = compare_logs(_read_log(log_path), _read_log(fresh), tol)
    finally:
        for p in (fresh, fresh + ".meta.json"):
            if os.path.exists(p):
                os.remove(p)
    return {"log": log_path, "match": ok, "max_abs_diff": diff}


__all__ = [
    "DEFAULT_CONFIG", "FAMILIES", "aggregate", "build_env", "cmd_collect_data", "cmd_replay",
    "cmd_robustness", "cmd_run_matrix", "cmd_train_prior", "collect_suite", "compare_logs",
    "config_hash", "default_config", "load_config", "mpc_config", "offset_target",
    "read_results_csv", "run_trial", "set_path", "suite_datasets", "suite_for", "train_prior",
    "validate_config", "wilson_interval", "write_results",
]
