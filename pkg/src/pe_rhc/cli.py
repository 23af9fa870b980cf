"""Command line harness: ``pe-rhc run`` and ``pe-rhc check``.

A config is a JSON object::

    {
      "system": "system.json" | {"A": ..., "B": ..., "eps_c": ..., "S": ...},
      "cost": {"family": "quadratic", "schedule": "constant", "Q": ..., "R": ...},
      "terminal": {"P": ...} | {"corners": [...]} | {"box_radius": r} | null,
      "constraint": {"box": [lo, hi]} | {"F": ..., "b": ...},
      "controller": "online-rhc" | "etc" | "oracle" | "hindsight",
      "T": [256, 512], "seeds": [0, 1], "out": "results",
      "H": 16, "M": 10, "K": 8, "L": 4, "N": null, ...
    }

``terminal.box_radius`` builds the weight from the corners of the entrywise
box of that half-width around the system's ``A``. Relative paths are
resolved against the config file's directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import checks
from .controller import (
    RunConfig,
    RunError,
    TrajectoryLog,
    hindsight_log,
    run_etc,
    run_hindsight,
    run_online_rhc,
    run_oracle_baseline,
)
from .costs import StageCostSpec, TerminalCostSpec, box_corners, synth_terminal
from .linsys import ContractError, load_system
from .metrics import robust_slope_fit
from .rhc import PolytopeU, SolverError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
CONTROLLERS = ("online-rhc", "etc", "oracle", "hindsight")

CONFIG_KEYS = {
    "system", "cost", "terminal", "constraint", "controller", "T", "seeds", "out",
    "H", "M", "Gamma", "delta", "lam", "gamma", "K", "L", "N", "perturb", "pin_theta",
    "drop_interval_start", "select_horizon", "x1", "etc_constant",
}
COST_KEYS = {"family", "schedule", "Q", "R", "a", "b", "beta_ref"}

SUMMARY_SCHEMA = """
{
  "type": "object",
  "required": ["controller", "config_hash", "slope_regret", "slope_violation",
               "coverage_rate", "poe_pass_rate", "runs"],
  "properties": {
    "controller": {"enum": ["online-rhc", "etc", "oracle", "hindsight"]},
    "config_hash": {"type": "string"},
    "slope_regret": {"type": ["number", "null"]},
    "r2_regret": {"type": ["number", "null"]},
    "slope_violation": {"type": ["number", "null"]},
    "r2_violation": {"type": ["number", "null"]},
    "coverage_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    "poe_pass_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    "runs": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["T", "seed", "file", "total_cost", "violation"],
        "properties": {
          "T": {"type": "integer", "minimum": 1},
          "seed": {"type": "integer"},
          "file": {"type": "string"},
          "total_cost": {"type": "number"},
          "hindsight_cost": {"type": ["number", "null"]},
          "oracle_cost": {"type": ["number", "null"]},
          "regret": {"type": ["number", "null"]},
          "regret_oracle": {"type": ["number", "null"]},
          "violation": {"type": "number", "minimum": 0},
          "covered": {"type": ["boolean", "null"]},
          "poe_pass": {"type": ["boolean", "null"]},
          "intervals": {"type": "integer", "minimum": 0}
        }
      }
    }
  }
}
"""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _resolve(base: Path, ref):
    if isinstance(ref, str):
        return base / ref
    return ref


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg["_base"] = str(path.parent)
    return cfg


def build(cfg: dict, controller: str | None = None, seeds=None, out=None) -> dict:
    """Validate a parsed config and build every run ingredient."""
    unknown = set(cfg) - CONFIG_KEYS - {"_base"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("system", "cost", "constraint", "T"):
        if key not in cfg:
            raise ConfigError(f"missing config key {key!r}")
    base = Path(cfg.get("_base", "."))
    ctrl = controller or cfg.get("controller", "online-rhc")
    if ctrl not in CONTROLLERS:
        raise ConfigError(f"unknown controller {ctrl!r}")
    Ts = cfg["T"] if isinstance(cfg["T"], list) else [cfg["T"]]
    seeds = list(seeds) if seeds is not None else cfg.get("seeds", [0])
    if not Ts or not seeds:
        raise ConfigError("T and seeds must be nonempty")
    try:
        sysdata = cfg["system"]
        theta, noise, x1 = load_system(_resolve(base, sysdata))
        if "x1" in cfg:
            x1 = np.asarray(cfg["x1"], dtype=float).reshape(theta.n)
        costs = _build_cost(cfg["cost"])
        U = _build_constraint(cfg["constraint"], theta.m)
        terminal = _build_terminal(cfg.get("terminal"), theta)
        run_kw = {k: cfg[k] for k in ("H", "M", "Gamma", "delta", "lam", "gamma", "K", "L", "N", "perturb",
                                      "pin_theta", "drop_interval_start", "select_horizon", "etc_constant")
                  if k in cfg}
        run_cfgs = {(int(T), int(s)): RunConfig(T=int(T), seed=int(s), **run_kw) for T in Ts for s in seeds}
    except (ContractError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = Path(out or _resolve(base, cfg.get("out", "results")))
    digest = hashlib.sha256(json.dumps({k: v for k, v in cfg.items() if k != "_base"}, sort_keys=True)
                            .encode()).hexdigest()[:16]
    return {"theta": theta, "noise": noise, "x1": x1, "costs": costs, "U": U, "terminal": terminal,
            "controller": ctrl, "runs": run_cfgs, "out": out_dir, "hash": digest}


def _build_cost(c: dict) -> StageCostSpec:
    if not isinstance(c, dict):
        raise ConfigError("cost must be an object")
    unknown = set(c) - COST_KEYS
    if unknown:
        raise ConfigError(f"unknown cost keys: {sorted(unknown)}")
    fam = c.get("family", "quadratic")
    sched = c.get("schedule", "constant")
    if fam == "quadratic":
        return StageCostSpec("quadratic", sched, Q=np.asarray(c["Q"], dtype=float), R=np.asarray(c["R"], dtype=float))
    if fam == "power":
        return StageCostSpec.power(c["a"], schedule=sched)
    if fam == "tracking":
        return StageCostSpec.tracking(c["b"], c["a"], c.get("beta_ref"), schedule=sched)
    raise ConfigError(f"unknown cost family {fam!r}")


def _build_constraint(c: dict, m: int) -> PolytopeU:
    if "box" in c:
        lo, hi = c["box"]
        return PolytopeU.from_box(lo, hi, m)
    return PolytopeU(np.asarray(c["F"], dtype=float), np.asarray(c["b"], dtype=float))


def _build_terminal(t, theta) -> TerminalCostSpec | None:
    if t is None:
        return None
    if "P" in t:
        return TerminalCostSpec(np.asarray(t["P"], dtype=float))
    if "corners" in t:
        return synth_terminal([np.asarray(A, dtype=float) for A in t["corners"]])
    if "box_radius" in t:
        return synth_terminal(box_corners(theta, float(t["box_radius"])))
    raise ConfigError("terminal needs one of P, corners or box_radius")


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return "%.17g" % v


def csv_header(n: int, m: int) -> str:
    cols = ["t", "interval"]
    for name, d in (("x", n), ("y", n), ("xbar", n), ("uhat", m), ("du", m), ("u", m)):
        cols += [f"{name}{j}" for j in range(d)]
    return ",".join(cols + ["cost", "violation"])


def write_csv(log: TrajectoryLog, path: Path):
    lines = [csv_header(log.n, log.m)]
    block = np.hstack([log.x, log.y, log.xbar, log.uhat, log.du, log.u, log.cost[:, None], log.violation[:, None]])
    for k in range(len(log.t)):
        lines.append(f"{int(log.t[k])},{int(log.interval[k])}," + ",".join(_fmt(v) for v in block[k]))
    for r in log.intervals:
        lines.append(",".join(["I", str(r.i), str(r.t_i), _fmt(r.beta_i), _fmt(r.theta_err_fro),
                               _fmt(r.lambda_min_V), _fmt(r.poe_bound), "true" if r.covered else "false"]))
    path.write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[np.ndarray, list]:
    """Step rows as a float array and interval rows as lists of strings."""
    steps, intervals = [], []
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.strip().split(",")
            if parts[0] == "I":
                intervals.append(parts[1:])
            else:
                steps.append([float(p) for p in parts])
    return np.array(steps), intervals


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _execute(job):
    """Run one (T, seed) pair; top-level so it can be sent to a worker process."""
    b, key = job
    rc = b["runs"][key]
    ctrl = b["controller"]
    if ctrl == "online-rhc":
        log = run_online_rhc(b["theta"], b["noise"], b["costs"], b["terminal"], b["U"], rc, b["x1"])
    elif ctrl == "etc":
        log = run_etc(b["theta"], b["noise"], b["costs"], b["terminal"], b["U"], rc, b["x1"])
    elif ctrl == "oracle":
        log = run_oracle_baseline(b["theta"], b["costs"], b["terminal"], b["U"], rc, b["x1"])
    else:
        seq = run_hindsight(b["theta"], b["costs"], b["U"], rc, b["x1"])
        log = hindsight_log(b["theta"], b["costs"], b["U"], seq, b["x1"])
    return key, log


def _reference_costs(b, T: int) -> tuple[float, float]:
    rc = RunConfig(T=T, **{k: getattr(next(iter(b["runs"].values())), k) for k in ("H", "M", "Gamma")})
    hs = run_hindsight(b["theta"], b["costs"], b["U"], rc, b["x1"]).value
    orc = run_oracle_baseline(b["theta"], b["costs"], b["terminal"], b["U"], rc, b["x1"]).total_cost
    return float(hs), float(orc)


def execute_all(b: dict, workers: int = 1) -> dict:
    jobs = [(b, key) for key in sorted(b["runs"])]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_execute, jobs))
    else:
        results = dict(_execute(j) for j in jobs)
    return results


def summarize(b: dict, logs: dict) -> dict:
    ctrl = b["controller"]
    refs = {}
    if ctrl in ("online-rhc", "etc"):
        for T in sorted({T for T, _ in logs}):
            refs[T] = _reference_costs(b, T)
    runs = []
    for (T, seed) in sorted(logs):
        lg = logs[(T, seed)]
        rec = {"T": T, "seed": seed, "file": f"run_{T}_{seed}.csv", "total_cost": lg.total_cost,
               "violation": lg.total_violation, "intervals": len(lg.intervals),
               "hindsight_cost": None, "oracle_cost": None, "regret": None, "regret_oracle": None,
               "covered": None, "poe_pass": None}
        if T in refs:
            hs, orc = refs[T]
            rec.update(hindsight_cost=hs, oracle_cost=orc, regret=lg.total_cost - hs, regret_oracle=lg.total_cost - orc)
        if lg.intervals:
            rec["covered"] = all(r.covered for r in lg.intervals)
            rec["poe_pass"] = all(r.poe_pass for r in lg.intervals)
        runs.append(rec)
    summary = {"controller": ctrl, "config_hash": b["hash"], "runs": runs,
               "slope_regret": None, "r2_regret": None, "slope_violation": None, "r2_violation": None}
    Ts = sorted({r["T"] for r in runs})
    for field in ("regret", "violation"):
        if len(Ts) < 3 or any(r[field] is None for r in runs):
            continue
        means = [float(np.mean([r[field] for r in runs if r["T"] == T])) for T in Ts]
        if min(means) <= 0:
            continue
        fit = robust_slope_fit(Ts, means)["chosen"]
        summary[f"slope_{field}"] = fit.slope
        summary[f"r2_{field}"] = fit.r2
    cov = [r["covered"] for r in runs if r["covered"] is not None]
    poe = [r["poe_pass"] for r in runs if r["poe_pass"] is not None]
    summary["coverage_rate"] = float(np.mean(cov)) if cov else None
    summary["poe_pass_rate"] = float(np.mean(poe)) if poe else None
    jsonschema.validate(summary, json.loads(SUMMARY_SCHEMA))
    return summary


def _workers(flag) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("PE_RHC_WORKERS")
    return max(1, int(env)) if env else 1


def cmd_run(args) -> int:
    b = build(load_config(args.config), args.controller, [args.seed] if args.seed is not None else None, args.out)
    logs = execute_all(b, _workers(args.workers))
    b["out"].mkdir(parents=True, exist_ok=True)
    for (T, seed), lg in sorted(logs.items()):
        write_csv(lg, b["out"] / f"run_{T}_{seed}.csv")
    summary = summarize(b, logs)
    (b["out"] / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(logs)} runs to {b['out']}")
    return EXIT_OK


def cmd_check(args) -> int:
    b = build(load_config(args.config), "online-rhc", [args.seed] if args.seed is not None else None, args.out)
    logs = execute_all(b, _workers(args.workers))
    results = checks.run_invariants(list(logs.values()), b["U"])
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pe-rhc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("check", cmd_check)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--controller", choices=CONTROLLERS)
        s.add_argument("--workers", type=int)
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, SolverError, ContractError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
