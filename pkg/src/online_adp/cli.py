"""Experiment harness: JSON config in, ``trajectory.csv`` and ``manifest.json`` out.

Subcommands::

    online-adp run --config cfg.json --out DIR [--seed N]
    online-adp report --out DIR traj1.csv [traj2.csv ...]
    online-adp validate --config cfg.json

Exit status is 0 when every bound check passes, 1 when a check fails,
2 on a usage or config error and 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from online_adp import __version__
from online_adp.async_algos import (
    AsyncSchedule,
    Partition,
    alternating_pi_schedule,
    random_vi_schedule,
    round_robin_schedule,
    run_async_online_pi,
    run_async_online_vi,
    validate_schedule,
)
from online_adp.bounds import ALGORITHMS, THEOREM_TAG, TAIL_SLACK, evaluate_checks, params_for, tail_indices
from online_adp.core import ContractViolation, NumericalFailure
from online_adp.models import (
    ScenarioSpec,
    cost_from_doc,
    generate_scenario,
    kernel_from_dict,
    m1_kernel,
    m2_kernel,
    random_mdp,
)
from online_adp.oracle import measure_drift_constants, solve_all
from online_adp.sync_algos import (
    ErrorInjector,
    PowerSchedule,
    run_approx_online_optimistic_pi,
    run_approx_online_pi,
    run_approx_online_vi,
    run_online_optimistic_pi,
    run_online_pi,
)

log = logging.getLogger("online_adp")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CSV_COLUMNS = ("k", "algorithm", "err", "bound", "bound_rec", "bound_kind", "m_k", "e_k",
               "realized_eps", "realized_delta", "rho_k", "gamma1_k", "gamma2_k", "eta1_k",
               "eta2_k", "eta3_k", "rho_bar_k", "policy", "check")
POWER_ALGOS = ("avi", "opi", "aopi", "async-vi")


class ConfigError(ValueError):
    """Config validation failure; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def fmt(v) -> str:
    """17 significant digits, ``nan`` for missing values."""
    v = float("nan") if v is None else float(v)
    if v != v:
        return "nan"
    return format(v, ".17g")


# ---------------------------------------------------------------------------
# config

def _get(doc, key, path, kind=None, default=...):
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", "expected an object")
    where = f"{path}.{key}" if path else key
    if key not in doc:
        if default is ...:
            raise ConfigError(where, "missing")
        return default
    v = doc[key]
    if kind is not None and not isinstance(v, kind) or isinstance(v, bool) and kind in (int, float, (int, float)):
        raise ConfigError(where, f"expected {getattr(kind, '__name__', kind)}")
    return v


def _num(doc, key, path, default=..., lo=None, hi=None, integer=False):
    v = _get(doc, key, path, int if integer else (int, float), default)
    where = f"{path}.{key}" if path else key
    if v is None:
        return v
    if lo is not None and v < lo or hi is not None and v > hi:
        raise ConfigError(where, f"must lie in [{lo}, {hi}], got {v}")
    return v


def _magnitudes(doc, key, path):
    v = _get(doc, key, path, (int, float, list), 0.0)
    seq = v if isinstance(v, list) else [v]
    for i, x in enumerate(seq):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not x >= 0:
            raise ConfigError(f"{path}.{key}[{i}]" if isinstance(v, list) else f"{path}.{key}",
                              "must be a nonnegative number")
    return tuple(float(x) for x in seq)


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the resolved JSON document."""

    raw: dict
    algorithm: str
    horizon: int
    seed: int
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def section(self, name):
        return self.raw.get(name, {}) or {}


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from exc
    return parse_config(doc, seed, path.parent)


def parse_config(doc: dict, seed: int | None = None, base_dir=None) -> ExperimentConfig:
    """Validate the document shape; model and schedule contents are checked when built."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected an object")
    doc = json.loads(json.dumps(doc))
    alg = _get(doc, "algorithm", "", str)
    if alg not in ALGORITHMS:
        raise ConfigError("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
    K = _num(doc, "horizon", "", lo=1, integer=True)
    if seed is not None:
        doc["seed"] = seed
    s = _num(doc, "seed", "", 0, lo=0, hi=2**64 - 1, integer=True)
    doc["seed"] = s
    _get(doc, "model", "", dict)
    _get(doc, "scenario", "", dict, {"kind": "static"})
    if alg in POWER_ALGOS:
        powers = _get(doc, "powers", "", dict, {"m": [1]})
        m = _get(powers, "m", "powers", (int, list))
        for i, v in enumerate(m if isinstance(m, list) else [m]):
            where = f"powers.m[{i}]" if isinstance(m, list) else "powers.m"
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(where, "must be an integer")
            if v < 1:
                raise ConfigError(where, f"must be >= 1, got {v}")
        if isinstance(m, list) and not m:
            raise ConfigError("powers.m", "must not be empty")
    if alg == "aopi" and K < 2:
        raise ConfigError("horizon", "approximate optimistic PI needs horizon >= 2")
    errors = _get(doc, "errors", "", dict, {})
    for key in ("e", "eps", "delta"):
        _magnitudes(errors, key, "errors")
    if alg.startswith("async"):
        _get(doc, "partition", "", dict, {"N": 1})
        _get(doc, "schedule", "", dict)
        if alg == "async-pi":
            mode = _get(doc, "mode", "", str, "full")
            if mode not in ("full", "reduced"):
                raise ConfigError("mode", "must be 'full' or 'reduced'")
    tail = _get(doc, "tail", "", dict, {})
    _num(tail, "burn_in", "tail", 0.3, lo=0.0, hi=1.0)
    _num(tail, "window", "tail", 0.2, lo=0.0, hi=1.0)
    drift = _get(doc, "drift", "", dict, {})
    _num(drift, "sample_budget", "drift", 256, lo=1, integer=True)
    return ExperimentConfig(doc, alg, int(K), int(s), Path(base_dir or Path.cwd()))


def build_model(cfg: ExperimentConfig):
    spec = cfg.raw["model"]
    if "file" in spec:
        fpath = cfg.base_dir / _get(spec, "file", "model", str)
        try:
            spec = {**json.loads(fpath.read_text()), **{k: v for k, v in spec.items() if k != "file"}}
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("model.file", f"cannot load {fpath}: {exc}") from exc
        spec.setdefault("kind", "inline")
    kind = _get(spec, "kind", "model", str)
    try:
        if kind == "m1":
            kernel, cost = m1_kernel()
        elif kind == "m2":
            kernel, cost = m2_kernel()
        elif kind == "random":
            kernel, cost = random_mdp(
                _num(spec, "n_states", "model", lo=1, integer=True),
                _num(spec, "n_actions", "model", lo=1, integer=True),
                _num(spec, "seed", "model", 0, lo=0, integer=True),
                discount=_num(spec, "discount", "model", 0.9),
                sparse_feasible=bool(_get(spec, "sparse_feasible", "model", bool, False)))
        elif kind == "inline":
            kernel = kernel_from_dict(spec)
            cost = cost_from_doc(_get(spec, "cost", "model"), kernel.n_states)
        else:
            raise ConfigError("model.kind", "must be one of m1, m2, random, inline")
    except (KeyError, TypeError) as exc:
        raise ConfigError("model", f"malformed model: {exc}") from exc
    except ContractViolation as exc:
        raise ConfigError("model", str(exc)) from exc
    weights = _get(spec, "weights", "model", list, None)

    sc = cfg.section("scenario") or {"kind": "static"}
    alternates = tuple(cost_from_doc(c, kernel.n_states) for c in _get(sc, "alternates", "scenario", list, []))
    try:
        scenario = ScenarioSpec(
            kind=_get(sc, "kind", "scenario", str), kernel=kernel, base_cost=cost, horizon=cfg.horizon,
            amplitude=float(_num(sc, "amplitude", "scenario", 0.0)),
            period=int(_num(sc, "period", "scenario", 1, integer=True)),
            step_bound=float(_num(sc, "step_bound", "scenario", 0.0)),
            switch_times=tuple(_get(sc, "switch_times", "scenario", list, [])),
            alternates=alternates, seed=cfg.seed,
            weights=None if weights is None else np.asarray(weights, dtype=float))
        return generate_scenario(scenario)
    except ContractViolation as exc:
        raise ConfigError("scenario", str(exc)) from exc


def _powers(cfg):
    m = cfg.section("powers").get("m", [1])
    m = m if isinstance(m, list) else [m]
    return PowerSchedule.cycling(m, cfg.horizon)


def _injector(cfg, key, tag):
    mags = _magnitudes(cfg.section("errors"), key, "errors")
    return ErrorInjector(mags, seed=(cfg.seed * 8 + tag) % 2**63)


def _vector(cfg, key, n, default):
    v = cfg.section("init").get(key)
    if v is None:
        return default
    arr = np.asarray(v, dtype=float)
    if arr.shape != np.shape(default):
        raise ConfigError(f"init.{key}", f"expected shape {np.shape(default)}, got {arr.shape}")
    return arr


def build_schedule(cfg, model):
    part_doc = cfg.section("partition") or {"N": 1}
    if "assignment" in part_doc:
        assignment = _get(part_doc, "assignment", "partition", list)
        N = _num(part_doc, "N", "partition", max(assignment) + 1 if assignment else 1, lo=1, integer=True)
        try:
            partition = Partition(tuple(assignment), N)
        except ContractViolation as exc:
            raise ConfigError("partition", str(exc)) from exc
    else:
        N = _num(part_doc, "N", "partition", 1, lo=1, hi=model.n_states, integer=True)
        partition = Partition.contiguous(model.n_states, N)
    sd = cfg.section("schedule")
    kind = _get(sd, "kind", "schedule", str)
    K = cfg.horizon
    seed = _num(sd, "seed", "schedule", cfg.seed, lo=0, integer=True)
    if kind == "round-robin":
        sched = round_robin_schedule(N, K)
    elif kind == "random":
        sched = random_vi_schedule(N, K, _num(sd, "T_a", "schedule", lo=1, integer=True),
                                   _num(sd, "T_d", "schedule", 0, lo=0, integer=True), seed,
                                   float(_num(sd, "density", "schedule", 0.5, lo=0.0, hi=1.0)))
    elif kind == "alternating":
        T_a = _num(sd, "T_a", "schedule", lo=2, integer=True)
        sched = alternating_pi_schedule(N, K, T_a, seed if "seed" in sd else None)
    elif kind == "explicit":
        try:
            sched = AsyncSchedule.from_dict(sd)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("schedule", f"malformed explicit schedule: {exc}") from exc
    else:
        raise ConfigError("schedule.kind", "must be one of round-robin, random, alternating, explicit")
    if sched.N != partition.N:
        raise ConfigError("schedule", f"schedule has {sched.N} processors, partition has {partition.N}")
    bad = validate_schedule(sched, K)
    if bad:
        raise ConfigError("schedule", "; ".join(str(v) for v in bad[:5]))
    return partition, sched


def dispatch(cfg: ExperimentConfig, model, oracle):
    n = model.n_states
    alg = cfg.algorithm
    J0 = _vector(cfg, "J0", n, np.zeros(n))
    mu0 = cfg.section("init").get("mu0")
    mu0 = model.lowest_policy() if mu0 is None else np.asarray(mu0)
    try:
        if alg == "avi":
            return run_approx_online_vi(model, J0, _powers(cfg), _injector(cfg, "e", 1), oracle)
        if alg == "pi":
            return run_online_pi(model, mu0, oracle)
        if alg == "api":
            return run_approx_online_pi(model, mu0, _injector(cfg, "delta", 2), _injector(cfg, "eps", 3), oracle)
        if alg == "opi":
            return run_online_optimistic_pi(model, J0, _powers(cfg), oracle)
        if alg == "aopi":
            return run_approx_online_optimistic_pi(model, J0, _powers(cfg), _injector(cfg, "eps", 3),
                                                   _injector(cfg, "delta", 2), oracle)
        partition, sched = build_schedule(cfg, model)
        if alg == "async-vi":
            return run_async_online_vi(model, J0, partition, sched, _powers(cfg), _injector(cfg, "e", 1), oracle)
        Q0 = _vector(cfg, "Q0", n, np.zeros((n, model.n_actions)))
        return run_async_online_pi(model, J0, Q0, mu0, partition, sched, cfg.raw.get("mode", "full"), oracle)
    except ContractViolation as exc:
        raise ConfigError("init", str(exc)) from exc


# ---------------------------------------------------------------------------
# run

@dataclass
class RunResult:
    trajectory: object
    manifest: dict
    paths: dict

    @property
    def passed(self) -> bool:
        return self.manifest["passed"]


def _row_checks(traj, bound, tail):
    K = len(traj.errors)
    out = [""] * K
    if traj.bound_kind == "asymptotic-tail":
        for k in tail:
            out[k] = "pass" if traj.errors[k] <= bound[k] + TAIL_SLACK else "fail"
        return out
    for k in range(K):
        if bound[k] == bound[k]:
            out[k] = "pass" if traj.errors[k] <= bound[k] + 1e-9 else "fail"
    return out


def trajectory_rows(traj, drift, bound, rec, checks):
    K = len(traj.errors)
    for k in range(K):
        pol = traj.policies[k] if k < len(traj.policies) else None
        yield [str(k), traj.algorithm, fmt(traj.errors[k]), fmt(bound[k]), fmt(rec[k]), traj.bound_kind,
               fmt(traj.m[k]), fmt(traj.e[k]), fmt(traj.realized_eps[k]), fmt(traj.realized_delta[k]),
               *(fmt(drift.at(name, k)) for name in ("rho", "gamma1", "gamma2", "eta1", "eta2", "eta3", "rho_bar")),
               "" if pol is None else " ".join(str(int(a)) for a in pol), checks[k]]


def run_experiment(cfg: ExperimentConfig, out_dir) -> RunResult:
    """Solve oracles, run the configured algorithm, evaluate bounds and write outputs."""
    t0 = time.perf_counter()
    model = build_model(cfg)
    oracle = solve_all(model)
    log.info("solved %d stage oracles", model.horizon)
    powers = _powers(cfg).m if cfg.algorithm in POWER_ALGOS else None
    drift = measure_drift_constants(model, cfg.section("drift").get("sample_budget", 256), cfg.seed,
                                    oracle, powers)
    traj = dispatch(cfg, model, oracle)
    tail_doc = cfg.section("tail")
    burn, window = tail_doc.get("burn_in", 0.3), tail_doc.get("window", 0.2)
    params = params_for(traj, drift)
    checks = evaluate_checks(model, traj, params, burn, window)
    bound, rec = traj.bound, traj.bound_rec
    tail = tail_indices(len(traj.errors), burn, window)
    row_checks = _row_checks(traj, bound, tail)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "trajectory.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(trajectory_rows(traj, drift, bound, rec, row_checks))

    constants = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(params).items()
                 if not k.endswith("_seq")}
    manifest = {
        "tool": "online-adp",
        "version": __version__,
        "algorithm": cfg.algorithm,
        "theorem": THEOREM_TAG[cfg.algorithm],
        "config_digest": cfg.digest,
        "config": cfg.raw,
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "alpha": model.alpha,
        "bound_kind": traj.bound_kind,
        "drift": drift.to_dict(),
        "constants": constants,
        "meta": {k: v for k, v in traj.meta.items()},
        "checks": [c.to_dict() for c in checks],
        "passed": all(c.passed for c in checks),
        "final_error": float(traj.errors[-1]),
        "timing": {"wall_clock_s": time.perf_counter() - t0},
    }
    man_path = out / "manifest.json"
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    for c in checks:
        log.info("check %s: %s (margin %s)", c.name, "pass" if c.passed else "FAIL", fmt(c.margin))
    return RunResult(traj, manifest, {"trajectory": csv_path, "manifest": man_path})


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


# ---------------------------------------------------------------------------
# report

def read_trajectory_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "err" not in rows[0] or "bound" not in rows[0]:
        raise ConfigError(str(path), "not a trajectory CSV")
    return {"algorithm": rows[0]["algorithm"], "k": [int(r["k"]) for r in rows],
            "err": [float(r["err"]) for r in rows], "bound": [float(r["bound"]) for r in rows]}


def emit_report(trajectories: list, out_dir) -> Path:
    """Long-format ``plotdata.csv`` with columns ``k, series, value``.

    A single trajectory gives series ``err`` and ``bound_<theorem>``; several
    are prefixed by algorithm (``avi:err``), with ``#i`` disambiguating repeats.
    """
    if not trajectories:
        raise ConfigError("trajectories", "at least one trajectory is required")
    horizons = {len(t["k"]) for t in trajectories}
    if len(horizons) != 1:
        raise ConfigError("trajectories", f"horizon mismatch: {sorted(horizons)}")
    single = len(trajectories) == 1
    seen = {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "plotdata.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("k", "series", "value"))
        for t in trajectories:
            alg = t["algorithm"]
            seen[alg] = seen.get(alg, 0) + 1
            prefix = "" if single else (alg if seen[alg] == 1 else f"{alg}#{seen[alg]}") + ":"
            tag = THEOREM_TAG.get(alg, "bound")
            for name, values in (("err", t["err"]), (f"bound_{tag}", t["bound"])):
                for k, v in zip(t["k"], values):
                    w.writerow((k, prefix + name, fmt(v)))
    return path


# ---------------------------------------------------------------------------
# entry point

def _parser():
    p = argparse.ArgumentParser(prog="online-adp", description="Online ADP experiment harness.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed overriding the config")
    rep = sub.add_parser("report", help="combine trajectories into plot data")
    rep.add_argument("--out", required=True)
    rep.add_argument("trajectories", nargs="*")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ONLINE_ADP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            if args.seed is not None and not 0 <= args.seed < 2**64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            res = run_experiment(load_config(args.config, args.seed), args.out)
            for c in res.manifest["checks"]:
                print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} margin={fmt(c['margin'])}")
            return EXIT_OK if res.passed else EXIT_CHECK
        if args.command == "report":
            path = emit_report([read_trajectory_csv(p) for p in args.trajectories], args.out)
            print(path)
            return EXIT_OK
        cfg = load_config(args.config)
        model = build_model(cfg)
        if cfg.algorithm.startswith("async"):
            build_schedule(cfg, model)
        else:
            _powers(cfg) if cfg.algorithm in POWER_ALGOS else None
        print(f"ok {cfg.algorithm} K={cfg.horizon} digest={cfg.digest[:12]}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
