"""Command-line experiment runner.

Every subcommand reads a TOML config (optional; defaults are complete),
applies ``--set section.key=value`` overrides, validates the result against
a fixed schema and writes CSV/JSON artifacts to ``--out``. Artifacts carry the
schema version, a hash of the resolved config and the master seed; wall-clock
runtime goes to a separate ``runtime.json`` so the artifacts themselves are
byte-for-byte reproducible.

Exit status: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, RmtError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("rmtunc")

SCHEMA_VERSION = 1

_TASK = {"q0": [0.3, 1.2, 0.9], "displacement": [0.12, 0.06, -0.6], "duration": 3.2, "dt": 0.01}
_CHAIN = {"link_lengths": [0.155, 0.135, 0.218]}
_TRUTH = {"noise_gain": 0.3, "mode": "velocity-scaled"}
_WEIGHTS = {"alpha1": 0.5, "alpha2": 0.5, "beta1": 0.5, "beta2": 0.5}
_BOUNDS = {
    "concentration": [100.0, 800.0],
    "tension_std": [0.5, 1.0],
    "mean_tension": [3.0, 5.0],
    "mean_angle": [0.7853981633974483, 3.141592653589793],
}

# Defaults per subcommand; the schema is the set of keys and the type of
# each default value.
DEFAULTS = {
    "motion-mc": {
        "task": _TASK,
        "chain": _CHAIN,
        "truth": _TRUTH,
        "calibration": {"train_runs": 100, "step_stride": 1, **_WEIGHTS},
        "experiment": {"runs": 100, "model_runs": 500},
    },
    "calibrate": {
        "task": _TASK,
        "chain": _CHAIN,
        "truth": _TRUTH,
        "calibration": {"train_runs": 100, "step_stride": 1, **_WEIGHTS},
        "output": {"write_ensemble": True},
    },
    "filter": {
        "task": _TASK,
        "chain": _CHAIN,
        "truth": _TRUTH,
        "calibration": {"train_runs": 100, "step_stride": 1, **_WEIGHTS},
        "sensor": {"bias_end": 0.02, "std_base": 0.01, "std_amp": 0.005},
        "filter": {"runs": 50, "particles": 1000, "resample": "systematic"},
    },
    "wrench-cov": {
        "system": {
            "mean_tensions": [4.0, 3.5, 4.5],
            "tension_stds": [0.7, 0.6, 0.9],
            "mean_angles": [0.9, 1.8, 2.6],
            "concentrations": [300.0, 500.0, 200.0],
            "sigma_s": [5e-4, 7e-4],
        },
        "monte_carlo": {"draws": 1000000},
    },
    "wrench-fit": {"bounds": _BOUNDS, "fit": {"m": 3, "n_mc": 1000}},
    "wrench-hist": {"bounds": _BOUNDS, "histogram": {"m_list": [3, 5, 10, 15, 20], "n_train": 1000, "n_test": 2000}},
    "selftest": {},
}

# string keys restricted to a fixed vocabulary
CHOICES = {
    ("truth", "mode"): ("velocity-scaled", "constant"),
    ("filter", "resample"): ("none", "systematic"),
}


# --------------------------------------------------------------------------
# configuration


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        if not isinstance(value, list):
            return False
        proto = default[0] if default else None
        return proto is None or all(_type_ok(proto, v) for v in value)
    return isinstance(value, type(default))


def _coerce(default, value):
    if isinstance(default, float) and not isinstance(default, bool):
        return float(value)
    if isinstance(default, list) and default and isinstance(default[0], float):
        return [float(v) for v in value]
    return value


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"--set key must be section.key, got {key!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare strings need no quotes on the command line
    return parts[0], parts[1], value


def resolve_config(command: str, file_cfg: dict, overrides=()) -> dict:
    """Merge defaults, file values and overrides; reject unknown keys and bad types."""
    defaults = DEFAULTS[command]
    cfg = copy.deepcopy(defaults)
    layers = [("config file", file_cfg)]
    over = {}
    for text in overrides:
        section, key, value = _parse_override(text)
        over.setdefault(section, {})[key] = value
    layers.append(("--set", over))
    for origin, layer in layers:
        for section, body in layer.items():
            if section not in defaults:
                raise ConfigError(f"{origin}: unknown section [{section}] for {command}")
            if not isinstance(body, dict):
                raise ConfigError(f"{origin}: [{section}] must be a table")
            for key, value in body.items():
                if key not in defaults[section]:
                    raise ConfigError(f"{origin}: unknown key {section}.{key}")
                if not _type_ok(defaults[section][key], value):
                    raise ConfigError(f"{origin}: {section}.{key} has the wrong type")
                allowed = CHOICES.get((section, key))
                if allowed and value not in allowed:
                    raise ConfigError(f"{origin}: {section}.{key} must be one of {', '.join(allowed)}")
                cfg[section][key] = _coerce(defaults[section][key], value)
    return cfg


def config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# output helpers


def fmt(x) -> str:
    """15 significant digits, '.' decimal point."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.15g}"


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return float(fmt(v)) if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


class Context:
    def __init__(self, command, cfg, seed, threads, out):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.threads = threads
        self.out = out
        self.provenance = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config_hash": config_hash(cfg, seed),
            "seed": seed,
        }
        self.files = []
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def map(self, fn, items):
        return self._pool.map(fn, items) if self._pool else map(fn, items)

    def close(self):
        if self._pool:
            self._pool.shutdown()

    def summary(self, name: str, payload: dict) -> None:
        write_json(self.out / name, {**self.provenance, **payload})
        self.files.append(name)
        log.info("wrote %s", self.out / name)

    def csv(self, name: str, header, rows) -> None:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        # CSVs stay plain; their provenance is recorded in manifest.json
        write_csv(path, header, rows)
        self.files.append(name)
        log.info("wrote %s", path)


# --------------------------------------------------------------------------
# subcommands


def _chain_task(cfg):
    from .manipulator import ChainSpec, GroundTruthLaw, quintic_line_task

    chain = ChainSpec(tuple(cfg["chain"]["link_lengths"]))
    t = cfg["task"]
    task = quintic_line_task(tuple(t["q0"]), tuple(t["displacement"]), t["duration"], t["dt"], chain)
    law = GroundTruthLaw(cfg["truth"]["noise_gain"], cfg["truth"]["mode"])
    return chain, task, law


def _weights(c):
    from .calibration import CalibrationWeights

    return CalibrationWeights(c["alpha1"], c["alpha2"], c["beta1"], c["beta2"])


def _calibrate(ctx, rng, chain, task, law):
    from .calibration import calibrate_models
    from .manipulator import simulate_ensemble

    c = ctx.cfg["calibration"]
    ensemble = simulate_ensemble(rng.child(0), chain, task, law, c["train_runs"])
    cal = calibrate_models(ensemble, task, chain, _weights(c), seed=ctx.seed, step_stride=c["step_stride"])
    return ensemble, cal


def _ensemble_rows(ensemble, dt):
    for i, run in enumerate(ensemble):
        for k, q in enumerate(run):
            yield [i, k, k * dt, *q]


def cmd_calibrate(ctx):
    from .specfun import RngStream

    chain, task, law = _chain_task(ctx.cfg)
    ensemble, cal = _calibrate(ctx, RngStream(ctx.seed), chain, task, law)
    if ctx.cfg["output"]["write_ensemble"]:
        ctx.csv("ensemble.csv", ["run", "k", "t", "q1", "q2", "q3"], _ensemble_rows(ensemble, task.dt))
    ctx.summary("calibration.json", {**cal.to_dict(), "seeds": {"master": ctx.seed, "ensemble_stream": [0], "fit_inner_stream": [0]}})


def cmd_motion_mc(ctx):
    from .manipulator import simulate_ensemble, simulate_model_ensemble
    from .specfun import RngStream

    rng = RngStream(ctx.seed)
    chain, task, law = _chain_task(ctx.cfg)
    _, cal = _calibrate(ctx, rng, chain, task, law)
    e = ctx.cfg["experiment"]
    truth = simulate_ensemble(rng.child(1), chain, task, law, e["runs"])
    models = cal.models()
    names = list(models)
    sims = list(ctx.map(lambda j: simulate_model_ensemble(rng.child(2, j), models[names[j]], task, chain, e["model_runs"]), range(len(names))))
    stds = {"truth": truth.std(axis=0, ddof=1)}
    stds.update({name: s.std(axis=0, ddof=1) for name, s in zip(names, sims)})
    header = ["k", "t"] + [f"{name}_std{j}" for name in stds for j in (1, 2, 3)]
    rows = ([k, k * task.dt, *np.concatenate([s[k] for s in stds.values()])] for k in range(task.M + 1))
    ctx.csv("joint_std.csv", header, rows)
    ref = stds["truth"][1:]
    # ratio of time-summed stds; the per-step ratio is undefined at rest
    ratio = {name: stds[name][1:].sum(axis=0) / ref.sum(axis=0) for name in names}
    corr = {name: float(np.corrcoef(stds[name][1:].sum(-1), ref.sum(-1))[0, 1]) for name in names}
    ctx.summary("motion_mc.json", {"calibration": cal.to_dict(), "mean_std_ratio": ratio, "std_correlation": corr})


def cmd_filter(ctx):
    from .filter import filter_experiment, report_rows, REPORT_COLUMNS, synthetic_sensor
    from .specfun import RngStream

    rng = RngStream(ctx.seed)
    chain, task, law = _chain_task(ctx.cfg)
    _, cal = _calibrate(ctx, rng, chain, task, law)
    s, f = ctx.cfg["sensor"], ctx.cfg["filter"]
    sensor = synthetic_sensor(task.M, s["bias_end"], s["std_base"], s["std_amp"])
    reports, metrics = filter_experiment(
        rng.child(3), cal.models(), task, chain, law, sensor, f["runs"], f["particles"], f["resample"], map_fn=ctx.map
    )
    for name, runs in reports.items():
        for i, rep in enumerate(runs):
            ctx.csv(f"filter/{name}/run_{i:03d}.csv", REPORT_COLUMNS, report_rows(rep, task.dt))
    ctx.summary("filter_metrics.json", {"calibration": cal.to_dict(), "metrics": metrics})


def cmd_wrench_cov(ctx):
    from . import wrench
    from .specfun import RngStream

    s = ctx.cfg["system"]
    spec = wrench.CableSystemSpec(s["mean_tensions"], s["tension_stds"], s["mean_angles"], s["concentrations"])
    if len(s["sigma_s"]) != 2:
        raise ConfigError("system.sigma_s must hold the two diagonal entries")
    model = wrench.RmtWrenchModel.from_spec(spec, np.diag(s["sigma_s"]))
    exact = wrench.wrench_cov_closed_form(model)
    mc = wrench.product_mc_cov(RngStream(ctx.seed), model, ctx.cfg["monte_carlo"]["draws"])
    rel = float(np.linalg.norm(mc - exact) / np.linalg.norm(exact))
    vx, vy = wrench.parametric_force_variance(spec)
    ctx.csv("wrench_cov.csv", ["source", "c11", "c12", "c22"],
            [["closed_form", exact[0, 0], exact[0, 1], exact[1, 1]], ["monte_carlo", mc[0, 0], mc[0, 1], mc[1, 1]]])
    ctx.summary("wrench_cov.json", {
        "closed_form": exact, "monte_carlo": mc, "relative_frobenius_error": rel,
        "parametric_variances": [vx, vy],
    })


def _bounds(cfg):
    from .wrench import SystemBounds

    b = cfg["bounds"]
    return SystemBounds(tuple(b["concentration"]), tuple(b["tension_std"]), tuple(b["mean_tension"]), tuple(b["mean_angle"]))


def cmd_wrench_fit(ctx):
    from .specfun import RngStream
    from .wrench import estimate_sigma_s

    f = ctx.cfg["fit"]
    sigma_s = estimate_sigma_s(RngStream(ctx.seed), _bounds(ctx.cfg), f["m"], f["n_mc"])
    ctx.summary("sigma_s.json", {"sigma_s": sigma_s, "m": f["m"], "n_mc": f["n_mc"]})


def cmd_wrench_hist(ctx):
    from .specfun import RngStream
    from .wrench import error_histogram_experiment

    h = ctx.cfg["histogram"]
    results = error_histogram_experiment(RngStream(ctx.seed), _bounds(ctx.cfg), h["m_list"], h["n_train"], h["n_test"])
    ctx.csv("errors.csv", ["m", "trial", "rel_error"], ([r.m, i, e] for r in results for i, e in enumerate(r.errors)))
    ctx.summary("errors_summary.json", {"summary": [{**r.summary, "sigma_s": np.diag(r.sigma_s)} for r in results]})


def cmd_selftest(ctx):
    from .selftest import run_checks

    results = run_checks(ctx.seed, ctx.map)
    ctx.summary("selftest.json", {"checks": {k: {"passed": ok, "detail": d} for k, (ok, d) in results.items()}})
    failed = [k for k, (ok, _) in results.items() if not ok]
    for k, (ok, d) in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {k} ({d:.3g})")
    return 1 if failed else 0


COMMANDS = {
    "motion-mc": (cmd_motion_mc, "ensemble simulation and three-model std comparison"),
    "calibrate": (cmd_calibrate, "fit the three motion models to a synthetic ensemble"),
    "filter": (cmd_filter, "particle-filter runs with every model and bound metrics"),
    "wrench-cov": (cmd_wrench_cov, "closed-form wrench covariance with Monte Carlo check"),
    "wrench-fit": (cmd_wrench_fit, "fit Sigma_S from parameter bounds"),
    "wrench-hist": (cmd_wrench_hist, "relative-error histograms of the fitted wrench model"),
    "selftest": (cmd_selftest, "fast invariant suite"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmtunc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                       help="override section.key=value (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        file_cfg = {}
        if args.config is not None:
            try:
                with open(args.config, "rb") as fh:
                    file_cfg = tomllib.load(fh)
            except (OSError, tomllib.TOMLDecodeError) as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = resolve_config(args.command, file_cfg, args.overrides)
        args.out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    ctx = Context(args.command, cfg, args.seed, args.threads, args.out)
    start = time.perf_counter()
    try:
        status = COMMANDS[args.command][0](ctx) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RmtError, ValueError) as exc:
        name = type(exc).__name__ if isinstance(exc, RmtError) else "DomainError"
        print(f"numerical failure: {name}: {exc}", file=sys.stderr)
        return 3
    finally:
        ctx.close()
    write_json(args.out / "manifest.json", {**ctx.provenance, "config": cfg, "files": sorted(ctx.files)})
    write_json(args.out / "runtime.json", {**ctx.provenance, "wall_clock_seconds": time.perf_counter() - start, "threads": args.threads})
    return status


if __name__ == "__main__":
    sys.exit(main())
