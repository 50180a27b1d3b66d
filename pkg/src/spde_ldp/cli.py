"""
Batch front-end.

Usage::

    spde-ldp SUBCOMMAND [--config FILE.toml] [--seed N] [--threads N] [--out DIR]
             [--set section.key=value ...]

Every run writes ``manifest.jsonl`` (a start record before any computation
and a finish record after) and ``results.csv``. Exit status is 0 on success,
1 for invalid input and 2 for numerical failure (blow-up, too many excluded
samples, or a minimisation that did not converge).
"""
import argparse
import copy
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .errors import (BlowUpError, DomainError, HypothesisViolation, SampleExclusionError,
                     UnsupportedDegeneracy, ValidationError)
from .grid_noise import Control, GridSpec, load_field, sample_sheet, save_field
from .kernel import (G_images, G_spectral, KernelConfig, check_kernel_bounds,
                     semigroup_identity_error)
from .models import preset
from .rare_event import (EventSpec, MCEstimate, a1_experiment, a2_experiment,
                         estimate_probability, gaussian_projection_oracle, ldp_curve, loglog_slope)
from .rate import RateResult, TargetSpec, evaluate_rate_direct, minimize_rate
from .solver import SolveConfig, Trajectory, solve, solve_skeleton

SUBCOMMANDS = ("kernel-check", "simulate", "skeleton", "rate-eval", "rate-min", "mc", "ldp", "a1", "a2")

# every accepted key with its default; None means "unset"
DEFAULTS = {
    "model": {"preset": "linear_heat", "a": 1.0, "s0": 1.0, "s1": 0.5, "noise": "additive"},
    "grid": {"nx": 63, "nt": 200, "T": 1.0},
    "solve": {"epsilon": 0.0, "truncation_level": None, "max_sup_l2": 1e6},
    "initial": {"profile": "zero", "amplitude": 1.0, "values": None},
    "control": {"profile": "zero", "amplitude": 1.0, "path": None},
    "event": {"kind": "terminal_projection_geq", "level": 0.3, "profile": "sqrt2_sin"},
    "target": {"kind": "terminal_projection", "level": 1.0, "profile": "sqrt2_sin",
               "penalty_weight": 10.0, "tolerance": 1e-4, "max_iter": 500},
    "rate": {"trajectory": None, "profile": "t_sin"},
    "mc": {"epsilon": 0.5, "n": 10000, "method": "plain"},
    "ldp": {"epsilons": [0.05, 0.02, 0.01], "n": 10000, "tilt_policy": "auto", "auto_threshold": 0.1},
    "a1": {"n_list": [4, 8, 16, 32, 64], "amplitude": 1.0},
    "a2": {"epsilons": [0.1, 0.05, 0.02, 0.01], "n_seeds": 20},
    "kernel": {"t_switch": 0.05, "tol": 1e-14, "n_time": 16, "n_space": 16, "alpha": 0.2,
               "dim": 1.0, "gamma": 2.0, "cross_tol": 1e-10, "ck_tol": 1e-8, "ck_nx": 256},
    "run": {"seed": 0, "threads": 1},
}

HEADERS = {
    "kernel-check": ("estimate_id", "fitted_K", "fitted_exponent", "max_ratio", "pass"),
    "simulate": ("t", "x", "value"),
    "skeleton": ("t", "x", "value"),
    "rate-eval": RateResult.CSV_HEADER,
    "rate-min": RateResult.CSV_HEADER,
    "mc": MCEstimate.CSV_HEADER + ("oracle_p",),
    "a1": ("n", "distance"),
    "a2": ("epsilon", "mean_distance", "std_distance", "n_seeds", "loglog_slope"),
}


class NumericalFailure(RuntimeError):
    pass


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _merge(base, updates, origin):
    for section, values in updates.items():
        if section not in DEFAULTS or not isinstance(values, dict):
            raise ValidationError(f"{origin}: unknown section {section!r}")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ValidationError(f"{origin}: unknown key {section}.{key}")
            base[section][key] = _coerce(section, key, value)
    return base


def _coerce(section, key, value):
    default = DEFAULTS[section][key]
    if default is None or value is None:
        return value
    if isinstance(default, bool) or isinstance(default, str):
        if not isinstance(value, type(default)):
            raise ValidationError(f"{section}.{key} must be {type(default).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{section}.{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValidationError(f"{section}.{key} must be a list")
        return value
    return value


def load_config(path=None, overrides=()):
    """Defaults, then the TOML file, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from None
        _merge(cfg, data, str(path))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        _merge(cfg, {section: {key: _parse_value(text.strip())}}, "--set")
    return cfg


def _field(name, amplitude, grid):
    x = grid.x
    shapes = {
        "zero": np.zeros_like(x),
        "sin": np.sin(np.pi * x),
        "sqrt2_sin": np.sqrt(2.0) * np.sin(np.pi * x),
        "sin2": np.sin(2 * np.pi * x),
        "bump": np.exp(-50.0 * (x - 0.5) ** 2) * x * (1 - x) * 4,
    }
    if name not in shapes:
        raise ValidationError(f"unknown profile {name!r}; choose from {sorted(shapes)}")
    return amplitude * shapes[name]


def _build(cfg):
    m = cfg["model"]
    kw = {}
    if m["preset"] == "reaction_diffusion":
        kw = {"a": m["a"], "s0": m["s0"], "s1": m["s1"]}
    elif m["preset"] == "burgers":
        kw = {"noise": m["noise"], "s0": m["s0"], "s1": m["s1"]}
    coeffs = preset(m["preset"], **kw)
    grid = GridSpec(cfg["grid"]["nx"], cfg["grid"]["nt"], cfg["grid"]["T"])
    ini = cfg["initial"]
    if ini["values"] is not None:
        eta = np.asarray(ini["values"], dtype=float)
        if eta.shape != (grid.nx,):
            raise ValidationError(f"initial.values has {eta.size} entries, grid has nx={grid.nx}")
    else:
        eta = _field(ini["profile"], ini["amplitude"], grid)
    return coeffs, grid, eta


def _control(cfg, grid):
    c = cfg["control"]
    if c["path"] is not None:
        g, values, _ = load_field(c["path"])
        if g != grid:
            raise ValidationError("control file grid does not match [grid]")
        return Control(grid, values)
    base = _field(c["profile"], c["amplitude"], grid)
    return Control(grid, np.broadcast_to(base, grid.cell_shape))


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    path.write_text(buf.getvalue())


def _num(x):
    return repr(float(x))


def _run_kernel_check(cfg, grid, coeffs, eta, out, seed, threads):
    k = cfg["kernel"]
    kcfg = KernelConfig(t_switch=k["t_switch"], tol=k["tol"], T=grid.T)
    report = check_kernel_bounds(kcfg, k["n_time"], k["n_space"], k["alpha"], k["dim"], k["gamma"])
    t = np.geomspace(1e-4, grid.T, 32)[:, None, None]
    x = np.linspace(0, 1, 32)
    cross = float(np.max(np.abs(G_spectral(t, x[None, :, None], x[None, None, :])
                                - G_images(t, x[None, :, None], x[None, None, :]))))
    ck = max(semigroup_identity_error(s, u, k["ck_nx"], kcfg)
             for s, u in ((0.05, 0.05), (0.1, 0.1), (0.5, 0.5)))
    text = report.to_csv()
    text += f"cross_form,{_num(k['cross_tol'])},,{_num(cross)},{str(cross < k['cross_tol']).lower()}\n"
    text += f"chapman_kolmogorov,{_num(k['ck_tol'])},,{_num(ck)},{str(ck < k['ck_tol']).lower()}\n"
    (out / "results.csv").write_text(text)
    ok = report.passed and cross < k["cross_tol"] and ck < k["ck_tol"]
    return {"pass": ok}, (0 if ok else 2)


def _run_simulate(cfg, grid, coeffs, eta, out, seed, threads):
    s = cfg["solve"]
    scfg = SolveConfig(s["epsilon"], s["truncation_level"], s["max_sup_l2"])
    sheet = sample_sheet(grid, seed) if scfg.epsilon > 0 else None
    v = _control(cfg, grid) if cfg["control"]["profile"] != "zero" or cfg["control"]["path"] else None
    traj = solve(eta, coeffs, grid, scfg, v, sheet)
    (out / "results.csv").write_text(traj.to_csv())
    return {"sup_l2": traj.sup_l2, "sha256": traj.content_hash()}, 0


def _run_skeleton(cfg, grid, coeffs, eta, out, seed, threads):
    traj = solve_skeleton(eta, coeffs, grid, _control(cfg, grid), cfg["solve"]["max_sup_l2"])
    (out / "results.csv").write_text(traj.to_csv())
    return {"sup_l2": traj.sup_l2, "sha256": traj.content_hash()}, 0


def _run_rate_eval(cfg, grid, coeffs, eta, out, seed, threads):
    r = cfg["rate"]
    if r["trajectory"] is not None:
        h = Trajectory.from_csv(Path(r["trajectory"]).read_text(), T=grid.T)
        if h.grid != grid:
            raise ValidationError("trajectory grid does not match [grid]")
    elif r["profile"] == "t_sin":
        h = Trajectory.from_values(grid, np.outer(grid.t, np.sin(np.pi * grid.x)))
    else:
        raise ValidationError(f"unknown rate.profile {r['profile']!r}")
    res = evaluate_rate_direct(h.values[0], coeffs, h, grid)
    (out / "results.csv").write_text(res.to_csv())
    save_field(out / "control.csv", grid, res.control.values)
    return {"value": res.value}, 0


def _target(cfg, grid):
    t = cfg["target"]
    return TargetSpec(t["kind"], _field(t["profile"], 1.0, grid), t["level"],
                      t["penalty_weight"], t["tolerance"])


def _run_rate_min(cfg, grid, coeffs, eta, out, seed, threads):
    res = minimize_rate(eta, coeffs, grid, _target(cfg, grid), max_iter=cfg["target"]["max_iter"])
    (out / "results.csv").write_text(res.to_csv())
    save_field(out / "control.csv", grid, res.control.values)
    return {"value": res.value, "converged": res.converged}, (0 if res.converged else 2)


def _event(cfg, grid):
    e = cfg["event"]
    prof = _field(e["profile"], 1.0, grid) if e["kind"] == "terminal_projection_geq" else None
    return EventSpec(e["kind"], e["level"], prof)


def _run_mc(cfg, grid, coeffs, eta, out, seed, threads):
    m = cfg["mc"]
    ev = _event(cfg, grid)
    tilt = None
    if m["method"] == "tilted":
        if ev.kind != "terminal_projection_geq":
            raise ValidationError("tilted mc needs a terminal_projection_geq event")
        best = minimize_rate(eta, coeffs, grid, TargetSpec("terminal_projection", ev.profile, ev.level))
        tilt = best.control
    elif m["method"] != "plain":
        raise ValidationError("mc.method must be plain or tilted")
    s = cfg["solve"]
    est = estimate_probability(ev, eta, coeffs, grid, m["epsilon"], m["n"], seed, tilt,
                               s["truncation_level"], s["max_sup_l2"], threads=threads)
    oracle = ""
    if ev.kind == "terminal_projection_geq" and coeffs.name == "linear_heat":
        oracle = _num(gaussian_projection_oracle(eta, ev.profile, grid, m["epsilon"], ev.level)[0])
    _write_csv(out / "results.csv", HEADERS["mc"], [est.csv_row() + [oracle]])
    return {"p_hat": est.p_hat, "n_excluded": est.n_excluded}, 0


def _run_ldp(cfg, grid, coeffs, eta, out, seed, threads):
    l = cfg["ldp"]
    rep = ldp_curve(_event(cfg, grid), eta, coeffs, grid, l["epsilons"], l["n"], seed,
                    l["tilt_policy"], auto_threshold=l["auto_threshold"], threads=threads)
    (out / "results.csv").write_text(rep.to_csv())
    return {"reference_rate": rep.reference_rate}, 0


def _run_a1(cfg, grid, coeffs, eta, out, seed, threads):
    a = cfg["a1"]
    rows = a1_experiment(eta, coeffs, grid, _control(cfg, grid), a["n_list"], a["amplitude"])
    _write_csv(out / "results.csv", HEADERS["a1"], [[r["n"], _num(r["distance"])] for r in rows])
    return {}, 0


def _run_a2(cfg, grid, coeffs, eta, out, seed, threads):
    a = cfg["a2"]
    seeds = [seed + k for k in range(a["n_seeds"])]
    rows = a2_experiment(eta, coeffs, grid, _control(cfg, grid), a["epsilons"], seeds)
    slope = loglog_slope(rows) if len(rows) > 1 else math.nan
    _write_csv(out / "results.csv", HEADERS["a2"],
               [[_num(r["epsilon"]), _num(r["mean_distance"]), _num(r["std_distance"]), r["n_seeds"],
                 _num(slope)] for r in rows])
    return {"loglog_slope": slope}, 0


RUNNERS = {
    "kernel-check": _run_kernel_check,
    "simulate": _run_simulate,
    "skeleton": _run_skeleton,
    "rate-eval": _run_rate_eval,
    "rate-min": _run_rate_min,
    "mc": _run_mc,
    "ldp": _run_ldp,
    "a1": _run_a1,
    "a2": _run_a2,
}


def _parser():
    p = argparse.ArgumentParser(prog="spde-ldp", description="Small-noise SPDE laboratory.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="TOML file with dotted sections")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--threads", type=int, help="worker cap for Monte Carlo")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--epsilon", type=float, help="shortcut for solve.epsilon / mc.epsilon")
    p.add_argument("-n", "--samples", type=int, help="shortcut for mc.n / ldp.n")
    return p


def _manifest(path, record):
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def run(argv=None):
    """Entry point returning the exit status."""
    args = _parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if args.epsilon is not None:
        key = "mc.epsilon" if args.subcommand == "mc" else "solve.epsilon"
        overrides.append(f"{key}={args.epsilon!r}")
    if args.samples is not None:
        key = "ldp.n" if args.subcommand == "ldp" else "mc.n"
        overrides.append(f"{key}={args.samples}")
    try:
        cfg = load_config(args.config, overrides)
    except (ValidationError, OSError) as exc:
        print(f"spde-ldp: invalid configuration: {exc}", file=sys.stderr)
        return 1

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    seed = cfg["run"]["seed"]
    _manifest(manifest, {
        "record": "start",
        "subcommand": args.subcommand,
        "config": cfg,
        "config_sha256": _config_hash(cfg),
        "seed": seed,
        "grid": cfg["grid"],
        "preset": cfg["model"]["preset"],
        "build": _git_describe(),
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })
    status = 0
    info = {}
    try:
        coeffs, grid, eta = _build(cfg)
        info, status = RUNNERS[args.subcommand](cfg, grid, coeffs, eta, out, seed,
                                                max(1, cfg["run"]["threads"]))
    except (ValidationError, DomainError, UnsupportedDegeneracy, HypothesisViolation) as exc:
        print(f"spde-ldp: validation error: {exc}", file=sys.stderr)
        status, info = 1, {"error": str(exc)}
    except (BlowUpError, SampleExclusionError, NumericalFailure, FloatingPointError) as exc:
        print(f"spde-ldp: numerical failure: {exc}", file=sys.stderr)
        status, info = 2, {"error": str(exc)}
    if status == 2 and "error" not in info:
        print(f"spde-ldp: numerical failure in {args.subcommand}: {info}", file=sys.stderr)
    results = out / "results.csv"
    info = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in info.items()}
    _manifest(manifest, {
        "record": "finish",
        "exit_code": status,
        "info": info,
        "results_sha256": hashlib.sha256(results.read_bytes()).hexdigest() if results.exists() else None,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
