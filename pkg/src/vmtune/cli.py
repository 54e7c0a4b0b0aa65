"""Command-line entry point.

    vmtune simulate  --system cart --scenario 12 --theta 237.68,50 --out run/
    vmtune tune      --preset cart --mode sampled --n-scenarios 400 --out run/
    vmtune landscape --preset cart --mode sampled --out run/
    vmtune oracle    --k 237.68 --b 50 [--sweep]
    vmtune preset dump rcm

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import ltioracle, optimize, sim
from .closedloop import system_from_dict, system_to_dict
from .experiments import CART_WW, CART_WY, PRESETS, build_preset
from .mechlib import ContractError
from .scenarios import Scenario, ScenarioSet, grid_scenarios

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# helpers ------------------------------------------------------------------------

def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("VMTUNE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"VMTUNE_SEED must be an integer, got {env!r}") from None


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None


def _floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


class _Run:
    """Output directory plus the manifest every written file is listed in."""

    def __init__(self, args, command: str, config: dict, seed: int | None, dt=None, T=None):
        self.dir = Path(args.out) if getattr(args, "out", None) else None
        self.manifest = {
            "schema": 1,
            "command": command,
            "argv": sys.argv[1:],
            "config_hash": _config_hash(config),
            "seed": seed,
            "dt": dt,
            "T": T,
            "version": _version(),
            "started": _now(),
            "outputs": [],
        }
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str):
        if self.dir is None:
            return
        with open(self.dir / name, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.manifest["outputs"].append(name)

    def close(self, **extra):
        if self.dir is None:
            return
        self.manifest.update(extra, finished=_now())
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_system(spec: str):
    """A preset name or a system JSON file; returns (system, theta0, scenarios, dt)."""
    if spec in PRESETS:
        p = build_preset(spec)
        return p.system, p.theta0, p.scenarios, p.dt
    doc = _read_json(spec)
    try:
        sys_ = system_from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{spec}: not a valid system description ({e})") from None
    theta0 = np.asarray(doc.get("theta0", np.zeros(len(sys_.params))), dtype=float)
    scen = ScenarioSet.from_dict(doc["scenarios"]) if "scenarios" in doc else None
    return sys_, theta0, scen, float(doc.get("dt", 1e-3))


def _scenario(spec: str | None, default: ScenarioSet | None, dim: int) -> Scenario:
    if spec is None or spec == "zero":
        return Scenario.zero(dim)
    if spec.isdigit():
        if default is None:
            raise ConfigError("a scenario index needs a preset or a system file with scenarios")
        i = int(spec)
        if not 1 <= i <= len(default):
            raise ConfigError(f"scenario index must be in 1..{len(default)}, got {i}")
        return default[i - 1]
    doc = _read_json(spec)
    try:
        return Scenario.from_dict(doc["scenarios"][0] if "scenarios" in doc else doc)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ConfigError(f"{spec}: not a valid scenario ({e})") from None


def _jobs(args) -> int:
    return args.jobs if args.jobs else (os.cpu_count() or 1)


# commands ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    system, theta0, scen_set, dt = _load_system(args.system)
    theta = _floats(args.theta, "--theta") if args.theta else theta0
    if theta.shape != (len(system.params),):
        raise ConfigError(f"--theta needs {len(system.params)} values ({', '.join(system.params.names)})")
    scenario = _scenario(args.scenario, scen_set, system.w_dim)
    if scenario.dim != system.w_dim:
        raise ConfigError(f"scenario has dimension {scenario.dim}, the system expects {system.w_dim}")
    cfg = sim.SimConfig(dt=args.dt or dt, T=args.T, record_every=args.record_every)
    run = _Run(args, "simulate", {"system": system_to_dict(system), "scenario": scenario.to_dict(),
                                  "theta": theta.tolist(), "dt": cfg.dt, "T": cfg.T}, None, cfg.dt, cfg.horizon(scenario))
    res = sim.simulate(system, theta, scenario, cfg)
    out = {"schema": 1, "manifest": "manifest.json", "scenario": scenario.label, "T": res.T, "dt": res.dt,
           "loss_L2": res.loss_L2(system.eps), "loss_Linf": res.loss_Linf(system.eps),
           "loss": res.loss(system.eps), "costs": [float(c) for c in res.costs]}
    run.write("trajectory.csv", sim.trajectory_csv(system, res))
    run.write("loss.json", _dumps(out))
    run.close(T=res.T)
    print(f"{scenario.label or 'scenario'}: loss {out['loss']:.6g} (L2 {out['loss_L2']:.6g}, "
          f"Linf {out['loss_Linf']:.6g}) over {res.T:g} s")
    return EXIT_OK


def _preset_for_tuning(args, seed):
    kw = {}
    if args.preset == "cart":
        kw = {"n_scenarios": args.n_scenarios, "seed": seed}
        if args.param_map:
            kw["param_map"] = args.param_map
    elif args.n_scenarios != 400 or args.param_map:
        raise ConfigError("--n-scenarios and --param-map apply to the cart preset only")
    return build_preset(args.preset, **kw)


def _tune(args, preset, seed, log):
    cfg = sim.SimConfig(dt=args.dt or preset.dt)
    iters = preset.iters if args.iters is None else args.iters
    lr = preset.lr if args.lr is None else args.lr
    reg = preset.regularize if args.regularize is None else args.regularize
    if args.mode == "sampled":
        return optimize.tune_sampled(preset.system, preset.scenarios, preset.theta0, iters, lr, cfg, reg,
                                     args.aggregate, args.temperature, _jobs(args), log), cfg
    W0 = grid_scenarios(args.initial_scenarios, seed, dim=preset.system.w_dim)
    outer = 20 if args.iters is None else args.iters
    return optimize.tune_adversarial(preset.system, W0, preset.theta0, args.rounds, args.inner_iters, outer, lr,
                                     args.inner_lr, cfg, reg, args.aggregate, args.temperature, args.tol, seed,
                                     jobs=_jobs(args), log=log), cfg


def _summary(res: optimize.TuneResult) -> str:
    vals = "  ".join(f"{k} = {float(v):.6g}" for k, v in res.theta_hat_star.items())
    return f"{res.mode:12s} | {len(res.scenarios):4d} scenarios | cost {res.best_cost:.6f} | {vals}"


def cmd_tune(args) -> int:
    seed = _seed(args)
    preset = _preset_for_tuning(args, seed)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    config = {"preset": args.preset, "mode": args.mode, "seed": seed, "args": {k: v for k, v in vars(args).items()
                                                                               if k not in ("func", "out", "verbose", "jobs")}}
    run = _Run(args, "tune", config, seed, args.dt or preset.dt)
    res, cfg = _tune(args, preset, seed, log)
    d = res.to_dict(theta_history=args.theta_history)
    d["manifest"] = "manifest.json"
    run.write("result.json", _dumps(d))
    run.write("history.csv", res.history_csv())
    run.close(wall_clock=res.wall_clock)
    print(_summary(res))
    if args.preset == "cart":
        k, b = (float(v) for v in res.theta_hat_star.values())
        if k > 0 and b > 0:
            g = ltioracle.hinf_gain(ltioracle.cart_closed_loop(k, b, preset.notes.get("m", 1.0), CART_WW, CART_WY))[0]
            print(f"{'':12s} | true gain at the tuned controller {g:.6f}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    if args.preset != "cart":
        raise ConfigError("the landscape is defined for the two-parameter cart preset only")
    seed = _seed(args)
    preset = _preset_for_tuning(args, seed)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    run = _Run(args, "landscape", {"args": {k: v for k, v in vars(args).items() if k not in ("func", "out", "jobs")}},
               seed, args.dt or preset.dt)
    res, cfg = _tune(args, preset, seed, log)
    ks = np.linspace(args.k_range[0], args.k_range[1], args.resolution)
    bs = np.linspace(args.b_range[0], args.b_range[1], args.resolution)
    grid = optimize.cost_landscape(preset.system, list(res.scenarios), ks, bs, cfg, _jobs(args))
    run.write("landscape.csv", optimize.landscape_csv(ks, bs, grid))
    traj = ["k,b,cost"] + [",".join(repr(float(v)) for v in
                                    (*preset.system.params.apply(np.asarray(h.theta)).values(), h.cost))
                           for h in res.history]
    run.write("trajectory.csv", "\n".join(traj) + "\n")
    run.close()
    i, j = np.unravel_index(np.argmin(grid), grid.shape)
    print(f"grid minimum {grid[i, j]:.6f} at k = {ks[j]:.6g}, b = {bs[i]:.6g}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if not (args.k > 0 and args.b > 0 and args.m > 0):
        raise ConfigError("--k, --b and --m must be positive")
    run = _Run(args, "oracle", {"k": args.k, "b": args.b, "m": args.m, "sweep": args.sweep}, None)
    ss = ltioracle.cart_closed_loop(args.k, args.b, args.m, CART_WW, CART_WY)
    g, w = ltioracle.hinf_gain(ss)
    print(f"k = {args.k:g}  b = {args.b:g}  m = {args.m:g}  gain {g:.6f} at {w:.6g} rad/s")
    out = {"schema": 1, "manifest": "manifest.json", "k": args.k, "b": args.b, "m": args.m, "gain": g, "omega_peak": w}
    if args.sweep:
        k, b, gs = ltioracle.oracle_optimum(args.m, CART_WW, CART_WY)
        print(f"optimum k* = {k:.6g}  b* = {b:.6g}  gain* = {gs:.6f}")
        out["optimum"] = {"k": k, "b": b, "gain": gs}
    run.write("gain_curve.csv", ltioracle.gain_curve_csv(ss))
    run.write("oracle.json", _dumps(out))
    run.close()
    return EXIT_OK


def cmd_preset(args) -> int:
    if args.name not in PRESETS:
        raise ConfigError(f"unknown preset {args.name!r}; choose from {sorted(PRESETS)}")
    p = build_preset(args.name)
    doc = system_to_dict(p.system)
    doc["theta0"] = [float(v) for v in p.theta0]
    doc["dt"] = p.dt
    doc["scenarios"] = p.scenarios.to_dict()
    text = _dumps(doc)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# parser -------------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vmtune", description="Virtual-mechanism controller simulation and tuning.")
    ap.add_argument("--version", action="version", version=f"vmtune {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, jobs=True):
        p.add_argument("--out", help="output directory (files plus manifest.json)")
        p.add_argument("--seed", type=int, default=None, help="defaults to $VMTUNE_SEED, then 0")
        if jobs:
            p.add_argument("--jobs", type=int, default=None, help="scenario-evaluation workers (default: all CPUs)")

    p = sub.add_parser("simulate", help="simulate one scenario")
    p.add_argument("--system", required=True, help=f"preset ({', '.join(PRESETS)}) or system JSON file")
    p.add_argument("--scenario", help="1-based index into the default set, 'zero', or a JSON file")
    p.add_argument("--theta", help="comma-separated parameter vector (default: the preset's)")
    p.add_argument("--T", type=float, default=None, help="horizon in s (default: per-scenario rule)")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--record-every", type=int, default=10, help="record every n-th step")
    common(p, jobs=False)
    p.set_defaults(func=cmd_simulate)

    def tuning(p):
        p.add_argument("--preset", required=True, choices=sorted(PRESETS))
        p.add_argument("--mode", choices=("sampled", "adversarial"), default="sampled")
        p.add_argument("--n-scenarios", type=int, default=400, help="cart grid size")
        p.add_argument("--param-map", choices=("raw", "log"), default=None, help="cart parameterization")
        p.add_argument("--iters", type=int, default=None, help="outer iterations (per round when adversarial)")
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--aggregate", choices=optimize.AGGREGATES, default="max")
        p.add_argument("--temperature", type=float, default=0.1, help="softmax temperature")
        reg = p.add_mutually_exclusive_group()
        reg.add_argument("--regularize", dest="regularize", action="store_true", default=None)
        reg.add_argument("--no-regularize", dest="regularize", action="store_false")
        p.add_argument("--rounds", type=int, default=25, help="adversarial outer rounds")
        p.add_argument("--inner-iters", type=int, default=500)
        p.add_argument("--inner-lr", type=float, default=2.0)
        p.add_argument("--initial-scenarios", type=int, default=3)
        p.add_argument("--tol", type=float, default=1e-4, help="residual-improvement stop")
        p.add_argument("--verbose", "-v", action="store_true")
        common(p)

    p = sub.add_parser("tune", help="min-max tuning of a preset")
    tuning(p)
    p.add_argument("--theta-history", action="store_true", help="include theta per iteration in result.json")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("landscape", help="max-cost grid over (k, b) for the cart")
    tuning(p)
    p.add_argument("--k-range", type=float, nargs=2, default=(150.0, 350.0))
    p.add_argument("--b-range", type=float, nargs=2, default=(30.0, 70.0))
    p.add_argument("--resolution", type=int, default=21)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("oracle", help="frequency-sweep gain of the weighted cart loop")
    p.add_argument("--k", type=float, default=237.68)
    p.add_argument("--b", type=float, default=50.0)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--sweep", action="store_true", help="also search the best (k, b)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("preset", help="preset utilities")
    psub = p.add_subparsers(dest="action", required=True)
    d = psub.add_parser("dump", help="print the full system JSON of a preset")
    d.add_argument("name")
    d.add_argument("--out")
    d.set_defaults(func=cmd_preset)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"vmtune: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    # numeric failures first: the unstable-loop error is also a ValueError
    except (ArithmeticError, ltioracle.UnstableSystemError) as e:
        print(f"vmtune: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ValueError) as e:
        print(f"vmtune: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
