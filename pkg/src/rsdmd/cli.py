"""Command line entry point ``rsdmd``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
Errors go to stderr as one JSON object ``{"error": <code>, "message": ...}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import config_to_json, parse_config, resolve_config
from .dictionary import TrainableDictionary, derivative_check
from .exceptions import ConfigError, RsdmdError
from .experiment import reexport, run_experiment
from .neural import gradient_check
from .regret import RegretExperiment, run_regret_experiment, validate_assumption_gap
from .systems import SYSTEM_NAMES, builtin_system, simulate_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_ARCHITECTURES = (([3, 8, 2], "tanh"), ([4, 16, 16, 3], "tanh"), ([5, 12, 12, 4], "relu"))
GRADCHECK_DICTIONARIES = ((16,), (16, 16), (8, 8, 8))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _floats(text) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma separated numbers, got {text!r}") from None


def _read_arms(text) -> list[float]:
    path = Path(text)
    if path.is_file():
        with open(path, newline="") as fh:
            values = [v for row in csv.reader(fh) for v in row if v.strip()]
        try:
            return [float(v) for v in values]
        except ValueError:
            # allow a header row
            return [float(v) for v in values[1:]]
    return _floats(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsdmd", description="Reinforced sampling for stochastic Koopman estimation")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train an agent against the SDMD environment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--resume", help="checkpoint directory or run directory")
    run.add_argument("--output", help="run directory (overrides run.output_dir)")

    reg = sub.add_parser("regret", help="epsilon-greedy regret under bounded estimator noise")
    reg.add_argument("--arms", required=True, help="comma separated means or a CSV file")
    reg.add_argument("--eps", type=float, required=True, help="estimator noise bound")
    reg.add_argument("--horizon", type=int, default=100_000)
    reg.add_argument("--seed", type=int, default=0)
    reg.add_argument("--c", type=float, help="schedule constant (default: number of arms)")
    reg.add_argument("--output", default="regret_out")

    exp = sub.add_parser("export", help="re-export artifacts from a checkpoint")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--what", choices=["eigvals", "eigfuns", "rewardmap"], action="append")
    exp.add_argument("--output")

    sim = sub.add_parser("simulate", help="dump one Euler-Maruyama trajectory as CSV")
    sim.add_argument("--system", required=True, choices=SYSTEM_NAMES)
    sim.add_argument("--x0", required=True, help="comma separated starting point")
    sim.add_argument("--steps", type=int, required=True)
    sim.add_argument("--dt", type=float, default=0.01)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--params", default="{}", help="JSON object of system parameters")
    sim.add_argument("--output", help="CSV path (default: stdout)")

    gc = sub.add_parser("gradcheck", help="finite-difference check of network and dictionary derivatives")
    gc.add_argument("--seeds", type=int, default=10)
    gc.add_argument("--tolerance", type=float, default=1e-4)

    val = sub.add_parser("validate-config", help="schema check only")
    val.add_argument("config")
    val.add_argument("--resolved", action="store_true", help="print the resolved config")
    return p


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"seed": args.seed})})
    out = run_experiment(cfg, run_dir=args.output, resume=args.resume)
    print(out)
    return EXIT_OK


def _cmd_regret(args) -> int:
    arms = _read_arms(args.arms)
    try:
        spec = RegretExperiment(tuple(arms), args.eps, args.horizon, args.c)
    except RsdmdError as exc:
        raise ConfigError(str(exc)) from None
    result = run_regret_experiment(spec, args.seed, args.output)
    holds, _ = validate_assumption_gap(arms, args.eps)
    print(json.dumps({"output": str(args.output), "assumption_holds": holds,
                      "final_regret": result.summary["final_regret"],
                      "last_half_slope": result.summary["last_half_linear_fit"]["slope"]}))
    return EXIT_OK


def _cmd_export(args) -> int:
    what = tuple(args.what or ("eigvals", "eigfuns", "rewardmap"))
    print(reexport(args.checkpoint, what, args.output))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    try:
        params = json.loads(args.params)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from None
    system = builtin_system(args.system, params)
    x0 = _floats(args.x0)
    if len(x0) != system.dim:
        raise ConfigError(f"--x0 needs {system.dim} values for {args.system}")
    data = simulate_trajectory(system, np.array(x0), args.steps, args.dt, args.seed)
    path = np.vstack([data.x, data.y[-1:]])
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(["step", "t"] + [f"x{j}" for j in range(system.dim)])
        for i, row in enumerate(path):
            writer.writerow([i, repr(i * args.dt)] + [repr(float(v)) for v in row])
    finally:
        if args.output:
            fh.close()
    return EXIT_OK


def gradcheck_report(seeds=10, tolerance=1e-4) -> dict:
    networks = []
    for sizes, act in GRADCHECK_ARCHITECTURES:
        err = max(gradient_check(sizes, act, seed=s) for s in range(seeds))
        networks.append({"layer_sizes": sizes, "activation": act, "max_rel_error": err})
    dictionaries = []
    for hidden in GRADCHECK_DICTIONARIES:
        worst = 0.0
        for s in range(seeds):
            d = TrainableDictionary(hidden=hidden, n_outputs=8, seed=s).fit(np.zeros((1, 2)))
            point = np.random.default_rng(s).normal(size=2)
            worst = max(worst, derivative_check(d, point, tolerance)["max_rel_error"])
        dictionaries.append({"hidden": list(hidden), "max_rel_error": worst})
    worst = max(r["max_rel_error"] for r in networks + dictionaries)
    return {"networks": networks, "dictionaries": dictionaries, "max_rel_error": worst,
            "tolerance": tolerance, "passed": worst < tolerance}


def _cmd_gradcheck(args) -> int:
    report = gradcheck_report(args.seeds, args.tolerance)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def _cmd_validate(args) -> int:
    cfg = resolve_config(args.config)
    print(config_to_json(cfg) if args.resolved else "ok")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "regret": _cmd_regret, "export": _cmd_export, "simulate": _cmd_simulate,
            "gradcheck": _cmd_gradcheck, "validate-config": _cmd_validate}


def _report(code, message):
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _report(exc.code, str(exc))
        return EXIT_CONFIG
    except RsdmdError as exc:
        _report(exc.code, str(exc))
        return EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError) as exc:
        _report("runtime_error", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


def main() -> None:  # pragma: no cover - console script
    sys.exit(cli_main())
