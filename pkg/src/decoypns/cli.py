"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 at least one treatment ended with an Attack verdict.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import MIN_CALIBRATION_ROUNDS, AnalysisError, calibrate_delta, estimate_efficiencies, merge_records
from .config import PRESETS, parse_config, parse_config_dict, plan_to_dict, table5_optimization_input
from .errors import ConfigError, IntegrityError, OptimizationError, RoundTimeout, TrialAborted
from .harness import (
    DESK_ROUND_TARGET,
    DESK_ROUNDS,
    FULL_ROUND_TARGET,
    FULL_ROUNDS,
    ExperimentPlan,
    _calibration_tasks,
    _collect,
    run_factorial,
)
from .optimizer import OptimizationInput, optimize_occurrences
from .reports import emit_reports, make_manifest, plotdata_from_rows, read_rounds_csv, summary_from_out_dir, utc_now

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ATTACK = 0, 1, 2, 3
log = logging.getLogger("decoypns")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _plan_args(p):
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named configuration preset")
    p.add_argument("--seed", type=int, help="master seed (64-bit unsigned)")
    p.add_argument("--rounds", type=int, help="measurement rounds per treatment")
    p.add_argument("--round-target", type=int, help="signal detections per round")
    p.add_argument("--calibration-rounds", type=int, help="attack-free calibration rounds per configuration")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true",
                       help=f"{DESK_ROUNDS} rounds x {DESK_ROUND_TARGET} detections (default)")
    scale.add_argument("--full-scale", action="store_true",
                       help=f"{FULL_ROUNDS} rounds x {FULL_ROUND_TARGET} detections")
    p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on this)")
    p.add_argument("--engine", choices=("sparse", "dense", "pulse"), help="round simulation engine")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decoypns", description="Decoy-state QKD link simulator and PNS attack detector.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cal = sub.add_parser("calibrate", help="attack-free calibration rounds: Delta, Y0 and mean gains")
    _plan_args(cal)
    cal.add_argument("--out", type=Path, help="directory for calibration.json")

    run = sub.add_parser("run", help="run the configured treatments")
    _plan_args(run)
    run.add_argument("--attack", choices=("off", "on", "both"), default="off")
    run.add_argument("--out", type=Path, required=True, help="report directory")

    fac = sub.add_parser("factorial", help="full factorial (default: the 40-cell design, attack on and off)")
    _plan_args(fac)
    fac.add_argument("--attack", choices=("off", "on", "both"), default="both")
    fac.add_argument("--out", type=Path, required=True, help="report directory")

    opt = sub.add_parser("optimize", help="occurrence optimization from measured gains")
    opt.add_argument("--q-mu", type=float)
    opt.add_argument("--q-nu", type=float)
    opt.add_argument("--y0", type=float)
    opt.add_argument("--calibration", type=Path, help="calibration.json to take gains from")
    opt.add_argument("--configuration", help="which configuration of the calibration file (default: first)")
    opt.add_argument("--preset", choices=("table5-fielded",), help="use the fielded system's reported gains")
    opt.add_argument("--n-mu", type=int, default=100_000)
    opt.add_argument("--n-nu-min", type=float, default=9.0)
    opt.add_argument("--s-y0", type=float, default=0.005)
    opt.add_argument("--reference-s-mu", type=float, default=0.75, help="signal share to compare throughput with")
    opt.add_argument("--out", type=Path, help="directory for optimization.json")

    rep = sub.add_parser("report", help="recompute summary.json and plotdata from an existing rounds.csv")
    rep.add_argument("--out", type=Path, required=True, help="report directory of a previous run")
    return parser


def load_plan(args, default_preset=None) -> ExperimentPlan:
    if args.config and args.preset:
        raise ConfigError("give --config or --preset, not both")
    if args.config:
        plan = parse_config(args.config)
    else:
        plan = parse_config_dict({"preset": args.preset or default_preset or "table4-baseline"})
    over = {}
    if args.full_scale:
        over.update(rounds_per_trial=FULL_ROUNDS, round_target=FULL_ROUND_TARGET, calibration_rounds=FULL_ROUNDS)
    elif args.desk_scale:
        over.update(rounds_per_trial=DESK_ROUNDS, round_target=DESK_ROUND_TARGET, calibration_rounds=DESK_ROUNDS)
    for arg, key in (("seed", "master_seed"), ("rounds", "rounds_per_trial"), ("round_target", "round_target"),
                     ("calibration_rounds", "calibration_rounds"), ("engine", "engine")):
        value = getattr(args, arg, None)
        if value is not None:
            over[key] = value
    if getattr(args, "attack", None):
        over["attack_modes"] = {"off": (False,), "on": (True,), "both": (False, True)}[args.attack]
    if over:
        # re-validate through the config layer so overrides get the same checks
        d = plan_to_dict(plan)
        d.update({k: list(v) if isinstance(v, tuple) else v for k, v in over.items()})
        plan = parse_config_dict(d)
    return plan


def _write_json(out: Path | None, name: str, payload: dict) -> None:
    text = json.dumps(payload, indent=2, allow_nan=False)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n", encoding="utf-8")


def cmd_calibrate(args) -> int:
    plan = load_plan(args)
    payload = {"master_seed": plan.master_seed, "round_target": plan.round_target, "configurations": {}}
    for config in plan.configurations:
        rounds = _collect(_calibration_tasks(config, plan), args.workers)
        est = [estimate_efficiencies(r) for r in rounds]
        pooled = merge_records(rounds)
        gm = config.gain_match()
        payload["configurations"][config.name] = {
            "rounds": len(rounds),
            "delta": calibrate_delta(rounds, plan.coverage) if len(rounds) >= MIN_CALIBRATION_ROUNDS else None,
            "y0": pooled.detected_vacuum / pooled.sent_vacuum,
            "q_mu": pooled.detected_signal / pooled.sent_signal,
            "q_nu": pooled.detected_decoy / pooled.sent_decoy,
            "eta_signal_mean": float(np.mean([e.eta_signal for e in est])),
            "eta_decoy_mean": float(np.mean([e.eta_decoy for e in est])),
            "gain_match": {"t": gm.t, "required": gm.required_probability, "feasible": gm.feasible},
        }
    _write_json(args.out, "calibration.json", payload)
    return EXIT_OK


def _run_plan(plan: ExperimentPlan, args) -> int:
    started = utc_now()
    total = len(plan.configurations) * (plan.calibration_rounds + len(plan.attack_modes) * plan.rounds_per_trial)
    log.info("running %d treatments, %d rounds", len(plan.treatments()), total)

    def progress(done, n):
        if done % max(1, n // 20) == 0 or done == n:
            log.info("%d/%d rounds", done, n)

    dataset = run_factorial(plan, workers=args.workers, progress=progress)
    manifest = make_manifest(plan, dataset, started)
    emit_reports(dataset, manifest, args.out, plan)
    attack = False
    for tid, stats in dataset.items():
        print(f"{tid}\t{stats.decision}\tp={stats.p_value:.3g}\tflags={sum(stats.verdict.flags)}")
        attack |= stats.decision == "Attack"
    return EXIT_ATTACK if attack else EXIT_OK


def cmd_run(args) -> int:
    return _run_plan(load_plan(args), args)


def cmd_factorial(args) -> int:
    return _run_plan(load_plan(args, default_preset="table4"), args)


def cmd_optimize(args) -> int:
    gains = {"q_mu": args.q_mu, "q_nu": args.q_nu, "y0": args.y0}
    if args.calibration:
        data = json.loads(args.calibration.read_text(encoding="utf-8"))
        cells = data.get("configurations", {})
        if not cells:
            raise ConfigError(f"{args.calibration}: no configurations")
        name = args.configuration or next(iter(cells))
        if name not in cells:
            raise ConfigError(f"{args.calibration}: no configuration named {name!r}")
        gains = {k: (gains[k] if gains[k] is not None else cells[name][k]) for k in gains}
    elif args.preset:
        base = table5_optimization_input()
        gains = {k: (gains[k] if gains[k] is not None else getattr(base, k)) for k in gains}
    missing = [k for k, v in gains.items() if v is None]
    if missing:
        raise ConfigError(f"missing gains: {', '.join(missing)} (give them, --calibration or --preset)")
    inp = OptimizationInput(n_mu=args.n_mu, n_nu_min=args.n_nu_min, s_y0=args.s_y0, **gains)
    res = optimize_occurrences(inp)
    payload = {"input": inp.__dict__, "result": res.as_dict(),
               "throughput_gain_vs_reference": res.throughput_gain(args.reference_s_mu),
               "reference_s_mu": args.reference_s_mu}
    _write_json(args.out, "optimization.json", payload)
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out
    if not (out / "rounds.csv").is_file() or not (out / "config.json").is_file():
        raise ConfigError(f"{out} does not contain rounds.csv and config.json")
    summary = summary_from_out_dir(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    box, hist = plotdata_from_rows(read_rounds_csv((out / "rounds.csv").read_text(encoding="utf-8")))
    (out / "plotdata").mkdir(exist_ok=True)
    (out / "plotdata" / "boxplot.csv").write_text(box, encoding="utf-8", newline="")
    (out / "plotdata" / "decoy_histogram.csv").write_text(hist, encoding="utf-8", newline="")
    for tid, t in summary["treatments"].items():
        print(f"{tid}\t{t['verdict']}\tp={t['p_value']}")
    return EXIT_ATTACK if summary["verdict_counts"]["Attack"] else EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "run": cmd_run, "factorial": cmd_factorial, "optimize": cmd_optimize,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrialAborted, RoundTimeout, AnalysisError, OptimizationError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
