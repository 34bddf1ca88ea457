"""Command-line front end.

Every subcommand reads one JSON config document (see RunConfig); a handful
of flags override the config in place. Exit codes: 0 success, 2 validation,
3 synthesis infeasible, 4 simulation divergence, 5 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .grid_model import CaseError, PowerFlowError
from .pipeline import (
    EXIT_DIVERGENCE,
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_SOLVER,
    EXIT_VALIDATION,
    ConfigError,
    RunConfig,
    run_compare,
    run_pipeline,
    report_summary,
    stage_linearize,
    stage_synthesize,
    write_controller_artifacts,
    write_model_artifacts,
)
from .synthesis import InitInfeasibleError, SynthesisError


def _load_config(args) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    else:
        doc = {}
    if getattr(args, "case", None):
        doc["case"] = args.case
    if getattr(args, "wind", None) is not None:
        doc["wind_fraction"] = args.wind
    synth = doc.setdefault("synthesis", {})
    for key in ("mode", "rho", "u_max", "gamma", "tol", "max_iter", "pattern"):
        val = getattr(args, key, None)
        if val is not None:
            synth[key] = val
    sim = doc.setdefault("simulation", {})
    for src, dst in (("t_span", "t_span"), ("dt", "dt"),
                     ("realizations", "n_realizations"), ("seed", "master_seed")):
        val = getattr(args, src, None)
        if val is not None:
            sim[dst] = val
    if getattr(args, "out", None):
        doc["output_dir"] = args.out
    return RunConfig.from_dict(doc)


def _add_common(sp):
    sp.add_argument("--config", help="JSON config document (RunConfig schema)")
    sp.add_argument("--case", help="bundled case name (case9, case39) or a case file path")
    sp.add_argument("--wind", type=float,
                    help="renewable fraction of each bus load (e.g. 0.2)")
    sp.add_argument("--out", help="output directory for artifacts")


def _add_synth_flags(sp):
    sp.add_argument("--mode", choices=("centralized", "input_constrained",
                                       "decentralized", "hinf"))
    sp.add_argument("--rho", type=float, help="worst-case disturbance amplitude (pu); "
                    "omit to derive it from the disturbance model")
    sp.add_argument("--u-max", dest="u_max", type=float, help="input budget (pu)")
    sp.add_argument("--gamma", type=float, help="proximal regularization weight")
    sp.add_argument("--tol", type=float, help="SCA stopping tolerance")
    sp.add_argument("--max-iter", dest="max_iter", type=int, help="SCA iteration cap")
    sp.add_argument("--pattern", help="'block_diagonal' or a JSON boolean-matrix file")


def _add_sim_flags(sp):
    sp.add_argument("--t-span", dest="t_span", type=float, help="horizon in seconds")
    sp.add_argument("--dt", type=float, help="integration step in seconds")
    sp.add_argument("--realizations", type=int, help="number of disturbance realizations")
    sp.add_argument("--seed", type=int, help="master random seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gridlinf",
        description="Worst-case-disturbance state-feedback synthesis for "
                    "multi-machine power networks, validated on the nonlinear "
                    "network DAEs.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("linearize", help="solve the operating point and emit "
                        "the small-signal model")
    _add_common(sp)

    sp = sub.add_parser("synth", help="synthesize a controller and verify its "
                        "certificate")
    _add_common(sp)
    _add_synth_flags(sp)

    sp = sub.add_parser("simulate", help="run the full pipeline with a single "
                        "disturbance realization")
    _add_common(sp)
    _add_synth_flags(sp)
    _add_sim_flags(sp)

    sp = sub.add_parser("sweep", help="run the full pipeline with a Monte-Carlo "
                        "disturbance sweep")
    _add_common(sp)
    _add_synth_flags(sp)
    _add_sim_flags(sp)

    sp = sub.add_parser("compare", help="compare peak-gain feedback against AGC "
                        "and the energy-gain baseline")
    _add_common(sp)
    _add_synth_flags(sp)
    _add_sim_flags(sp)

    sp = sub.add_parser("report", help="print the summaries found in an output "
                        "directory")
    sp.add_argument("--out", required=True, help="output directory to summarize")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(report_summary(args.out))
            return EXIT_OK
        cfg = _load_config(args)
    except (ConfigError, CaseError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if args.command == "linearize":
            case, op, model = stage_linearize(cfg)
            outdir = Path(cfg.output_dir)
            outdir.mkdir(parents=True, exist_ok=True)
            write_model_artifacts(outdir, case, op, model)
            print((outdir / "model_report.txt").read_text())
            return EXIT_OK

        if args.command == "synth":
            case, op, model = stage_linearize(cfg)
            outdir = Path(cfg.output_dir)
            outdir.mkdir(parents=True, exist_ok=True)
            write_model_artifacts(outdir, case, op, model)
            ctrl, prob, report = stage_synthesize(cfg, case, model)
            write_controller_artifacts(outdir, cfg.mode, ctrl, prob, report)
            mu = "n/a" if cfg.mode == "hinf" else f"{ctrl.mu:.6f}"
            print(f"{cfg.mode}: mu={mu} certified={report.get('certified', 'n/a')} "
                  f"-> {outdir}")
            return EXIT_OK

        if args.command in ("simulate", "sweep"):
            if args.command == "sweep" and cfg.n_realizations == 1:
                cfg.n_realizations = 50
            summary = run_pipeline(cfg)
            print(json.dumps(summary, indent=1, sort_keys=True))
            if summary.get("diverged"):
                return EXIT_DIVERGENCE
            return EXIT_OK

        if args.command == "compare":
            doc = run_compare(cfg)
            print(json.dumps(doc, indent=1, sort_keys=True))
            return EXIT_OK
    except (CaseError, PowerFlowError, ConfigError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InitInfeasibleError as exc:
        print(f"synthesis infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SynthesisError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
