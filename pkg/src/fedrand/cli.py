"""Command-line entry point: ``fedrand {run,compare,attack,report}``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation,
4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .artifacts import ArtifactError
from .experiment import ExperimentSpec, PRESETS, attack, compare, preset_specs, render_report, run
from .protocol import ConfigError, InvariantViolation, METHODS

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4
ABLATIONS = {"no-normalization": "no_normalization", "no-past-params": "no_past_params",
             "send-both-halves": "send_both_halves"}


def _seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment spec; flags below override its values")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--n-shared", type=int, help="FedPer: number of top layers shared")
    p.add_argument("--rho", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--participants", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--dirichlet", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ablation", action="append", choices=sorted(ABLATIONS), default=[])
    p.add_argument("--out")


def resolve_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.config) if args.config else ExperimentSpec()
    fed = {}
    for flag, key in (("method", "method"), ("n_shared", "n_shared"), ("rho", "rho"), ("rounds", "rounds"),
                      ("clients", "num_clients"), ("participants", "participants"), ("seed", "seed"),
                      ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            fed[key] = value
    for name in args.ablation:
        fed[ABLATIONS[name]] = True
    try:
        spec = replace(spec, federation=replace(spec.federation, **fed))
        if args.rank is not None:
            spec = replace(spec, model=replace(spec.model, rank=args.rank))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.dirichlet is not None:
        spec = replace(spec, data=replace(spec.data, dirichlet=args.dirichlet))
    if args.seeds:
        spec = replace(spec, seeds=args.seeds)
    if args.out is not None:
        spec = replace(spec, out=args.out)
    return spec.validate()


def cmd_run(args) -> int:
    spec = resolve_spec(args)
    report = run(spec)
    print(report.render(), end="")
    if spec.out:
        print(f"\nartifacts written to {spec.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    spec = resolve_spec(args)
    specs = preset_specs(spec, args.preset)
    seeds = spec.seeds if args.seeds else (spec.federation.seed,)
    comp = compare(specs, seeds, out_dir=spec.out)
    print(comp.render(), end="")
    return EXIT_OK


def cmd_attack(args) -> int:
    rep = attack(args.run_dir)
    print(rep.render(), end="")
    out = Path(args.run_dir) / "attack_report.json"
    out.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.run_dir) / "report.json"
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path} (run incomplete?)")
    summary = json.loads(path.read_text(encoding="utf-8"))
    if not summary.get("complete"):
        raise ArtifactError(f"{path} is not marked complete")
    print(render_report(summary), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrand", description="FedRand federated LoRA simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run a preset of methods over several seeds")
    _add_spec_flags(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="methods")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("attack", help="membership inference from a run directory's logs")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="print the report of a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ArtifactError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
