"""Command line entry point: ``betacoal <command> [experiments...] [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (
    EXPERIMENTS,
    GROUPS,
    ExperimentConfig,
    ExperimentError,
    UnknownExperimentError,
    run_experiment,
)

# flag name -> config key
_FLAGS = {
    "alpha": "alpha",
    "theta": "theta",
    "n": "n",
    "eps": "epsilon",
    "replicates": "replicates",
    "seed": "seed",
    "out": "out",
    "horizons": "horizons",
    "workers": "workers",
    "wrapped": "wrapped",
}


def _tolerance(text: str) -> tuple[str, float]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("tolerance must look like KEY=VALUE, e.g. rel=0.2")
    return key.strip(), float(value)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--eps", type=float, help="small-jump truncation level")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int, help="required, here or in the config file")
    p.add_argument("--out", help="write <out>/<experiment>/{config,report}.json and CSVs")
    p.add_argument("--horizons", type=float, nargs="+")
    p.add_argument("--tolerance", type=_tolerance, action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--workers", type=int)
    p.add_argument("--wrapped", action="store_const", const=True, help="pooled spectrum CSV as M_k + M_(n-k)")
    p.add_argument("--config", type=Path, help="JSON file with the same keys; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="betacoal", description="Beta-coalescent simulation and checks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="show the registered experiments")
    for group in GROUPS:
        names = [e.name for e in EXPERIMENTS.values() if e.group == group]
        p = sub.add_parser(group, help=f"run {', '.join(names)}")
        p.add_argument("experiments", nargs="*", metavar="EXPERIMENT", help=f"subset of: {', '.join(names)}")
        _common(p)
    p = sub.add_parser("verify-all", help="run every experiment at its default settings")
    _common(p)
    return parser


def _settings(args: argparse.Namespace) -> dict:
    base: dict = {}
    if args.config is not None:
        base = json.loads(args.config.read_text())
        if "eps" in base:
            base["epsilon"] = base.pop("eps")
        base.pop("experiment", None)
    for flag, key in _FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            base[key] = v
    tol = dict(base.get("tolerance", {}))
    tol.update(dict(args.tolerance))
    base["tolerance"] = tol
    if base.get("seed") is None:
        raise ValueError("a seed is required (--seed or the config file)")
    return base


def _selected(args: argparse.Namespace) -> list[str]:
    if args.command == "verify-all":
        return list(EXPERIMENTS)
    group = [e.name for e in EXPERIMENTS.values() if e.group == args.command]
    chosen = args.experiments or group
    bad = [c for c in chosen if c not in group]
    if bad:
        raise UnknownExperimentError(f"{', '.join(bad)} not in '{args.command}' (choose from {', '.join(group)})")
    return chosen


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for e in EXPERIMENTS.values():
            print(f"{e.name:15s} {e.group:11s} criterion {e.criterion:2d}  {e.summary}")
        return 0
    try:
        settings = _settings(args)
        names = _selected(args)
        failed = []
        for name in names:
            d = dict(settings)
            # tolerance keys are per experiment; a shared override only reaches the ones that know it
            known = EXPERIMENTS[name].tolerances
            d["tolerance"] = {k: v for k, v in d["tolerance"].items() if k in known}
            report = run_experiment(ExperimentConfig.from_dict({"experiment": name, **d}))
            print(report.table())
            for note in report.notes:
                print(f"  note: {note}")
            sys.stdout.flush()
            if not report.passed:
                failed.append(name)
    except (ValueError, KeyError, ExperimentError, OSError) as err:
        print(f"betacoal: error: {err}", file=sys.stderr)
        return 2
    print(f"{len(names) - len(failed)}/{len(names)} experiments passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
