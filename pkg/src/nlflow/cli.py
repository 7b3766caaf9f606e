"""Command-line entry points for the experiment pipeline.

Exit codes: 0 success, 1 user error (bad arguments, bad config, missing
files), 2 internal error (a stage or library failure).
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def _load_config(path, seed=None):
    from .pipeline import ExperimentConfig

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise _UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        config = ExperimentConfig.from_json(text)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise _UsageError(f"bad config {path}: {exc}") from exc
    if seed is not None:
        import dataclasses
        config = dataclasses.replace(config, seed=seed)
    return config


def _add_common(sub):
    sub.add_argument("--config", required=True, help="experiment JSON")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")


def _cmd_stage(args, until: str) -> int:
    from .pipeline import run_pipeline

    config = _load_config(args.config, args.seed)
    run_pipeline(config, args.out, until=until)
    return 0


def _cmd_sweep(args) -> int:
    from .pipeline import sweep

    config = _load_config(args.config, args.seed)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise _UsageError(f"bad sweep values {args.values!r}: {exc}") from exc
    try:
        sweep(config, args.axis, values, args.out)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    return 0


def _cmd_calibrate(args) -> int:
    from .calib import GAConfig, ga_calibrate, load_records

    try:
        records = load_records(args.records)
    except (OSError, ValueError) as exc:
        raise _UsageError(f"cannot load records: {exc}") from exc
    if not records:
        raise _UsageError(f"{args.records}: no records")
    ga = GAConfig(
        population=args.population, generations=args.generations,
        seed=args.seed if args.seed is not None else 0,
    )
    result = ga_calibrate(args.variant, records, ga)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibrated.json").write_text(result.to_json())
    print(result.to_json())
    return 0


def _cmd_stability(args) -> int:
    from . import baselines
    from .microsim import RingConfig, equilibrium
    from .stability import analyze

    try:
        params = baselines.baseline_params(args.model)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    ring = RingConfig(L=args.length, N=args.vehicles)
    s_star, v_star = equilibrium(ring, params.vopt)
    report = analyze(params, s_star, v_star, N=args.vehicles)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stability.json").write_text(text)
    print(text)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="nlflow",
                     description="ring-traffic learning pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, until in (("simulate", "simulate"),
                        ("reconstruct", "reconstruct"),
                        ("train", "train"),
                        ("report", "report")):
        sub = subs.add_parser(
            name, help=f"run the pipeline through the {name} stage")
        _add_common(sub)
        sub.set_defaults(func=lambda a, u=until: _cmd_stage(a, u))

    sub = subs.add_parser("sweep", help="run the pipeline over an axis")
    _add_common(sub)
    sub.add_argument("--axis", required=True)
    sub.add_argument("--values", required=True,
                     help="comma-separated numbers")
    sub.set_defaults(func=_cmd_sweep)

    sub = subs.add_parser("calibrate",
                          help="fit a model variant to recorded drives")
    sub.add_argument("--records", required=True, help="drive-record CSV")
    sub.add_argument("--variant", required=True,
                     choices=("car_following", "look_ahead", "nudging"))
    sub.add_argument("--out", required=True)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--population", type=int, default=64)
    sub.add_argument("--generations", type=int, default=200)
    sub.set_defaults(func=_cmd_calibrate)

    sub = subs.add_parser("stability",
                          help="plant/string stability of a baseline model")
    sub.add_argument("--model", required=True)
    sub.add_argument("--vehicles", type=int, default=19)
    sub.add_argument("--length", type=float, default=260.0)
    sub.add_argument("--out", default=None)
    sub.set_defaults(func=_cmd_stability)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
