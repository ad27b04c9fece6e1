"""Command-line entry point: ``cometsim {pretrain,run,baseline,sweep,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, load_scenario
from .engine import VARIANTS, PretrainingDiverged, get_source_model, load_source_model, register_source_model, run_experiment, save_source_model
from .metrics import MetricError
from .numerics import DegenerateVectorError
from .report import AXES, checkpoint_path, dumps_json, format_means, parse_axis_values, records_jsonl, run_sweep, table_csv, write_text

log = logging.getLogger("cometsim")

# CLI flag -> HyperParams field.
OVERRIDES = {
    "alpha": "alpha",
    "tau": "tau",
    "lambda": "lam",
    "delta": "delta",
    "delta_l": "delta_l",
    "delta_u": "delta_u",
    "batch_size": "batch_size",
    "lr": "learning_rate",
}


class UsageError(Exception):
    pass


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _add_scenario(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="ref_opda", help="scenario file or bundled name (default: ref_opda)")


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameter overrides")
    g.add_argument("--alpha", type=float, help="teacher EMA momentum")
    g.add_argument("--tau", type=float, help="contrastive temperature")
    g.add_argument("--lambda", dest="lambda", type=float, help="entropy-loss weight")
    g.add_argument("--delta", type=float, help="inference rejection threshold")
    g.add_argument("--delta-l", dest="delta_l", type=float, help="pseudo-label known threshold")
    g.add_argument("--delta-u", dest="delta_u", type=float, help="pseudo-label unknown threshold")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="target batch size")
    g.add_argument("--lr", type=float, help="adaptation learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cometsim", description="Online source-free universal domain adaptation simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train source models and write checkpoints")
    _add_scenario(p)
    p.add_argument("--seeds", type=_seed_list, default=[0])
    p.add_argument("--out", required=True, type=Path)

    for name, text in (("run", "adapt on the target stream"), ("baseline", "evaluate the frozen source model")):
        p = sub.add_parser(name, help=text)
        _add_scenario(p)
        if name == "run":
            p.add_argument("--variant", choices=VARIANTS, default="comet-p")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--checkpoint", type=Path, help="source checkpoint from `pretrain`")
        p.add_argument("--out", required=True, type=Path)
        _add_overrides(p)

    p = sub.add_parser("sweep", help="ablation sweep over one hyperparameter axis")
    _add_scenario(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True, help="comma-separated values; delta_l_u pairs as low:high")
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variants")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir", type=Path, help="directory written by `pretrain`")
    p.add_argument("--out", required=True, type=Path)
    _add_overrides(p)

    p = sub.add_parser("selftest", help="gradient checks and loss oracles")
    p.add_argument("--seeds", type=int, default=10, help="number of gradient-check seeds")
    return parser


def _overrides(args) -> dict:
    return {field: getattr(args, flag) for flag, field in OVERRIDES.items() if getattr(args, flag, None) is not None}


def _scenario(args) -> tuple[ScenarioConfig, dict]:
    scenario = load_scenario(args.scenario)
    overrides = _overrides(args)
    # Validates against the HyperParams invariants before any work starts.
    return (scenario.with_hyper(**overrides) if overrides else scenario), overrides


def _run_one(args, variant: str) -> int:
    scenario, overrides = _scenario(args)
    if args.checkpoint is not None:
        register_source_model(load_source_model(args.checkpoint, scenario, args.seed), scenario, args.seed)
    result = run_experiment(scenario, variant, args.seed)
    summary = dict(result.summary, overrides=overrides, scenario_config=scenario.to_dict())
    args.out.mkdir(parents=True, exist_ok=True)
    write_text(args.out / "records.jsonl", records_jsonl(result.records))
    write_text(args.out / "summary.json", dumps_json(summary))
    print(f"{variant} seed={args.seed} {summary['metric']}={summary['value']:.4f} -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    scenario = load_scenario(args.scenario)
    args.out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        source = get_source_model(scenario, seed)
        path = checkpoint_path(args.out, seed)
        save_source_model(path, source, scenario, seed)
        info = {"seed": seed, "val_accuracy": source.val_accuracy, "epochs_run": source.epochs_run, "history": source.history}
        write_text(args.out / f"source_seed{seed}.json", dumps_json(info))
        print(f"seed={seed} val_accuracy={source.val_accuracy:.4f} epochs={source.epochs_run} -> {path}")
    return 0


def cmd_sweep(args) -> int:
    scenario, overrides = _scenario(args)
    values = parse_axis_values(args.axis, args.values)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    result = run_sweep(scenario, args.axis, values, args.seeds, variants, jobs=args.jobs, checkpoint_dir=args.checkpoint_dir)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = f"sweep_{args.axis}"
    write_text(args.out / f"{stem}.csv", table_csv(result.rows))
    summary = dict(result.to_dict(), scenario=scenario.name, overrides=overrides, scenario_config=scenario.to_dict())
    write_text(args.out / f"{stem}.json", dumps_json(summary))
    print(format_means(result))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(range(args.seeds))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pretrain":
            return cmd_pretrain(args)
        if args.command == "run":
            return _run_one(args, args.variant)
        if args.command == "baseline":
            return _run_one(args, "source-only")
        if args.command == "sweep":
            return cmd_sweep(args)
        return cmd_selftest(args)
    except (ConfigError, UsageError, MetricError, PretrainingDiverged, DegenerateVectorError, ValueError, OSError) as exc:
        print(f"cometsim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
