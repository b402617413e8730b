from __future__ import annotations

import argparse
import json
import logging
from datetime import datetime
from pathlib import Path

from rich.logging import RichHandler

from brst.cli import threads_from_env
from experiments_cli import DEFAULT_STATE_FILE, DEFAULT_WORKDIR, TOY_EXPERIMENT_PRESETS, RunMemory
from experiments_cli.toy_pipeline import parameter_rows, run_toy_experiment


def toy_experiment_command(args: argparse.Namespace) -> None:
    workdir = Path(args.workdir)
    result = run_toy_experiment(
        workdir=workdir,
        presets=tuple(args.presets),
        steps=args.steps,
        warm_start_steps=args.warm_start_steps,
        num_utterances=args.num_utterances,
        seed=args.seed,
        threads=threads_from_env(),
    )
    (workdir / "summary.json").write_text(json.dumps(result.to_dict(), indent=2))
    name = args.name or f"toy-{datetime.now():%Y%m%d-%H%M%S}"
    record = RunMemory().record(name, result)

    print(f"Toy experiment '{record.name}' finished ({result.train_utterances} train / {result.test_utterances} test).")
    for outcome in result.outcomes:
        trend = "ok" if outcome.loss_trend_ok else "NOT monotone"
        print(
            f"  {outcome.preset:<10} params={outcome.params:>9,}  CER={100 * outcome.cer:6.2f}%  "
            f"loss={outcome.final_loss:.4f} ({trend})  linear sites={outcome.linear_sites}/{outcome.sites}"
        )
    print(f"  Cached at: {DEFAULT_STATE_FILE}")


def param_budget_command(args: argparse.Namespace) -> None:
    print(f"{'model':<10} {'params':>12} {'M':>7} {'ratio':>7} {'reference':>10} {'gap':>7}")
    for row in parameter_rows(args.scale):
        reference = "-" if row["reference_millions"] is None else f"{row['reference_millions']:.3f}"
        gap = "-" if row["relative_gap"] is None else f"{100 * row['relative_gap']:.1f}%"
        print(
            f"{row['model']:<10} {row['total']:>12,} {row['millions']:>7.3f} "
            f"{row['ratio_vs_baseline']:>7.3f} {reference:>10} {gap:>7}"
        )


def last_run_command(args: argparse.Namespace) -> None:
    memory = RunMemory()
    record = memory.find(args.name)
    if not record:
        raise RuntimeError(
            f"No cached run named '{args.name}' was found." if args.name else "No toy experiment has been recorded yet."
        )
    print(f"Run '{record.name}' ({record.saved_at})\n  Workdir: {record.workdir}")
    for outcome in record.outcomes:
        best_run, best = memory.best(outcome.preset)
        marker = "" if best_run.name == record.name else f"  (best: {100 * best.cer:.2f}% in '{best_run.name}')"
        print(f"  {outcome.preset:<10} CER={100 * outcome.cer:6.2f}%  {outcome.checkpoint}{marker}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Block-reusing speech Transformer experiment toolbox.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    toy_parser = subparsers.add_parser(
        "toy-experiment",
        help="Generate the toy corpus, train BR and warm-started adapter presets, decode and analyze.",
    )
    toy_parser.add_argument("--workdir", default=str(DEFAULT_WORKDIR), help="Directory for every artifact.")
    toy_parser.add_argument(
        "--presets",
        nargs="+",
        default=list(TOY_EXPERIMENT_PRESETS),
        help="Presets to compare; BR is always trained first.",
    )
    toy_parser.add_argument("--steps", type=int, default=3000, help="Training steps for BR.")
    toy_parser.add_argument(
        "--warm-start-steps", type=int, default=1000, help="Training steps after each warm start."
    )
    toy_parser.add_argument("--num-utterances", type=int, default=200)
    toy_parser.add_argument("--seed", type=int, default=0)
    toy_parser.add_argument("--name", help="Name to record the run under.")
    toy_parser.set_defaults(func=toy_experiment_command)

    table_parser = subparsers.add_parser(
        "param-budget", help="Parameter totals per preset against the published budgets."
    )
    table_parser.add_argument("--scale", choices=("full", "toy"), default="full")
    table_parser.set_defaults(func=param_budget_command)

    last_parser = subparsers.add_parser("last-run", help="Show a recorded toy experiment.")
    last_parser.add_argument("--name", help="Run name (defaults to the most recent).")
    last_parser.set_defaults(func=last_run_command)

    return parser


def main() -> None:
    parser = build_parser()
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s", handlers=[RichHandler(show_path=False)])
    args.func(args)


if __name__ == "__main__":
    main()
