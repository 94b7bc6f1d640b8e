"""
Command-line entry point of the lab:

    python sta_cli.py generate-data --config configs/micro.yaml --out runs/data
    python sta_cli.py train --config configs/micro.yaml --data runs/data --out runs/sta
    python sta_cli.py eval --checkpoint runs/sta/best.ckpt --out runs/sta_eval

Exit codes: 0 on success, 1 for usage and configuration errors, 2 for runtime failures.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from shared_utils import did_you_mean, plain_data
from state_transition.analysis import bench_inference, inspect_attention
from state_transition.checkpoint import load_checkpoint
from state_transition.dataset import generate_dataset, load_dataset
from state_transition.errors import ConfigError, LabError, UsageError
from state_transition.evaluation import Regime, evaluate_seeds
from state_transition.experiments import ablate_history, ablate_masking, compare_data, train_policy
from state_transition.policy import Variant
from state_transition.run_config import RunConfig, apply_overrides, load_config, write_resolved_config

logger = logging.getLogger("sta_cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class LabArgumentParser(argparse.ArgumentParser):
    "Reports bad arguments as UsageError instead of exiting with argparse's status 2"

    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML run configuration (defaults for every missing key)")
    parser.add_argument("--seed", type=int, default=0, help="seed for data, initialization and evaluation (default 0)")
    parser.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; may be repeated")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    verbosity.add_argument("--quiet", action="store_true", help="log warnings only and hide progress bars")


def _variant(value: str) -> Variant:
    try:
        return Variant(value)
    except ValueError:
        choices = [v.value for v in Variant]
        raise argparse.ArgumentTypeError(f"unknown variant '{value}'{did_you_mean(value, choices)}")


def _histories(value: str) -> List[int]:
    try:
        histories = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{value}' is not a comma-separated list of integers")
    if not histories or min(histories) < 0:
        raise argparse.ArgumentTypeError(f"'{value}' must list non-negative history lengths")
    return histories


def build_parser() -> LabArgumentParser:
    parser = LabArgumentParser(prog="sta_cli", description="State transition attention lab")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=LabArgumentParser)

    p = commands.add_parser("generate-data", help="roll the scripted expert into a dataset")
    _add_common(p)
    p.add_argument("--episodes", type=int, help="number of episodes to roll (default data.episodes)")
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=None,
                   help="inject perception noise for recovery-rich data (default data.noise_on)")
    p.add_argument("--workers", type=int, help="worker processes (default data.workers)")

    p = commands.add_parser("train", help="train a policy on a dataset")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--variant", type=_variant, help="sta, standard_xattn or no_history (default policy.variant)")
    p.add_argument("--mask", action=argparse.BooleanOptionalAction, default=None,
                   help="temporal masking during training (default train.mask_enabled)")

    p = commands.add_parser("eval", help="evaluate a checkpoint in closed loop")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--history", type=int, help="inference history length (default: the policy's window)")
    p.add_argument("--masked-inference", action="store_true", help="drop visual input in random runs of steps")
    p.add_argument("--regime", choices=[r.value for r in Regime], help="which episodes are occluded")

    p = commands.add_parser("ablate-masking", help="train with and without temporal masking and compare")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")

    p = commands.add_parser("ablate-history", help="evaluate a checkpoint with truncated inference history")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--histories", type=_histories, default=[15, 7, 3, 1, 0], help="comma-separated lengths")
    p.add_argument("--train-references", action="store_true",
                   help="also train a policy at each history length (needs --data)")
    p.add_argument("--data", type=Path, help="dataset directory for the reference policies")

    p = commands.add_parser("inspect-attention", help="export last-layer attention traces of one episode")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episode-seed", type=int, help="environment seed of the episode (default --seed)")
    p.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.MIXED.value)
    p.add_argument("--prefill-history", action="store_true",
                   help="start with the window full of copies of the first step")
    p.add_argument("--allow-standard", action="store_true",
                   help="export attention weights of a standard cross-attention checkpoint")

    p = commands.add_parser("bench", help="count and time one cached inference step")
    _add_common(p)
    p.add_argument("--histories", type=_histories, help="comma-separated history lengths (default bench.history_lengths)")

    p = commands.add_parser("compare-data", help="train on successful-only and recovery-rich data and compare")
    _add_common(p)
    parser.command_options = {name: [option for action in sub._actions for option in action.option_strings]
                              for name, sub in commands.choices.items()}
    return parser


def _resolved(args: argparse.Namespace) -> RunConfig:
    return apply_overrides(load_config(args.config), tuple(args.overrides))


def _write_json(path: Path, record: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plain_data(record), indent=2, sort_keys=True) + "\n")
    logger.info("Wrote %s", path)
    return path


def run_generate_data(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    episodes = run.data.episodes if args.episodes is None else args.episodes
    noise_on = run.data.noise_on if args.noise is None else args.noise
    if episodes < 0:
        raise UsageError(f"--episodes must be non-negative, got {episodes}")
    write_resolved_config(run, args.out)
    generate_dataset(args.out, episodes, noise_on, args.seed, run.env, run.noise,
                     workers=args.workers or run.data.workers, progress=progress)


def run_train(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    dataset = load_dataset(args.data)
    _, result = train_policy(run, dataset, args.seed, args.out, variant=args.variant, mask_enabled=args.mask,
                             progress=progress)
    logger.info("Best epoch %d (success %s)", result.best_epoch, result.best_success)


def run_eval(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    policy = checkpoint.policy()
    eval_config = run.eval if args.regime is None else replace(run.eval, regime=Regime(args.regime))
    report = evaluate_seeds(policy, run.train, eval_config, run.env, args.seed, inference_history=args.history,
                            masked_inference=args.masked_inference or None, progress=progress)
    write_resolved_config(run, args.out)
    _write_json(args.out / "eval.json", {
        "format_version": 1,
        "checkpoint": str(args.checkpoint),
        "variant": policy.config.variant,
        "regime": eval_config.regime,
        "inference_history": args.history,
        "masked_inference": bool(args.masked_inference or eval_config.masked_inference),
        "seeds": report.seeds,
        "per_seed": report.per_seed,
        "mean": report.mean,
    })
    logger.info("Success %.3f (per seed: %s)", report.mean, ", ".join(f"{r:.3f}" for r in report.per_seed))


def run_ablate_masking(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    write_resolved_config(run, args.out)
    ablate_masking(run, load_dataset(args.data), args.seed, args.out, progress=progress)


def run_ablate_history(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    if args.train_references and args.data is None:
        raise UsageError("--train-references needs --data")
    policy = load_checkpoint(args.checkpoint).policy()
    dataset = load_dataset(args.data) if args.train_references else None
    write_resolved_config(run, args.out)
    ablate_history(run, policy, args.seed, args.out, args.histories, dataset, args.train_references, progress)


def run_inspect_attention(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    policy = load_checkpoint(args.checkpoint).policy()
    seed = args.seed if args.episode_seed is None else args.episode_seed
    inspection = inspect_attention(policy, seed, args.out, run.env, Regime(args.regime),
                                   prefill_history=args.prefill_history, allow_standard=args.allow_standard)
    logger.info("Traced %d steps (success: %s)", len(inspection.traces), inspection.success)


def run_bench(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    bench = run.bench if args.histories is None else replace(run.bench, history_lengths=tuple(args.histories))
    write_resolved_config(run, args.out)
    bench_inference(run.policy, bench, args.seed, args.out)


def run_compare_data(args: argparse.Namespace, run: RunConfig, progress: bool) -> None:
    write_resolved_config(run, args.out)
    compare_data(run, args.seed, args.out, progress=progress)


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, bool], None]] = {
    "generate-data": run_generate_data,
    "train": run_train,
    "eval": run_eval,
    "ablate-masking": run_ablate_masking,
    "ablate-history": run_ablate_history,
    "inspect-attention": run_inspect_attention,
    "bench": run_bench,
    "compare-data": run_compare_data,
}


def _check_command(argv: Sequence[str]) -> None:
    "Name a close subcommand when the first argument is not one"
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        raise UsageError(f"sta_cli: unknown command '{argv[0]}'{did_you_mean(argv[0], COMMANDS)}")


def _check_flags(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    "Parse argv, naming the closest known flag when one is not recognized"
    args, unknown = parser.parse_known_args(argv)
    if unknown:
        flag = unknown[0].split("=", 1)[0]
        if args.command is None:
            raise UsageError(f"sta_cli: unrecognized argument {flag}")
        options = parser.command_options[args.command]
        raise UsageError(f"sta_cli {args.command}: unrecognized argument {flag}{did_you_mean(flag, options)}")
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _check_command(argv)
        args = _check_flags(parser, argv)
        if args.command is None:
            parser.print_help()
            return 1
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    progress = not args.quiet and sys.stderr.isatty()
    args.out = Path(args.out or Path("runs") / args.command)

    try:
        run = _resolved(args)
        COMMANDS[args.command](args, run, progress)
    except (UsageError, ConfigError) as e:
        line = e.line if isinstance(e, ConfigError) else None
        line = f" (line {line})" if line and f"line {line}" not in str(e) else ""
        print(f"error: {e}{line}", file=sys.stderr)
        return 1
    except (LabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
