#!/usr/bin/env python3
"""
Command-line interface for the sketch-to-saliency tool.

Subcommands synthesize data, train the photo-to-sketch model, generate
sketches, predict saliency maps, evaluate them and run the downstream
probing, fine-tuning and ablation protocols.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

# Add parent directory to path for imports when running as script
if __name__ == "__main__":
    sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import TrainConfig
from src.errors import ConfigError, UsageError
from src.pipeline import (
    CommandResult,
    cmd_ablate,
    cmd_eval,
    cmd_finetune,
    cmd_generate,
    cmd_plot_pr,
    cmd_probe,
    cmd_saliency,
    cmd_synth,
    cmd_train,
)
from src.trainer import set_determinism


EPILOG = """
Examples:
  %(prog)s synth --out-dir data/
  %(prog)s train --data data/manifest.json --out-dir runs/desk
  %(prog)s generate --checkpoint runs/desk/last.pt photo.png --out-dir sketches/
  %(prog)s saliency --checkpoint runs/desk/last.pt photo.png --out-dir maps/
  %(prog)s eval --checkpoint runs/desk/last.pt --data data/manifest.json --out-dir eval/
  %(prog)s eval --oracle --data data/manifest.json --out-dir oracle/
  %(prog)s probe --checkpoint runs/desk/last.pt --data data/manifest.json --kernel 3 --out-dir probe/
  %(prog)s ablate --data data/manifest.json --seeds 0 1 2 --out-dir ablation/
  %(prog)s plot-pr eval/pr_free_running.csv oracle/pr_oracle.csv --out pr.png

Configuration:
  --config reads a JSON file mirroring TrainConfig field names.
  SKETCHSAL_* environment variables (or a .env file) override it,
  and command-line flags override both. See .env.example.
"""


class ArgumentParser(argparse.ArgumentParser):
    """Raise instead of exiting so usage problems map to exit code 2."""

    def error(self, message):
        raise UsageError(message)


def format_result(result: CommandResult) -> str:
    """Format a command result for display to the user."""
    lines = []

    if result.success:
        lines.append(f"✓ {result.summary}")
        if result.artifacts:
            lines.append("")
            lines.append("Generated files:")
            shown = result.artifacts[:20]
            for artifact in shown:
                lines.append(f"  {artifact}")
            if len(result.artifacts) > len(shown):
                lines.append(f"  ... and {len(result.artifacts) - len(shown)} more")
    else:
        lines.append(f"✗ {result.summary or 'Command failed'}")
        if result.error:
            lines.append("")
            lines.append(result.error)
        if result.artifacts:
            lines.append("")
            lines.append("Files written before failure:")
            for artifact in result.artifacts:
                lines.append(f"  {artifact}")

    if result.warnings:
        lines.append("")
        lines.append("Warnings:")
        for warning in result.warnings:
            lines.append(f"  ⚠ {warning}")

    if result.total_time > 0:
        lines.append("")
        label = "Total processing time" if result.success else "Time before failure"
        lines.append(f"{label}: {result.total_time:.2f}s")

    return "\n".join(lines)


def _common(parser: argparse.ArgumentParser, out_dir: bool = True) -> None:
    parser.add_argument("--config", help="JSON config file mirroring TrainConfig field names")
    parser.add_argument("--env-file", dest="env_file", default=".env", help="Path to .env file (default: .env)")
    parser.add_argument("--preset", choices=["desk", "full"], default="desk", help="Base hyperparameters (default: desk)")
    parser.add_argument("--seed", type=int, help="Seed for initialization, sampling and shuffling")
    parser.add_argument("--deterministic", action="store_true", default=None, help="Force deterministic kernels")
    parser.add_argument("--jobs", type=int, help="DataLoader worker processes (0 = in-process)")
    parser.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory")
    if out_dir:
        parser.add_argument("-o", "--out-dir", dest="out_dir", required=True, help="Directory for the outputs")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="sketchsal",
        description="Learn saliency from photo-to-sketch attention.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth", help="Write a synthetic photo/sketch/mask dataset")
    _common(p)

    p = sub.add_parser("train", help="Train the photo-to-sketch model")
    _common(p)
    p.add_argument("--data", required=True, help="Dataset manifest (JSON)")
    p.add_argument("--resume", help="Checkpoint to resume training from")
    p.add_argument("-v", "--verbose", action="store_true", help="Print per-step losses")

    p = sub.add_parser("generate", help="Sketch photos and visualize attention")
    _common(p)
    p.add_argument("photos", nargs="+", help="Input photos (PNG)")
    p.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    p.add_argument("--temperature", type=float, help="Sampling temperature (default: from the checkpoint)")
    p.add_argument("--greedy", action="store_true", help="Take the most likely point at every step")
    p.add_argument("--every", type=int, help="Steps between attention frames (default: 10)")

    p = sub.add_parser("saliency", help="Predict saliency maps")
    _common(p)
    p.add_argument("photos", nargs="*", help="Input photos (PNG)")
    p.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    p.add_argument("--mode", choices=["free_running", "teacher_forced"], default="free_running")
    p.add_argument("--data", help="Manifest supplying ground-truth sketches (teacher_forced mode)")
    p.add_argument("--split", default="test", help="Manifest split for teacher_forced mode (default: test)")
    p.add_argument("--float-sidecar", dest="float_sidecar", action="store_true", help="Also write lossless .npy maps")

    p = sub.add_parser("eval", help="Evaluate saliency against ground-truth masks")
    _common(p)
    p.add_argument("--checkpoint", help="Trained checkpoint")
    p.add_argument("--data", required=True, help="Dataset manifest (JSON)")
    p.add_argument("--split", default="test", help="Split to evaluate (default: test)")
    p.add_argument("--oracle", action="store_true", help="Also score the ground-truth masks themselves")

    for name, help_text in (("probe", "Linear probe on frozen encoder features"),
                            ("finetune", "Fine-tune the encoder on a fraction of the labels")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--checkpoint", help="Trained checkpoint (random encoder when omitted)")
        p.add_argument("--data", required=True, help="Dataset manifest (JSON)")
        p.add_argument("--kernel", type=int, choices=[1, 3], default=1, help="Head kernel size (default: 1)")
        if name == "finetune":
            p.add_argument("--fraction", type=float, default=0.1, help="Fraction of training labels (default: 0.1)")

    p = sub.add_parser("ablate", help="Train and evaluate ablation variants over seeds")
    _common(p)
    p.add_argument("--data", required=True, help="Dataset manifest (JSON)")
    p.add_argument("--variants", nargs="+", help="Variants to run (default: full and every ablation)")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="Seeds per variant (default: 0 1 2)")
    p.add_argument("--mixtures", nargs="+", type=int, default=[], help="Extra mixture counts to sweep")

    p = sub.add_parser("plot-pr", help="Overlay precision-recall curves from CSV files")
    p.add_argument("curves", nargs="+", help="PR-curve CSV files")
    p.add_argument("--out", required=True, help="Output PNG")
    p.add_argument("--force", action="store_true", help="Overwrite an existing output file")

    return parser


def load_config(args: argparse.Namespace) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "deterministic": args.deterministic,
        "jobs": args.jobs,
    }
    if args.command == "synth" and args.seed is not None:
        overrides["synth"] = {"seed": args.seed}
    return TrainConfig.load(args.config, args.env_file, overrides, args.preset)


def run_command(args: argparse.Namespace, progress_callback=None) -> CommandResult:
    if args.command == "plot-pr":
        return cmd_plot_pr(args.curves, args.out, args.force)

    config = load_config(args)
    if config.deterministic:
        set_determinism(True)
    # checkpoint commands keep the stored structure unless a file is given
    stored = config if args.config else None
    seed = config.seed

    if args.command == "synth":
        return cmd_synth(config, args.out_dir, args.force, progress_callback)
    if args.command == "train":
        return cmd_train(config, args.data, args.out_dir, args.force, args.resume, progress_callback, args.verbose)
    if args.command == "generate":
        return cmd_generate(
            args.checkpoint, args.photos, args.out_dir, args.temperature, args.greedy,
            seed, args.every, args.force, stored,
        )
    if args.command == "saliency":
        return cmd_saliency(
            args.checkpoint, args.photos, args.out_dir, args.mode, args.float_sidecar,
            args.data, args.split, args.force, stored,
        )
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.out_dir, args.oracle, args.split, args.force, stored, progress_callback)
    if args.command == "probe":
        return cmd_probe(args.checkpoint, args.data, args.out_dir, config, args.kernel, seed, args.force)
    if args.command == "finetune":
        return cmd_finetune(args.checkpoint, args.data, args.out_dir, config, args.fraction, seed, args.kernel, args.force)
    if args.command == "ablate":
        return cmd_ablate(config, args.data, args.out_dir, args.variants, args.seeds, args.mixtures, args.force, progress_callback)
    raise UsageError(f"Unknown command '{args.command}'")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI.

    Returns:
        Exit code (0 success, 1 runtime failure, 2 usage error)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return 2
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    def progress_callback(step_num: int, step_name: str, status: str):
        if status == "start":
            print(f"Step {step_num}: {step_name}...")
        elif status == "complete":
            print(f"Step {step_num}: {step_name}... ✓ Complete")

    try:
        result = run_command(args, progress_callback)
    except (ConfigError, UsageError) as e:
        print(str(e), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("\n\nProcessing interrupted by user", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"\nUnexpected error: {e}", file=sys.stderr)
        return 1

    print("")
    output = format_result(result)
    print(output, file=sys.stdout if result.success else sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
