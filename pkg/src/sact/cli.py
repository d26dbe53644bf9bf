"""Command-line entry point: ``sact <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, SyntheticTaskSpec, generate_synthetic, load_dataset, save_dataset, spec_to_dict
from .model import predict_clip
from .train import (
    CheckpointMismatch,
    TrainConfig,
    TrainingDiverged,
    check_stream_widths,
    gradient_check,
    load_checkpoint,
    score_predictions,
    train,
)

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Bad invocation that argparse could not catch (e.g. unreadable config)."""


def _emit(record: dict, out=None) -> None:
    print(json.dumps(record), file=out or sys.stdout)


def _load_split(args, model):
    clips = load_dataset(args.data).split(args.split)
    if not clips:
        raise DataError(f"split {args.split!r} is empty")
    check_stream_widths(model, clips)
    return clips


def cmd_generate_data(args) -> int:
    spec = SyntheticTaskSpec(
        num_clips=args.num_clips, frames=args.frames, d_u=args.d_u, d_v=args.d_v,
        noise=args.noise, seed=args.seed, min_event=args.min_event, max_event=args.max_event,
        max_events=args.max_events,
    )
    task = generate_synthetic(spec)
    save_dataset(task.dataset, args.out, meta={"synthetic": spec_to_dict(spec)})
    print(f"wrote {len(task.clips)} clips to {args.out}", file=sys.stderr)
    return 0


def _train_config(args) -> TrainConfig:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "variant": args.variant,
        "learning_rate": args.lr, "gate_penalty": args.gate_penalty, "threshold": args.threshold,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config {path}: {exc}") from None


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset = load_dataset(args.data)
    _, report = train(config, dataset, checkpoint_dir=args.out)
    text = json.dumps(report.to_dict(), indent=1)
    (Path(args.out) / "metrics.json").write_text(text)
    print(text)
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clips = _load_split(args, model)
    predictions = [predict_clip(model, clip) for clip in clips]
    for pred in predictions:
        for p in pred.proposals:
            start, end = p.segment
            _emit({"clip_id": pred.clip_id, "score": p.score, "start": start, "end": end})
    report = score_predictions(predictions, clips)
    text = json.dumps(report.to_dict(), indent=1)
    if args.report:
        Path(args.report).write_text(text)
    print(text, file=sys.stderr)
    return 0


def cmd_generate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    for clip in _load_split(args, model):
        for segment, caption in predict_clip(model, clip).captions:
            _emit({"clip_id": clip.clip_id, "segment": list(segment), "caption": caption})
    return 0


def cmd_analyze_gates(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    for clip in _load_split(args, model):
        beta = predict_clip(model, clip).beta
        if beta is None:  # ungated baseline keeps every frame
            beta = np.ones(clip.frames)
        for t, b in enumerate(beta):
            _emit({"clip_id": clip.clip_id, "frame_index": t, "beta": float(b), "kept": bool(b > 0)})
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_check(args.variant, frames=args.frames, dim=args.dim, heads=args.heads,
                            layers=args.layers, seed=args.seed)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    if args.verbose:
        for name in sorted(errors):
            print(f"{name}\t{errors[name]:.3e}")
    print(f"max relative error {worst:.3e} ({worst_name}), {len(errors)} parameters")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sact", description="Self-aware composition transformer toolkit")
    parser.add_argument("--log-level", default="WARNING", help="python logging level")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate-data", help="write a synthetic planted-event dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-clips", type=int, default=200)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--d-u", type=int, default=32)
    p.add_argument("--d-v", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--min-event", type=int, default=4)
    p.add_argument("--max-event", type=int, default=12)
    p.add_argument("--max-events", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--config", required=True, help="TrainConfig JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=["baseline", "joint", "separated"])
    p.add_argument("--lr", type=float)
    p.add_argument("--gate-penalty", type=float)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "score a checkpoint; proposals as JSON lines"),
        ("generate", cmd_generate, "caption kept proposals as JSON lines"),
        ("analyze-gates", cmd_analyze_gates, "per-frame beta as JSON lines"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="val")
        if name == "eval":
            p.add_argument("--report", help="also write the metrics JSON here")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="compare backward() with finite differences")
    p.add_argument("--variant", choices=["baseline", "joint", "separated"], default="separated")
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sact: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointMismatch, TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"sact: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
