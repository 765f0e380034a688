"""Command-line entry point: data generation, pre-training, evaluation, adaptation, plots.

Exit codes: 0 success, 1 validation or runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, load_train_config
from .data import (GenerationError, ManifestError, ValidationError, default_vocabulary,
                   generate_interaction_dataset, ingest_manifest, write_manifest)

log = logging.getLogger("interactpred")

DECODER_CHOICES = ("full", "pred_only", "det_only", "mlp")
CAUSALITY_FLAGS = {"deformable": "deformable", "off": "dual_frame_off"}
MODALITY_FLAGS = {"vl": "vision_language", "vision_only": "vision_only"}


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""


class UsageError(Exception):
    pass


def _write_json(path: Path, payload) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def _run_manifest(out: Path, command: str, args: dict, artifacts: list[Path], report=None) -> Path:
    payload = {"command": command, "args": args,
               "artifacts": sorted(str(Path(a).relative_to(out)) if Path(a).is_relative_to(out)
                                   else str(a) for a in artifacts)}
    if report is not None:
        payload["report"] = report
    return _write_json(out / "run_manifest.json", payload)


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def _manifest_path(data: str) -> Path:
    path = Path(data)
    return path / "manifest.json" if path.is_dir() else path


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> CommandResult:
    out = Path(args.out)
    if args.num < 1:
        raise ValidationError("--num must be >= 1")
    if args.task == "interaction":
        triplets = generate_interaction_dataset(args.num, args.seed, canvas_size=args.canvas,
                                                num_distractors=args.distractors)
        manifest = write_manifest(triplets, out)
    elif args.task == "reg":
        from .adapt.reg import generate_reg_dataset, save_reg_dataset

        manifest = save_reg_dataset(generate_reg_dataset(args.num, args.seed, args.canvas), out)
    else:
        from .adapt.env import PusherEnv
        from .adapt.policy import collect_demos, save_demos

        manifest = save_demos(collect_demos(PusherEnv(canvas_size=args.canvas), args.num, args.seed), out)
    return CommandResult(0, [str(manifest)], f"wrote {args.num} {args.task} samples to {out}")


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    raw = cfg.to_dict()
    if args.p is not None:
        raw["data"]["p"] = args.p
    if args.decoder is not None:
        raw["decoder_mode"] = args.decoder
    if args.causality is not None:
        raw["causality"] = CAUSALITY_FLAGS[args.causality]
    if args.modality is not None:
        raw["modality"] = MODALITY_FLAGS[args.modality]
    if args.seed is not None:
        raw["seed"] = args.seed
        raw["data"]["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    if args.max_steps is not None:
        raw["max_steps"] = args.max_steps
    return TrainConfig.from_dict(raw)


def cmd_pretrain(args) -> CommandResult:
    from .pretrain import run_pretraining

    cfg = _train_config(args)
    dataset = ingest_manifest(_manifest_path(args.data))
    if not dataset:
        raise ValidationError(f"no clips in {args.data}")
    out = Path(args.out)
    _, records, ckpt = run_pretraining(cfg, dataset, out, default_vocabulary(cfg.model.vocab_seed),
                                       progress=args.verbose)
    artifacts = [ckpt, ckpt.with_suffix(".bin"), out / "metrics.ndjson"]
    _write_json(out / "config.json", cfg.to_dict())
    artifacts.append(out / "config.json")
    _run_manifest(out, "pretrain", dict(_flags(args), seed=cfg.seed), artifacts)
    last = records[-1]
    return CommandResult(0, [str(a) for a in artifacts],
                         f"{len(records)} steps, final total {last['total']:.4f}")


def cmd_eval_pretrain(args) -> CommandResult:
    from .pretrain import evaluate_pretraining, load_model

    model, _, _ = load_model(args.ckpt)
    triplets = ingest_manifest(_manifest_path(args.data))
    if not triplets:
        raise ValidationError(f"no clips in {args.data}")
    report = evaluate_pretraining(model, triplets)
    artifacts = []
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts.append(_write_json(out / "eval_report.json", report))
        _run_manifest(out, "eval-pretrain", _flags(args), artifacts, report)
    print(json.dumps(report, sort_keys=True))
    return CommandResult(0, [str(a) for a in artifacts], "evaluation report emitted")


def _encoder(args):
    from .pretrain import build_model, load_model

    if args.ckpt:
        return load_model(args.ckpt)[0].encoder
    if not args.random_init:
        raise UsageError("give --ckpt, or --random-init for an untrained encoder")
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    cfg = TrainConfig.from_dict(dict(cfg.to_dict(), seed=args.seed))
    return build_model(cfg, default_vocabulary(cfg.model.vocab_seed)).encoder


def cmd_adapt_bc(args) -> CommandResult:
    from .adapt.env import PusherEnv
    from .adapt.policy import (FeaturePolicy, FrozenFeatures, collect_demos, evaluate_policy,
                               load_demos, train_bc_policy)

    encoder = _encoder(args)
    env = PusherEnv(canvas_size=encoder.cfg.image_size)
    demos = load_demos(args.demos) if args.demos else collect_demos(env, args.num_demos, args.seed + 1000)
    features = FrozenFeatures(encoder)
    head, losses = train_bc_policy(features, demos, args.mode, steps=args.steps, seed=args.seed)
    rate = evaluate_policy(FeaturePolicy(features, head), env, args.episodes, args.seed)
    report = {"mode": args.mode, "seed": args.seed, "episodes": args.episodes, "success_rate": rate}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [_write_json(out / "bc_report.json", report)]
    with open(out / "bc_losses.ndjson.tmp", "w") as fh:
        for step, loss in enumerate(losses):
            fh.write(json.dumps({"step": step, "total": loss}) + "\n")
    os.replace(out / "bc_losses.ndjson.tmp", out / "bc_losses.ndjson")
    artifacts.append(out / "bc_losses.ndjson")
    _run_manifest(out, "adapt-bc", _flags(args), artifacts, report)
    print(json.dumps(report, sort_keys=True))
    return CommandResult(0, [str(a) for a in artifacts], f"success rate {rate:.3f}")


def cmd_adapt_reg(args) -> CommandResult:
    from .adapt.reg import adapt_reg_head, evaluate_reg, generate_reg_dataset, load_reg_dataset

    encoder = _encoder(args)
    size = encoder.cfg.image_size
    train = load_reg_dataset(args.train) if args.train else generate_reg_dataset(args.num_train, args.seed, size)
    test = load_reg_dataset(args.test) if args.test else generate_reg_dataset(args.num_test, args.seed + 1, size)
    head, inputs, _ = adapt_reg_head(encoder, encoder.vocab, train,
                                     use_aggregated=args.embedding == "aggregated",
                                     epochs=args.epochs, seed=args.seed)
    report = evaluate_reg(head, inputs, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [_write_json(out / "reg_report.json", report)]
    _run_manifest(out, "adapt-reg", _flags(args), artifacts, report)
    print(json.dumps(report, sort_keys=True))
    return CommandResult(0, [str(a) for a in artifacts], f"AP@0.5 {report['ap50']:.3f}")


def cmd_plot(args) -> CommandResult:
    from .plot import emit_plot

    path = emit_plot(args.metrics, args.out)
    return CommandResult(0, [str(path)], f"wrote {path}")


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interactpred", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=("interaction", "reg", "bc"), required=True)
    g.add_argument("--num", type=int, required=True, help="triplets, scenes or demo episodes")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--canvas", type=int, default=64, help="canvas size in pixels")
    g.add_argument("--distractors", type=int, default=2, help="interaction task only")
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train on a triplet manifest")
    p.add_argument("--config", help="YAML or JSON training config (defaults if omitted)")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=float, choices=(0.0, 0.5, 1.0), help="Bernoulli input-selection rate")
    p.add_argument("--decoder", choices=DECODER_CHOICES)
    p.add_argument("--causality", choices=tuple(CAUSALITY_FLAGS))
    p.add_argument("--modality", choices=tuple(MODALITY_FLAGS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval-pretrain", help="held-out prediction MSE, copy baselines, box IoU")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_pretrain)

    for name, helptext in (("adapt-bc", "behavior cloning on the toy pusher"),
                           ("adapt-reg", "referring-expression grounding")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--ckpt", help="pre-trained checkpoint")
        a.add_argument("--random-init", action="store_true",
                       help="use a randomly initialized encoder instead of --ckpt")
        a.add_argument("--config", help="config for --random-init")
        a.add_argument("--seed", type=int, default=0)
        a.add_argument("--out", required=True)
        if name == "adapt-bc":
            a.add_argument("--mode", default="proprio_conditioned_map",
                           choices=("pre_aggregation", "post_aggregation_map", "proprio_conditioned_map"))
            a.add_argument("--demos", help="demo directory from gen-data --task bc")
            a.add_argument("--num-demos", type=int, default=25)
            a.add_argument("--steps", type=int, default=2000)
            a.add_argument("--episodes", type=int, default=50)
            a.set_defaults(func=cmd_adapt_bc)
        else:
            a.add_argument("--embedding", choices=("aggregated", "full"), default="full")
            a.add_argument("--train", help="scene directory from gen-data --task reg")
            a.add_argument("--test", help="held-out scene directory")
            a.add_argument("--num-train", type=int, default=4096)
            a.add_argument("--num-test", type=int, default=256)
            a.add_argument("--epochs", type=int, default=10)
            a.set_defaults(func=cmd_adapt_reg)

    pl = sub.add_parser("plot", help="chart loss components from a metrics file")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True, help="output file (.svg or .png)")
    pl.set_defaults(func=cmd_plot)
    return parser


def run_command(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(int(exc.code or 0), [], "usage")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.manual_seed(getattr(args, "seed", None) or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return CommandResult(2, [], str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as exit 1
        if isinstance(exc, (ConfigError, ValidationError, ManifestError, GenerationError,
                            CheckpointError, ValueError, OSError, RuntimeError)):
            from .plot import MetricsError

            if args.command == "plot" and isinstance(exc, MetricsError) and "no metrics" in str(exc):
                print(f"usage error: {exc}", file=sys.stderr)
                return CommandResult(2, [], str(exc))
            print(f"error: {exc}", file=sys.stderr)
            return CommandResult(1, [], str(exc))
        raise


def main(argv=None) -> int:
    result = run_command(argv)
    if result.exit_code == 0 and result.summary:
        print(result.summary, file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
