"""Command-line interface: ``perceptdist <command> [options]``.

Exit codes: 0 success, 1 evaluation failure (e.g. zero variance),
2 bad input or usage.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import evaluator, viz
from .baselines import NlapdGdnModel
from .data import ImageDecodeError, ManifestError, decode_image, load_manifest, split_by_reference
from .model import PerceptNet, count_parameters, load, load_checkpoint
from .tensor import NonFiniteError
from .trainer import TrainConfig, TrainingError, train

logger = logging.getLogger("perceptdist")

EXIT_EVAL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _threads():
    value = os.environ.get("PERCEPTDIST_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"PERCEPTDIST_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def _load_model(path, expected: str | None = None):
    if path is None:
        raise UsageError(f"metric {expected} needs --checkpoint")
    model = load(path)
    if expected is not None and model.kind != expected:
        raise UsageError(f"{path} holds a {model.kind} model, not {expected}")
    return model


def _metric(args) -> evaluator.MetricHandle:
    model = None
    if args.metric in evaluator.LEARNED:
        model = _load_model(args.checkpoint, args.metric)
    return evaluator.get_metric(args.metric, model)


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    if manifest.kind != "mos":
        raise UsageError("train needs a MOS manifest")
    heldout = None
    if args.heldout:
        heldout = load_manifest(args.heldout)
    elif args.heldout_fraction > 0:
        manifest, heldout = split_by_reference(manifest, args.heldout_fraction, args.split_seed)
    if args.model == "perceptnet":
        model = PerceptNet(seed=args.seed)
    else:
        model = NlapdGdnModel(args.levels, seed=args.seed)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         learning_rate=args.lr, seed=args.seed, crop=args.crop,
                         crop_mode=args.crop_mode, checkpoint_dir=args.checkpoint_dir,
                         eval_every=args.eval_every, record_wall_time=args.wall_time)
    _, log = train(model, manifest, config, heldout=heldout, resume=args.resume)
    if log.epochs:
        last = log.epochs[-1]
        logger.info("finished %d epochs; last loss %s", last.epoch, last.train_loss)
    print(Path(args.checkpoint_dir) / "best.pnet")
    return 0


def _report_out(args, reports) -> None:
    if args.format == "json":
        print(json.dumps([r.to_dict() for r in reports] if len(reports) > 1 else reports[0].to_dict(),
                         sort_keys=True))
    else:
        print(evaluator.format_table(reports))
    if args.json:
        Path(args.json).write_text(reports[0].to_json() + "\n", encoding="utf-8")
    if args.dump_csv:
        reports[0].dump_csv(args.dump_csv)


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    if manifest.kind != "mos":
        raise UsageError("eval needs a MOS manifest; use eval-2afc for triplets")
    if args.name:
        manifest.name = args.name
    report = evaluator.evaluate_mos(_metric(args), manifest)
    _report_out(args, [report])
    return 0


def cmd_eval_2afc(args) -> int:
    manifest = load_manifest(args.manifest)
    if manifest.kind != "2afc":
        raise UsageError("eval-2afc needs a 2AFC manifest")
    acc = evaluator.evaluate_2afc(_metric(args), manifest)
    print(f"{acc:.6f}")
    return 0


def cmd_distance(args) -> int:
    ref = decode_image(args.ref)
    dist = decode_image(args.dist)
    if ref.shape != dist.shape:
        raise UsageError(f"image sizes differ: {ref.shape[2:]} vs {dist.shape[2:]}")
    d = _metric(args)(ref.data, dist.data)
    print(f"{d:.6f}")
    return 0


def cmd_viz_diff(args) -> int:
    model = _load_model(args.checkpoint, "perceptnet")
    ref, dist = decode_image(args.ref), decode_image(args.dist)
    if ref.shape != dist.shape:
        raise UsageError("image sizes differ")
    if not 1 <= args.top_k <= model.out_channels:
        raise UsageError(f"--top-k must be in [1, {model.out_channels}]")
    index = viz.viz_diff(model, ref.data, dist.data, args.top_k, args.out_dir, args.format)
    print(json.dumps(index, sort_keys=True))
    return 0


def cmd_viz_rf(args) -> int:
    model = _load_model(args.checkpoint, "perceptnet")
    if not 0 <= args.channel < model.out_channels:
        raise UsageError(f"--channel must be in [0, {model.out_channels})")
    if args.size < 4 or args.size & (args.size - 1):
        raise UsageError("--size must be a power of two >= 4")
    viz.viz_rf(model, args.channel, args.size, args.out)
    print(args.out)
    return 0


def cmd_inspect(args) -> int:
    model, header, extra = load_checkpoint(args.checkpoint)
    print(f"model: {model.kind}")
    print(f"config: {json.dumps(header['config'], sort_keys=True)}")
    print(f"seed: {header.get('seed')}  epoch: {header.get('epoch')}")
    print(f"total parameters: {count_parameters(model)}")
    stages = {}
    for name, p in model.parameters().items():
        stage, _, field = name.partition(".")
        stages.setdefault(stage, []).append(f"{field} {tuple(p.shape)}")
    print(f"parameterized stages: {len(stages)}")
    for stage, fields in stages.items():
        print(f"  {stage}: {', '.join(fields)}")
    if extra:
        print(f"extra tensors: {len(extra)} (optimizer state)")
    return 0


def _add_metric_args(p) -> None:
    p.add_argument("--metric", default="perceptnet", choices=evaluator.METRIC_NAMES)
    p.add_argument("--checkpoint", help="checkpoint for learned metrics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perceptdist",
                                     description="Perceptual image distances and their evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train PerceptNet or NLAPD-GDN on a MOS manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--heldout", help="held-out MOS manifest for checkpoint selection")
    p.add_argument("--heldout-fraction", type=float, default=0.0,
                   help="split this fraction of reference images off as held-out")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--model", choices=("perceptnet", "nlapd-gdn"), default="perceptnet")
    p.add_argument("--levels", type=int, default=6, help="pyramid levels for nlapd-gdn")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int)
    p.add_argument("--crop-mode", choices=("random", "center"), default="random")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--resume", help="continue from a last.pnet checkpoint")
    p.add_argument("--wall-time", action="store_true", help="record epoch wall time in the log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Pearson/Spearman of a metric against MOS")
    p.add_argument("--manifest", required=True)
    _add_metric_args(p)
    p.add_argument("--name", help="dataset name for the report")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--json", help="also write the report as JSON to this path")
    p.add_argument("--dump-csv", help="write per-sample distances to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-2afc", help="2AFC accuracy of a metric on a triplet manifest")
    p.add_argument("--manifest", required=True)
    _add_metric_args(p)
    p.set_defaults(func=cmd_eval_2afc)

    p = sub.add_parser("distance", help="distance between two images")
    p.add_argument("ref")
    p.add_argument("dist")
    _add_metric_args(p)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("viz-diff", help="write the channels that differ most between two images")
    p.add_argument("ref")
    p.add_argument("dist")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.set_defaults(func=cmd_viz_diff)

    p = sub.add_parser("viz-rf", help="Fourier magnitude of a channel's receptive field")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_rf)

    p = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _threads():
            return args.func(args)
    except evaluator.EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (UsageError, ManifestError, ImageDecodeError, ckpt.CheckpointError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
