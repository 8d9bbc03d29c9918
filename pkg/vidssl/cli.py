"""Command-line entry point.

Usage:
    python -m vidssl synth --out data --n-clips 8 --n-shapes 60
    python -m vidssl train --data data --out run --set total_steps=200
    python -m vidssl track --checkpoint run/last.dora --clip data/clips/clip_0000 --out tracks
    python -m vidssl eval --checkpoint run/last.dora --data data --protocol knn

Exit codes:
    0   success
    1   configuration error, or an output path that cannot be written
    2   data, checkpoint or dataset/protocol error
    3   numeric failure (non-finite loss, gradient or activation)
    64  usage error
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torchvision.transforms.functional as TF

from .checkpoint import CheckpointError
from .config import Config, ConfigError, ConfigManager
from .data import load_dataset
from .encoder import NumericOverflowError
from .evaluation import (
    EvaluationError,
    FeatureBank,
    corloc_protocol,
    extract_features,
    jaccard_protocol,
    knn_accuracy,
    linear_probe,
    write_report,
)
from .frames import DataError, open_video, read_frame, write_frame, write_mask
from .synthetic import clip_dirs, mask_box, read_clip_masks, read_manifest, read_shape_split, write_synthetic_dataset
from .tracker import object_masks, overlay, track_clip
from .trainer import NumericFailure, Trainer, load_teacher
from .transport import TransportError
from .utils import VidsslError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_USAGE = 64

OVERLAY_NAME = "overlay_{:06d}.ppm"
MAP_NAME = "map_obj{}_{:06d}.pgm"
PROTOCOLS = ("knn", "linear", "corloc", "jaccard")


class ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit status 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML configuration file")
    common.add_argument("--seed", type=int, help="Root seed of every random stream (overrides train.seed)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set tracker.k=2 (repeatable)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    parser = ArgumentParser(
        prog="vidssl",
        description="Self-supervised video pretraining with multi-object tracking.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    train = sub.add_parser("train", parents=[common], help="Train student and EMA teacher")
    train.add_argument("--data", type=Path, required=True, help="Dataset directory")
    train.add_argument("--out", type=Path, required=True, help="Output directory (checkpoints, metrics.csv)")
    train.add_argument("--resume", type=Path, help="Checkpoint to continue from")

    track = sub.add_parser("track", parents=[common], help="Export tracked object maps and overlays")
    track.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint holding the teacher")
    track.add_argument("--clip", type=Path, required=True,
                       help="Clip directory of frame_%%06d.ppm files, or a single PPM image")
    track.add_argument("--out", type=Path, required=True, help="Output directory")
    track.add_argument("--k", type=int, help="Objects to track (default: tracker.k)")
    track.add_argument("--no-overlay", action="store_true", help="Write raw maps only (required for k > 3)")

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic moving-shapes dataset")
    synth.add_argument("--out", type=Path, required=True, help="Dataset directory to create")
    synth.add_argument("--n-clips", type=int, default=8, help="Number of clips (default: 8)")
    synth.add_argument("--n-objects", type=int, default=3, help="Objects per clip (default: 3)")
    synth.add_argument("--size", type=int, default=64, help="Frame side length (default: 64)")
    synth.add_argument("--T", type=int, default=4, help="Frames per clip (default: 4)")
    synth.add_argument("--n-shapes", type=int, default=0,
                       help="Images per split of the shape-classification set (default: 0, none)")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint's frozen teacher")
    ev.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint holding the teacher")
    ev.add_argument("--data", type=Path, required=True, help="Synthetic dataset directory")
    ev.add_argument("--protocol", choices=PROTOCOLS, required=True, help="Evaluation protocol")
    ev.add_argument("--out", type=Path, help="Report directory (default: next to the checkpoint)")
    ev.add_argument("--neighbors", type=int, default=20, help="k of the k-NN classifier (default: 20)")
    ev.add_argument("--mass", type=float, default=0.8, help="Attention mass kept in masks (default: 0.8)")
    return parser


def load_config(args) -> Config:
    """Config from --config, then --set overrides, then --seed."""
    mgr = ConfigManager(args.config)
    apply_cli_overrides(mgr, args)
    return mgr.config


def apply_cli_overrides(mgr: ConfigManager, args) -> None:
    mgr.apply_overrides(args.overrides)
    if args.seed is not None:
        mgr.config.train.seed = args.seed
    mgr.validate()


def _teacher(args):
    """Teacher encoder and its config (checkpoint echo plus command-line overrides)."""
    network, config = load_teacher(args.checkpoint)
    if args.overrides or args.seed is not None:
        mgr = ConfigManager.from_config(config)
        apply_cli_overrides(mgr, args)
        config = mgr.config
    return network.encoder, config


def _fit_frames(frames: torch.Tensor, size: int) -> torch.Tensor:
    if frames.shape[-2:] != (size, size):
        logger.warning(f"Resizing {tuple(frames.shape[-2:])} frames to the model's {size}x{size}")
        frames = TF.resize(frames, [size, size], antialias=True)
    return frames


def _read_clip(path: Path) -> torch.Tensor:
    if path.is_file():
        return read_frame(path).unsqueeze(0)
    video = open_video(path)
    return torch.stack([video.load(i) for i in range(video.frame_count)])


def cmd_train(args) -> int:
    config = load_config(args)
    dataset = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    ConfigManager.from_config(config).save(args.out / "config.yaml")
    trainer = Trainer(config)
    if args.resume:
        trainer.resume(args.resume)
    trainer.run(dataset, args.out)
    return EXIT_OK


def cmd_track(args) -> int:
    encoder, config = _teacher(args)
    k = config.tracker.k if args.k is None else args.k
    if k > 3 and not args.no_overlay:
        raise ConfigError(f"Overlays encode at most 3 objects (got k={k}); pass --no-overlay")
    frames = _fit_frames(_read_clip(args.clip), config.model.image_size)
    result = track_clip(encoder, frames, k, config.train.seed, config.tracker)

    args.out.mkdir(parents=True, exist_ok=True)
    target = tuple(frames.shape[-2:])
    for t in range(frames.shape[0]):
        maps = object_masks(result, t, target)
        for i, m in enumerate(maps):
            write_mask(args.out / MAP_NAME.format(i, t), m)
        if not args.no_overlay:
            write_frame(args.out / OVERLAY_NAME.format(t), overlay(frames[t], maps))
    logger.info(f"Tracked {k} objects over {frames.shape[0]} frames with heads {list(result.heads.indices)}")
    print(f"wrote {frames.shape[0]} frames of {k} object maps to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = load_config(args)
    entries = write_synthetic_dataset(args.out, args.n_clips, args.n_objects, args.size, args.T,
                                      config.train.seed, args.n_shapes)
    print(f"wrote {len(entries)} clips to {args.out}")
    return EXIT_OK


def _clip_ground_truth(data: Path, size: int):
    manifest = read_manifest(data)
    clips = []
    for entry, clip_dir in zip(manifest, clip_dirs(data, manifest)):
        video = open_video(clip_dir)
        frames = torch.stack([video.load(t) for t in range(entry.T)])
        if frames.shape[-2:] != (size, size):
            raise EvaluationError(
                f"{clip_dir} frames are {tuple(frames.shape[-2:])}; the model expects {size}x{size}"
            )
        clips.append((entry.clip_id, frames, read_clip_masks(clip_dir, entry.n_objects, entry.T)))
    if not clips:
        raise EvaluationError(f"No clips listed in {data}")
    return clips


def _shape_split(data: Path, split: str):
    directory = data / "shapes" / split
    if not directory.is_dir():
        raise EvaluationError(f"{data} has no shapes/{split} split; generate it with synth --n-shapes")
    return read_shape_split(directory)


def cmd_eval(args) -> int:
    encoder, config = _teacher(args)
    size = config.model.image_size
    details: List[dict] = []
    if args.protocol in ("knn", "linear"):
        train_images, train_labels = _shape_split(args.data, "train")
        test_images, test_labels = _shape_split(args.data, "test")
        train_feats = extract_features(encoder, train_images, size=size)
        test_feats = extract_features(encoder, test_images, size=size)
        if args.protocol == "knn":
            bank = FeatureBank.build(train_feats, train_labels)
            metrics = {"knn_accuracy": knn_accuracy(bank, test_feats, test_labels, args.neighbors)}
        else:
            metrics = {"linear_accuracy": linear_probe(train_feats, train_labels, test_feats, test_labels,
                                                       seed=config.train.seed)}
    elif args.protocol == "corloc":
        clips = _clip_ground_truth(args.data, size)
        images = torch.cat([frames for _, frames, _ in clips])
        names = [f"{name}/{t:06d}" for name, frames, _ in clips for t in range(frames.shape[0])]
        boxes = [[mask_box(m) for m in masks[t] if m.any()] for _, _, masks in clips for t in range(masks.shape[0])]
        value, details = corloc_protocol(encoder, images, boxes, args.mass, names)
        metrics = {"corloc": value}
    else:
        clips = _clip_ground_truth(args.data, size)
        value, details = jaccard_protocol(encoder, clips, config.tracker.k, config.train.seed,
                                          config.tracker, args.mass)
        metrics = {"jaccard": value}

    out = args.out or args.checkpoint.parent / f"eval_{args.protocol}"
    write_report(out, metrics, details)
    for name, value in metrics.items():
        print(f"{name} {value:.6f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "track": cmd_track, "synth": cmd_synth, "eval": cmd_eval}


def exit_code(error: BaseException) -> int:
    """Map an exception to the process exit status."""
    if isinstance(error, (NumericFailure, NumericOverflowError, TransportError)):
        return EXIT_NUMERIC
    if isinstance(error, (DataError, CheckpointError, EvaluationError)):
        return EXIT_DATA
    return EXIT_CONFIG


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='[%(asctime)s] %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr
    )
    try:
        return COMMANDS[args.command](args)
    except (VidsslError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return 130
