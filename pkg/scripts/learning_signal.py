#!/usr/bin/env python3
"""Desk-scale learning-signal experiment.

Trains the default configuration on synthetic moving shapes and reports:
    - total loss at the end vs. its moving average around step 10
    - frozen-feature k-NN accuracy on the shape split, before and after training
    - how often transport refinement separates object maps better than raw
      cross-attention for a randomly initialized encoder

Usage:
    python scripts/learning_signal.py --out runs/signal
    python scripts/learning_signal.py --out runs/signal --steps 200 --seed 3
    python scripts/learning_signal.py --out runs/signal --skip-training   # separation only

Exit status is 0 when every check passes, 1 otherwise.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from vidssl.config import ConfigManager
from vidssl.data import load_dataset
from vidssl.evaluation import FeatureBank, extract_features, knn_accuracy
from vidssl.synthetic import gen_synthetic_clip, read_shape_split, write_synthetic_dataset
from vidssl.tracker import separation, track_clip
from vidssl.trainer import Trainer, build_network
from vidssl.utils import derive_seed

logger = logging.getLogger("learning_signal")

LOSS_DROP = 0.20
KNN_GAIN = 0.10
SEPARATION_RATE = 0.90


def knn_score(encoder, data: Path, k: int) -> float:
    """k-NN accuracy of frozen [CLS] features on shapes/train -> shapes/test."""
    train_images, train_labels = read_shape_split(data / "shapes" / "train")
    test_images, test_labels = read_shape_split(data / "shapes" / "test")
    bank = FeatureBank.build(extract_features(encoder, train_images), train_labels)
    return knn_accuracy(bank, extract_features(encoder, test_images), test_labels, k)


def separation_rate(config, n_clips: int, seed: int) -> float:
    """Fraction of (clip, frame) pairs where refined maps are no more similar than raw maps."""
    encoder = build_network(config, seed=seed).encoder.eval()
    wins, total = 0, 0
    for c in range(n_clips):
        clip = gen_synthetic_clip(config.tracker.k, config.model.image_size, config.data.T,
                                  derive_seed(seed, "data", 1000 + c))
        result = track_clip(encoder, clip.frames, config.tracker.k,
                            derive_seed(seed, "heads", 1000 + c), config.tracker)
        for refined, raw in zip(result.maps, result.raw_maps):
            wins += separation(refined.T) <= separation(raw.T)
            total += 1
    return wins / total


def loss_drop(losses: list) -> float:
    """Relative drop of the final 10-step mean against the mean of steps 5..14."""
    early = float(np.mean(losses[5:15]))
    late = float(np.mean(losses[-10:]))
    return (early - late) / early


def main():
    """Run the experiment and print a pass/fail summary."""
    parser = argparse.ArgumentParser(description="Desk-scale learning-signal experiment")
    parser.add_argument("--out", type=Path, required=True, help="Working directory (dataset and run)")
    parser.add_argument("--steps", type=int, default=500, help="Training steps (default: 500)")
    parser.add_argument("--seed", type=int, default=0, help="Root seed (default: 0)")
    parser.add_argument("--clips", type=int, default=8, help="Synthetic training clips (default: 8)")
    parser.add_argument("--n-shapes", type=int, default=60, help="Images per shape split (default: 60)")
    parser.add_argument("--neighbors", type=int, default=20, help="k of the k-NN classifier (default: 20)")
    parser.add_argument("--separation-clips", type=int, default=20,
                        help="Clips for the separation statistic (default: 20)")
    parser.add_argument("--skip-training", action="store_true", help="Only compute the separation statistic")
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format='[%(asctime)s] %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr
    )

    mgr = ConfigManager()
    mgr.apply_overrides([f"train.total_steps={args.steps}", f"train.seed={args.seed}"])
    mgr.validate()
    config = mgr.config
    checks = []

    rate = separation_rate(config, args.separation_clips, args.seed)
    checks.append(("refinement separates maps", rate >= SEPARATION_RATE, f"{rate:.1%} of frames"))

    if not args.skip_training:
        data = args.out / "data"
        write_synthetic_dataset(data, args.clips, config.tracker.k, config.model.image_size,
                                config.data.T, args.seed, args.n_shapes)
        before = knn_score(build_network(config).encoder.eval(), data, args.neighbors)

        trainer = Trainer(config)
        history = trainer.run(load_dataset(data), args.out / "run")
        after = knn_score(trainer.teacher.encoder.eval(), data, args.neighbors)

        drop = loss_drop([m.loss_total for m in history])
        checks.append(("loss decreases", drop >= LOSS_DROP, f"{drop:.1%} below the step-10 average"))
        checks.append(("k-NN improves", after - before >= KNN_GAIN,
                       f"{before:.3f} -> {after:.3f} ({(after - before) * 100:+.1f} points)"))

    print("\n" + "=" * 60)
    print("LEARNING SIGNAL")
    print("=" * 60)
    for name, ok, detail in checks:
        print(f"{'✅' if ok else '❌'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
