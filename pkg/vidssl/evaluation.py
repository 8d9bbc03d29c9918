"""Frozen-Feature Evaluation Module.

Desk-scale probing protocols for a trained encoder:

- k-NN classification on L2-normalized [CLS] features (cosine distance)
- Linear probe: logistic regression on frozen features
- Attention-mass masks, largest-component bounding boxes, IoU, Jaccard
- CorLoc: fraction of images whose predicted box hits a ground-truth box
  with IoU >= 0.5, using single-image discovery from the head-averaged
  [CLS]-attention
- Jaccard of tracked object masks against ground-truth masks

Key Classes:
    BoxRect: Inclusive pixel box (x = column, y = row)
    FeatureBank: Labeled reference features for k-NN

Reports are written as ``report.csv`` (metric,value) plus per-image
``details.jsonl``.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .config import TrackerConfig
from .encoder import VisionTransformer, encode
from .tracker import cls_attention, object_masks, track_clip, upsample_map
from .utils import VidsslError

logger = logging.getLogger(__name__)

CORLOC_IOU = 0.5
MASS_RTOL = 1e-12


class EvaluationError(VidsslError):
    """Invalid evaluation input (empty masks, mismatched sizes, small banks)."""
    pass


@dataclass(frozen=True)
class BoxRect:
    """Inclusive pixel bounds; x indexes columns and y indexes rows."""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise EvaluationError(f"Invalid box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    def as_list(self) -> List[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class FeatureBank:
    """Reference features with integer class labels.

    Attributes:
        features: (N, d) float64 array
        labels: (N,) int array
        normalized: Whether rows are L2-normalized
    """
    features: np.ndarray
    labels: np.ndarray
    normalized: bool = True

    @classmethod
    def build(cls, features, labels, normalize: bool = True) -> "FeatureBank":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise EvaluationError(f"Features {features.shape} and labels {labels.shape} do not match")
        if normalize:
            features = l2_normalize(features)
        return cls(features=features, labels=labels, normalized=normalize)

    def __len__(self) -> int:
        return self.features.shape[0]


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_classify(bank: FeatureBank, query, k: int = 20) -> int:
    """Majority label among the k nearest bank rows by cosine distance.

    Ties in the vote go to the class with the smaller mean distance among
    its neighbors, then to the lower class id. Equal distances rank the
    earlier bank row first.

    Raises:
        EvaluationError: If the bank holds fewer than k rows.
    """
    if k < 1 or len(bank) < k:
        raise EvaluationError(f"k-NN needs at least k={k} bank rows, have {len(bank)}")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bank.features.shape[1],):
        raise EvaluationError(f"Query of shape {q.shape} does not match bank dim {bank.features.shape[1]}")
    feats = bank.features if bank.normalized else l2_normalize(bank.features)
    distances = 1.0 - feats @ l2_normalize(q)
    nearest = np.argsort(distances, kind="stable")[:k]
    labels = bank.labels[nearest]
    best = None
    for label in np.unique(labels):
        members = labels == label
        key = (-int(members.sum()), float(distances[nearest][members].mean()), int(label))
        if best is None or key < best:
            best = key
    return best[2]


def knn_accuracy(bank: FeatureBank, queries, labels, k: int = 20) -> float:
    """Fraction of queries whose k-NN prediction equals their label."""
    queries = np.asarray(queries, dtype=np.float64)
    predictions = [knn_classify(bank, q, k) for q in queries]
    return float(accuracy_score(np.asarray(labels), predictions))


def linear_probe(train_feats, train_labels, test_feats, test_labels, seed: int = 0) -> float:
    """Test accuracy of a logistic-regression classifier on frozen features."""
    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    model.fit(np.asarray(train_feats, dtype=np.float64), np.asarray(train_labels))
    predictions = model.predict(np.asarray(test_feats, dtype=np.float64))
    return float(accuracy_score(np.asarray(test_labels), predictions))


def _resize_images(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-2:] != (size, size):
        logger.warning(f"Resizing {tuple(images.shape[-2:])} images to {size}x{size}")
        images = TF.resize(images, [size, size], antialias=True)
    return images


@torch.no_grad()
def extract_features(
    encoder: VisionTransformer,
    images: torch.Tensor,
    batch_size: int = 64,
    size: Optional[int] = None,
) -> np.ndarray:
    """Frozen [CLS] embeddings of an (N, C, H, W) image tensor."""
    encoder.eval()
    if size is not None:
        images = _resize_images(images, size)
    chunks = [encoder(images[i:i + batch_size]).to(torch.float64).numpy()
              for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def attention_to_mask(values, mass: float = 0.8) -> np.ndarray:
    """Keep the largest values until they hold ``mass`` of the total.

    Sorts descending and keeps the smallest prefix whose cumulative sum
    reaches mass·total; every value tied with the last kept value is kept
    too. Zeros are never kept.

    Examples:
        >>> attention_to_mask([0.5, 0.3, 0.2]).tolist()
        [True, True, False]

    Raises:
        EvaluationError: For negative values or a non-positive total.
    """
    arr = np.asarray(values, dtype=np.float64)
    if not 0.0 < mass <= 1.0:
        raise EvaluationError(f"mass must be in (0, 1], got {mass}")
    if (arr < 0).any():
        raise EvaluationError("Attention map has negative values")
    total = arr.sum()
    if not total > 0:
        raise EvaluationError("Attention map has zero total mass")
    flat = arr.ravel()
    ordered = np.sort(flat)[::-1]
    cumulative = np.cumsum(ordered)
    goal = mass * total * (1.0 - MASS_RTOL)
    cut = int(np.searchsorted(cumulative, goal, side="left"))
    threshold = ordered[min(cut, ordered.size - 1)]
    return (arr >= threshold) & (arr > 0)


def bounding_box(mask) -> BoxRect:
    """Tight box of the largest 4-connected component (lowest label on size ties).

    Raises:
        EvaluationError: For an empty mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise EvaluationError(f"Expected a 2-D mask, got shape {mask.shape}")
    labeled, count = ndimage.label(mask)
    if count == 0:
        raise EvaluationError("Cannot box an empty mask")
    sizes = np.bincount(labeled.ravel())[1:]
    largest = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labeled == largest)
    return BoxRect(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def iou(a: BoxRect, b: BoxRect) -> float:
    """Intersection over union of two inclusive boxes."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0) + 1
    iy = min(a.y1, b.y1) - max(a.y0, b.y0) + 1
    inter = max(ix, 0) * max(iy, 0)
    return inter / (a.area + b.area - inter)


def jaccard(pred, gt) -> float:
    """|pred ∩ gt| / |pred ∪ gt| of binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise EvaluationError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def corloc(predictions: Sequence[BoxRect], gts: Sequence[Sequence[BoxRect]]) -> float:
    """Percentage of images whose predicted box has IoU >= 0.5 with some ground-truth box."""
    if len(predictions) != len(gts):
        raise EvaluationError(f"{len(predictions)} predictions for {len(gts)} images")
    if not predictions:
        raise EvaluationError("CorLoc needs at least one image")
    hits = sum(any(iou(p, g) >= CORLOC_IOU for g in boxes) for p, boxes in zip(predictions, gts))
    return 100.0 * hits / len(predictions)


def discover_object(encoder: VisionTransformer, image: torch.Tensor, mass: float = 0.8) -> Tuple[np.ndarray, BoxRect]:
    """Single-image object discovery from the head-averaged [CLS]-attention.

    Returns:
        (binary mask at image resolution, box of its largest component)
    """
    out = encode(encoder, image)
    attention = cls_attention(out.attn).mean(dim=0)
    heat = upsample_map(attention, (out.rows, out.cols), tuple(image.shape[-2:]))
    mask = attention_to_mask(heat.numpy(), mass)
    return mask, bounding_box(mask)


def corloc_protocol(
    encoder: VisionTransformer,
    images: torch.Tensor,
    gt_boxes: Sequence[Sequence[BoxRect]],
    mass: float = 0.8,
    names: Optional[Sequence[str]] = None,
) -> Tuple[float, List[dict]]:
    """CorLoc of single-image discovery over an (N, C, H, W) image tensor.

    Ground-truth boxes must be given in the images' own pixel coordinates.
    """
    if images.shape[0] != len(gt_boxes):
        raise EvaluationError(f"{images.shape[0]} images for {len(gt_boxes)} ground-truth lists")
    predictions, details = [], []
    for i in range(images.shape[0]):
        _, box = discover_object(encoder, images[i], mass)
        best = max(iou(box, g) for g in gt_boxes[i])
        predictions.append(box)
        details.append({
            "image": names[i] if names else str(i),
            "iou": best,
            "correct": bool(best >= CORLOC_IOU),
            "box": box.as_list(),
        })
    return corloc(predictions, gt_boxes), details


def jaccard_protocol(
    teacher: VisionTransformer,
    clips: Sequence[Tuple[str, torch.Tensor, np.ndarray]],
    k: int,
    seed: int,
    cfg: TrackerConfig = TrackerConfig(),
    mass: float = 0.8,
) -> Tuple[float, List[dict]]:
    """Mean Jaccard between tracked object masks and ground truth.

    Each ground-truth object is scored against the best-matching of the k
    tracked masks in the same frame.

    Args:
        clips: (name, (T, C, H, W) frames, (T, n, H, W) boolean masks) triples.
    """
    scores, details = [], []
    for clip_index, (name, frames, gt_masks) in enumerate(clips):
        result = track_clip(teacher, frames, k, seed + clip_index, cfg)
        h, w = frames.shape[-2:]
        for t in range(frames.shape[0]):
            predicted = [attention_to_mask(m.numpy(), mass) if m.sum() > 0 else np.zeros((h, w), bool)
                         for m in object_masks(result, t, (h, w))]
            for j in range(gt_masks.shape[1]):
                best = max(jaccard(p, gt_masks[t, j]) for p in predicted)
                scores.append(best)
                details.append({"image": f"{name}/{t:06d}", "object": j, "jaccard": best})
    if not scores:
        raise EvaluationError("No frames to evaluate")
    return float(np.mean(scores)), details


def write_report(
    out_dir: Union[str, Path],
    metrics: Dict[str, float],
    details: Sequence[dict] = (),
) -> Tuple[Path, Path]:
    """Write ``report.csv`` (metric,value) and ``details.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = out_dir / "report.csv"
    lines = ["metric,value"] + [f"{name},{value:.9g}" for name, value in metrics.items()]
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    details_path = out_dir / "details.jsonl"
    with details_path.open("w", encoding="utf-8") as f:
        for row in details:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    logger.info(f"Report written to {report}")
    return report, details_path
