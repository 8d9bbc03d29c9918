"""Synthetic moving-shapes videos with ground truth.

Generates small clips of distinct-colored shapes (disc, square, triangle)
moving over a textured background, together with per-frame, per-object
binary masks and tight bounding boxes. Each object lives in its own
vertical band of the frame, so masks are disjoint by construction and every
object is visible in every frame.

Also produces a 3-class shape-classification split (one shape per image)
used by the frozen-feature k-NN and linear-probe protocols.

Dataset layout written by write_synthetic_dataset:
    <root>/manifest.txt                     clip_id n_objects T seed
    <root>/clips/<id>/frame_%06d.ppm
    <root>/clips/<id>/mask_obj<j>_%06d.pgm
    <root>/shapes/{train,test}/img_%06d.ppm
    <root>/shapes/{train,test}/labels.txt   filename label
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from .evaluation import BoxRect
from .frames import (
    DataError,
    FRAME_NAME,
    read_frame,
    read_mask,
    write_frame,
    write_mask,
)
from .utils import derive_seed, rng_stream

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("disc", "square", "triangle")
PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
], dtype=np.float32)
MIN_RADIUS = 2
MASK_NAME = "mask_obj{}_{:06d}.pgm"
MANIFEST_NAME = "manifest.txt"
LABELS_NAME = "labels.txt"
IMAGE_NAME = "img_{:06d}.ppm"


class OvercrowdedError(DataError):
    """The requested objects do not fit in the frame."""
    pass


@dataclass(frozen=True)
class ObjectMotion:
    """Trajectory of one object: center(t) = start + velocity·t + amplitude·sin(freq·t)."""
    kind: str
    color: Tuple[float, float, float]
    radius: int
    band: Tuple[int, int]
    start: Tuple[float, float]
    velocity: Tuple[float, float]
    amplitude: Tuple[float, float]
    frequency: float

    def center(self, t: int, size: int) -> Tuple[float, float]:
        """(cy, cx) at frame t, clamped so the shape stays inside its band."""
        cy = self.start[0] + self.velocity[0] * t + self.amplitude[0] * np.sin(self.frequency * t)
        cx = self.start[1] + self.velocity[1] * t + self.amplitude[1] * np.sin(self.frequency * t)
        lo_x, hi_x = self.band[0] + self.radius, self.band[1] - 1 - self.radius
        cy = float(np.clip(cy, self.radius, size - 1 - self.radius))
        cx = float(np.clip(cx, lo_x, hi_x))
        return cy, cx


@dataclass
class SyntheticClip:
    """A generated clip.

    Attributes:
        frames: (T, 3, H, W) float32 tensor in [0, 1]
        masks: (T, n_objects, H, W) boolean array
        boxes: boxes[t][j], tight box of object j's mask at frame t
        motions: Per-object motion parameters
        seed: Generator seed
    """
    frames: torch.Tensor
    masks: np.ndarray
    boxes: List[List[BoxRect]]
    motions: List[ObjectMotion]
    seed: int

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def n_objects(self) -> int:
        return self.masks.shape[1]


def shape_mask(kind: str, size: int, cy: float, cx: float, r: int) -> np.ndarray:
    """Boolean size × size mask of a shape centered at (cy, cx) with radius r."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "triangle":
        top = cy - r
        return (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - top) / 2.0 + 0.5)
    raise DataError(f"Unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def mask_box(mask: np.ndarray) -> BoxRect:
    """Tight inclusive box of a non-empty boolean mask (x = column, y = row)."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DataError("Cannot box an empty mask")
    return BoxRect(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """(3, size, size) smooth gray-toned noise texture."""
    base = rng.uniform(0.35, 0.55)
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2.0)
    noise = noise / (np.abs(noise).max() + 1e-8)
    tint = rng.uniform(-0.05, 0.05, size=3)
    texture = base + 0.12 * noise[None, :, :] + tint[:, None, None]
    return np.clip(texture, 0.0, 1.0).astype(np.float32)


def gen_synthetic_clip(
    n_objects: int = 3,
    size: int = 64,
    T: int = 4,
    seed: int = 0,
    static: bool = False,
) -> SyntheticClip:
    """Generate a clip of n_objects moving shapes.

    Args:
        n_objects: Number of shapes (>= 1).
        size: Frame side in pixels.
        T: Number of frames.
        seed: Seed; the clip is a pure function of the arguments.
        static: Keep every object still (identical masks across frames).

    Raises:
        OvercrowdedError: If the per-object bands are too narrow for a shape.
    """
    if n_objects < 1:
        raise DataError(f"n_objects must be >= 1, got {n_objects}")
    if T < 1:
        raise DataError(f"T must be >= 1, got {T}")
    band_width = size // n_objects
    max_radius = min(band_width // 2 - 1, size // 2 - 1)
    if max_radius < MIN_RADIUS:
        raise OvercrowdedError(
            f"{n_objects} objects need bands of at least {2 * MIN_RADIUS + 2} px; "
            f"a {size} px frame gives {band_width} px"
        )

    rng = rng_stream(seed, "data")
    background = textured_background(size, rng)
    colors = PALETTE[rng.permutation(len(PALETTE))]
    motions = []
    for j in range(n_objects):
        band = (j * band_width, (j + 1) * band_width)
        radius = int(rng.integers(max(MIN_RADIUS, max_radius // 2), max_radius + 1))
        lo_x, hi_x = band[0] + radius, band[1] - 1 - radius
        start = (float(rng.uniform(radius, size - 1 - radius)), float(rng.uniform(lo_x, hi_x)))
        if static:
            velocity, amplitude, frequency = (0.0, 0.0), (0.0, 0.0), 0.0
        else:
            velocity = (float(rng.uniform(-2.0, 2.0)), float(rng.uniform(-1.0, 1.0)))
            curved = bool(rng.integers(0, 2))
            amplitude = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 1.5))) if curved else (0.0, 0.0)
            frequency = float(rng.uniform(0.5, 1.5)) if curved else 0.0
        motions.append(ObjectMotion(
            kind=SHAPE_KINDS[j % len(SHAPE_KINDS)],
            color=tuple(float(c) for c in colors[j % len(colors)]),
            radius=radius,
            band=band,
            start=start,
            velocity=velocity,
            amplitude=amplitude,
            frequency=frequency,
        ))

    frames = np.empty((T, 3, size, size), dtype=np.float32)
    masks = np.zeros((T, n_objects, size, size), dtype=bool)
    boxes = []
    for t in range(T):
        frame = background.copy()
        frame_boxes = []
        for j, motion in enumerate(motions):
            cy, cx = motion.center(t, size)
            mask = shape_mask(motion.kind, size, cy, cx, motion.radius)
            masks[t, j] = mask
            frame[:, mask] = np.asarray(motion.color, dtype=np.float32)[:, None]
            frame_boxes.append(mask_box(mask))
        frames[t] = frame
        boxes.append(frame_boxes)
    return SyntheticClip(frames=torch.from_numpy(frames), masks=masks, boxes=boxes,
                         motions=motions, seed=seed)


def gen_shape_image(kind: str, size: int, rng: np.random.Generator) -> Tuple[torch.Tensor, np.ndarray]:
    """One shape of the given kind at a random position, color and scale.

    Returns:
        ((3, size, size) image, boolean mask)
    """
    if kind not in SHAPE_KINDS:
        raise DataError(f"Unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    max_radius = size // 3
    if max_radius < MIN_RADIUS:
        raise OvercrowdedError(f"A {size} px image is too small for a shape")
    image = textured_background(size, rng)
    radius = int(rng.integers(max(MIN_RADIUS, size // 8), max_radius + 1))
    cy = float(rng.uniform(radius, size - 1 - radius))
    cx = float(rng.uniform(radius, size - 1 - radius))
    mask = shape_mask(kind, size, cy, cx, radius)
    color = PALETTE[int(rng.integers(0, len(PALETTE)))]
    image[:, mask] = color[:, None]
    return torch.from_numpy(image), mask


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    n_objects: int
    T: int
    seed: int


def clip_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "data", index) % (2 ** 31)


def write_synthetic_dataset(
    root: Union[str, Path],
    n_clips: int,
    n_objects: int = 3,
    size: int = 64,
    T: int = 4,
    seed: int = 0,
    n_shapes: int = 0,
) -> List[ManifestEntry]:
    """Write clips, masks, manifest and (optionally) the shape split under root.

    Args:
        n_shapes: Images per split in ``shapes/train`` and ``shapes/test``; 0 skips the split.

    Raises:
        DataError: On IO failures.
        OvercrowdedError: If the objects do not fit.
    """
    root = Path(root)
    entries = []
    try:
        clips_dir = root / "clips"
        clips_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_clips):
            entry = ManifestEntry(clip_id=f"clip_{i:04d}", n_objects=n_objects, T=T, seed=clip_seed(seed, i))
            clip = gen_synthetic_clip(n_objects, size, T, entry.seed)
            clip_dir = clips_dir / entry.clip_id
            clip_dir.mkdir(exist_ok=True)
            for t in range(T):
                write_frame(clip_dir / FRAME_NAME.format(t), clip.frames[t])
                for j in range(n_objects):
                    write_mask(clip_dir / MASK_NAME.format(j, t), torch.from_numpy(clip.masks[t, j]))
            entries.append(entry)
        manifest = "".join(f"{e.clip_id} {e.n_objects} {e.T} {e.seed}\n" for e in entries)
        (root / MANIFEST_NAME).write_text(manifest, encoding="utf-8")
        if n_shapes > 0:
            for split_index, split in enumerate(("train", "test")):
                write_shape_split(root / "shapes" / split, n_shapes, size, derive_seed(seed, "data", 1 << 20, split_index))
    except OSError as e:
        raise DataError(f"Failed to write synthetic dataset under {root}: {e}") from e
    logger.info(f"Wrote {n_clips} synthetic clips ({n_objects} objects, T={T}) to {root}")
    return entries


def write_shape_split(directory: Path, n_images: int, size: int, seed: int) -> None:
    """Write n_images labeled single-shape images with balanced classes."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = rng_stream(seed, "data")
    lines = []
    for i in range(n_images):
        label = i % len(SHAPE_KINDS)
        image, _ = gen_shape_image(SHAPE_KINDS[label], size, rng)
        name = IMAGE_NAME.format(i)
        write_frame(directory / name, image)
        lines.append(f"{name} {label}\n")
    (directory / LABELS_NAME).write_text("".join(lines), encoding="utf-8")


def read_manifest(root: Union[str, Path]) -> List[ManifestEntry]:
    """Parse ``manifest.txt`` (``clip_id n_objects T seed`` per line)."""
    path = Path(root) / MANIFEST_NAME
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"Failed to read manifest {path}: {e}") from e
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'clip_id n_objects T seed'")
        try:
            entries.append(ManifestEntry(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: malformed manifest line {line!r}") from e
    return entries


def read_clip_masks(clip_dir: Union[str, Path], n_objects: int, T: int) -> np.ndarray:
    """(T, n_objects, H, W) boolean ground-truth masks of a written clip."""
    clip_dir = Path(clip_dir)
    return np.stack([
        np.stack([read_mask(clip_dir / MASK_NAME.format(j, t)).numpy() > 0.5 for j in range(n_objects)])
        for t in range(T)
    ])


def read_shape_split(directory: Union[str, Path]) -> Tuple[torch.Tensor, np.ndarray]:
    """Load a shape split as ((N, 3, H, W) images, (N,) integer labels)."""
    directory = Path(directory)
    path = directory / LABELS_NAME
    try:
        lines = [l.split() for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    except OSError as e:
        raise DataError(f"Failed to read labels {path}: {e}") from e
    if not lines:
        raise DataError(f"No labeled images in {directory}")
    try:
        labels = np.array([int(label) for _, label in lines], dtype=np.int64)
    except ValueError as e:
        raise DataError(f"{path}: malformed label line") from e
    images = torch.stack([read_frame(directory / name) for name, _ in lines])
    return images, labels


def clip_dirs(root: Union[str, Path], manifest: Optional[List[ManifestEntry]] = None) -> List[Path]:
    """Clip directories of a dataset, in manifest order when a manifest exists."""
    root = Path(root)
    if manifest is None and (root / MANIFEST_NAME).exists():
        manifest = read_manifest(root)
    if manifest:
        return [root / "clips" / e.clip_id for e in manifest]
    return sorted(p for p in (root / "clips").iterdir() if p.is_dir()) if (root / "clips").is_dir() else []
