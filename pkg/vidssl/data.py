"""Clip Sampling, Multi-Crop Views and Prefetching Loader.

This module turns a set of videos into training batches:

- sample_clip / sample_clip_cut_aware: choose T frames spaced ``stride``
  apart, optionally rejecting clips that span a shot cut
- base_crop: one square window per clip, reused for every frame
- make_views: 2 global and m local RandomResizedCrop-style views with
  flip, color jitter and grayscale, recording the crop geometry so view
  pixels map back to base-crop coordinates
- build_batch: the batch for one training step, a pure function of
  (config, seed, step, dataset)
- ClipLoader: background thread that prefetches batches into a bounded queue

Within a clip every frame shares the base window, the view geometry and the
augmentation parameters, so tracked objects stay geometrically aligned
across frames.

Example:
    >>> dataset = load_dataset("data/synth")
    >>> with ClipLoader(dataset, config, start_step=0, end_step=10) as loader:
    ...     for step, batch in loader:
    ...         print(step, len(batch.clips))
"""

import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .config import Config, DataConfig
from .frames import DataError, VideoSource, open_video
from .utils import derive_seed, rng_stream

logger = logging.getLogger(__name__)

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
CROP_ATTEMPTS = 10
BRIGHTNESS = 0.4
CONTRAST = 0.4
SATURATION = 0.2


class ClipSamplingError(DataError):
    """The video is too short for the requested clip or crop."""
    pass


class ClipExhaustedError(ClipSamplingError):
    """No clip of the requested length avoids every shot cut."""
    pass


@dataclass(frozen=True)
class ClipSpec:
    """T frame indices start, start + stride, ..., start + (T-1)·stride."""
    start: int
    T: int
    stride: int

    @property
    def end(self) -> int:
        return self.start + (self.T - 1) * self.stride

    @property
    def indices(self) -> List[int]:
        return [self.start + i * self.stride for i in range(self.T)]


@dataclass(frozen=True)
class ViewGeometry:
    """Where a view came from in its base crop.

    Attributes:
        top, left, height, width: Crop rectangle in base-crop pixels
        size: Output side length of the view
        scale: Crop area as a fraction of the base-crop area
        flipped: Horizontal flip applied after resizing
        jitter: (brightness, contrast, saturation) factors, or None if not applied
        grayscale: Grayscale conversion applied
    """
    top: int
    left: int
    height: int
    width: int
    size: int
    scale: float
    flipped: bool
    jitter: Optional[Tuple[float, float, float]]
    grayscale: bool


@dataclass
class ViewSet:
    """Views of one frame.

    Attributes:
        global_views: (2, C, G, G) tensor
        local_views: (m, C, L, L) tensor
        global_geometry: Geometry of each global view
        local_geometry: Geometry of each local view
        seed: Augmentation seed the views were drawn from
    """
    global_views: torch.Tensor
    local_views: torch.Tensor
    global_geometry: List[ViewGeometry]
    local_geometry: List[ViewGeometry]
    seed: int


@dataclass
class ClipSample:
    """One clip of a batch: its source, frame indices and per-frame views."""
    video: str
    spec: ClipSpec
    window: Tuple[int, int]
    views: List[ViewSet]
    seed: int


@dataclass
class Batch:
    step: int
    clips: List[ClipSample]


def _frame_count(src: Union[VideoSource, int]) -> int:
    return src if isinstance(src, int) else src.frame_count


def valid_starts(frame_count: int, T: int, stride: int, cuts: Sequence[int] = ()) -> List[int]:
    """Every start whose clip fits in the video and crosses no cut.

    A clip crosses cut c when start < c <= end: a clip may begin exactly on
    the first frame of a new shot.
    """
    span = (T - 1) * stride
    starts = range(0, frame_count - span)
    if not cuts:
        return list(starts)
    return [s for s in starts if not any(s < c <= s + span for c in cuts)]


def crosses_cut(spec: ClipSpec, cuts: Sequence[int]) -> bool:
    return any(spec.start < c <= spec.end for c in cuts)


def sample_clip(src: Union[VideoSource, int], T: int, stride: int, seed: int) -> ClipSpec:
    """Uniformly random valid clip; reproducible by seed.

    Raises:
        ClipSamplingError: If the video holds fewer than (T-1)·stride + 1 frames.
    """
    if T < 1 or stride < 1:
        raise ClipSamplingError(f"T and stride must be >= 1, got T={T}, stride={stride}")
    frame_count = _frame_count(src)
    n_valid = frame_count - (T - 1) * stride
    if n_valid <= 0:
        raise ClipSamplingError(
            f"Video with {frame_count} frames is too short for T={T}, stride={stride}"
        )
    start = int(rng_stream(seed, "data").integers(0, n_valid))
    return ClipSpec(start=start, T=T, stride=stride)


def sample_clip_cut_aware(
    src: VideoSource,
    T: int,
    stride: int,
    seed: int,
    max_retries: int = 100,
) -> ClipSpec:
    """Like sample_clip, but never returns a clip spanning a cut.

    Draws up to ``max_retries`` uniform candidates; if all of them cross a
    cut, falls back to a uniform draw among the enumerated valid starts.

    Raises:
        ClipSamplingError: If the video is too short.
        ClipExhaustedError: If every possible clip spans a cut.
    """
    if not src.cuts:
        return sample_clip(src, T, stride, seed)
    frame_count = src.frame_count
    n_candidates = frame_count - (T - 1) * stride
    if n_candidates <= 0:
        raise ClipSamplingError(
            f"Video with {frame_count} frames is too short for T={T}, stride={stride}"
        )
    rng = rng_stream(seed, "data")
    for attempt in range(max_retries):
        spec = ClipSpec(start=int(rng.integers(0, n_candidates)), T=T, stride=stride)
        if not crosses_cut(spec, src.cuts):
            return spec
        logger.debug(f"Clip {spec.indices} of {src.name} crosses a cut (attempt {attempt + 1})")
    starts = valid_starts(frame_count, T, stride, src.cuts)
    if not starts:
        raise ClipExhaustedError(
            f"No clip of T={T}, stride={stride} in {src.name} avoids the cuts {list(src.cuts)}"
        )
    return ClipSpec(start=int(starts[int(rng.integers(0, len(starts)))]), T=T, stride=stride)


def choose_window(frame_shape: Tuple[int, ...], size: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Random (top, left) of a size × size window inside an (..., H, W) frame."""
    h, w = frame_shape[-2], frame_shape[-1]
    if h < size or w < size:
        raise ClipSamplingError(f"Frame {h}x{w} is smaller than the {size}x{size} base crop")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def base_crop(
    frame: torch.Tensor,
    size: int,
    window: Optional[Tuple[int, int]] = None,
    seed: Optional[int] = None,
) -> torch.Tensor:
    """Crop a size × size window from a (C, H, W) frame.

    Args:
        window: (top, left); drawn from the ``augment`` stream of ``seed`` when omitted.

    Raises:
        ClipSamplingError: If the frame is smaller than the crop or the window falls outside it.
    """
    if window is None:
        window = choose_window(frame.shape, size, rng_stream(seed or 0, "augment"))
    top, left = window
    h, w = frame.shape[-2], frame.shape[-1]
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ClipSamplingError(f"Window {window} of size {size} exceeds frame {h}x{w}")
    return frame[..., top:top + size, left:left + size]


def sample_crop(
    side: int,
    scale: Tuple[float, float],
    rng: np.random.Generator,
) -> Tuple[int, int, int, int, float]:
    """RandomResizedCrop parameters (top, left, height, width, area scale) in a side × side image."""
    area = side * side
    log_ratio = (math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1]))
    for _ in range(CROP_ATTEMPTS):
        target = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= side and 0 < h <= side:
            top = int(rng.integers(0, side - h + 1))
            left = int(rng.integers(0, side - w + 1))
            return top, left, h, w, h * w / area
    return 0, 0, side, side, 1.0


def _augment(view: torch.Tensor, cfg: DataConfig, rng: np.random.Generator):
    flipped = bool(rng.random() < cfg.flip_p)
    if flipped:
        view = TF.hflip(view)
    jitter = None
    if rng.random() < cfg.jitter_p:
        jitter = (
            float(rng.uniform(1 - BRIGHTNESS, 1 + BRIGHTNESS)),
            float(rng.uniform(1 - CONTRAST, 1 + CONTRAST)),
            float(rng.uniform(1 - SATURATION, 1 + SATURATION)),
        )
        view = TF.adjust_brightness(view, jitter[0]).clamp(0.0, 1.0)
        view = TF.adjust_contrast(view, jitter[1]).clamp(0.0, 1.0)
        if view.shape[0] == 3:
            view = TF.adjust_saturation(view, jitter[2]).clamp(0.0, 1.0)
    grayscale = bool(rng.random() < cfg.gray_p)
    if grayscale and view.shape[0] == 3:
        view = TF.rgb_to_grayscale(view, num_output_channels=3)
    return view.clamp(0.0, 1.0), flipped, jitter, grayscale


def _make_view(base: torch.Tensor, size: int, scale: Tuple[float, float], cfg: DataConfig,
               rng: np.random.Generator) -> Tuple[torch.Tensor, ViewGeometry]:
    top, left, h, w, area_scale = sample_crop(base.shape[-1], scale, rng)
    view = TF.resized_crop(base, top, left, h, w, [size, size], antialias=True)
    view, flipped, jitter, grayscale = _augment(view, cfg, rng)
    geometry = ViewGeometry(top=top, left=left, height=h, width=w, size=size, scale=area_scale,
                            flipped=flipped, jitter=jitter, grayscale=grayscale)
    return view, geometry


def make_views(
    base: torch.Tensor,
    seed: int,
    cfg: DataConfig = DataConfig(),
    global_size: int = 64,
    local_size: int = 32,
    n_global: int = 2,
) -> ViewSet:
    """Two global and m local augmented views of a square base crop.

    Identical seeds give identical views and geometry, which is how all
    frames of a clip share one set of crops.
    """
    if base.dim() != 3 or base.shape[-1] != base.shape[-2]:
        raise DataError(f"Expected a square (C, S, S) base crop, got shape {tuple(base.shape)}")
    rng = rng_stream(seed, "augment")
    global_views, global_geometry = [], []
    for _ in range(n_global):
        view, geometry = _make_view(base, global_size, cfg.global_scale, cfg, rng)
        global_views.append(view)
        global_geometry.append(geometry)
    local_views, local_geometry = [], []
    for _ in range(cfg.n_local):
        view, geometry = _make_view(base, local_size, cfg.local_scale, cfg, rng)
        local_views.append(view)
        local_geometry.append(geometry)
    local_tensor = (torch.stack(local_views) if local_views
                    else base.new_zeros((0, base.shape[0], local_size, local_size)))
    return ViewSet(global_views=torch.stack(global_views), local_views=local_tensor,
                   global_geometry=global_geometry, local_geometry=local_geometry, seed=seed)


def map_to_base(geometry: ViewGeometry, y: float, x: float) -> Tuple[float, float]:
    """Map a view pixel coordinate (pixel centers at integers) to base-crop coordinates."""
    if geometry.flipped:
        x = geometry.size - 1 - x
    yb = geometry.top + (y + 0.5) * geometry.height / geometry.size - 0.5
    xb = geometry.left + (x + 0.5) * geometry.width / geometry.size - 0.5
    return yb, xb


def map_from_base(geometry: ViewGeometry, yb: float, xb: float) -> Tuple[float, float]:
    """Inverse of map_to_base."""
    y = (yb - geometry.top + 0.5) * geometry.size / geometry.height - 0.5
    x = (xb - geometry.left + 0.5) * geometry.size / geometry.width - 0.5
    if geometry.flipped:
        x = geometry.size - 1 - x
    return y, x


def patch_center(row: int, col: int, patch_size: int) -> Tuple[float, float]:
    """View pixel coordinate of a patch's center."""
    offset = (patch_size - 1) / 2.0
    return row * patch_size + offset, col * patch_size + offset


class ClipDataset:
    """A list of videos clips are sampled from."""

    def __init__(self, videos: Sequence[VideoSource]):
        if not videos:
            raise DataError("Dataset contains no videos")
        self.videos = list(videos)

    def __len__(self) -> int:
        return len(self.videos)


def load_dataset(root: Union[str, Path]) -> ClipDataset:
    """Open a dataset directory.

    Accepts a synthetic dataset (``clips/<id>/``), a directory of video
    directories, or a single video directory.

    Raises:
        DataError: If the directory is missing or holds no frames.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Data directory not found: {root}")
    clips_root = root / "clips" if (root / "clips").is_dir() else root
    if any(p.name.startswith("frame_") for p in clips_root.iterdir()):
        return ClipDataset([open_video(clips_root)])
    videos = [open_video(p) for p in sorted(clips_root.iterdir()) if p.is_dir()]
    if not videos:
        raise DataError(f"No videos found under {root}")
    logger.info(f"Loaded dataset {root} with {len(videos)} videos")
    return ClipDataset(videos)


def build_clip(video: VideoSource, config: Config, seed: int) -> ClipSample:
    """Sample a clip from one video and build its per-frame views."""
    d, m = config.data, config.model
    if d.cut_aware:
        spec = sample_clip_cut_aware(video, d.T, d.stride, seed, d.max_retries)
    else:
        spec = sample_clip(video, d.T, d.stride, seed)
    frames = [video.load(i) for i in spec.indices]
    window = choose_window(frames[0].shape, d.base_crop_size, rng_stream(seed, "augment", 0))
    view_seed = derive_seed(seed, "augment", 1)
    views = [
        make_views(base_crop(f, d.base_crop_size, window), view_seed, d, m.image_size, m.local_size)
        for f in frames
    ]
    return ClipSample(video=video.name, spec=spec, window=window, views=views, seed=seed)


def build_batch(dataset: ClipDataset, config: Config, step: int) -> Batch:
    """The batch for one training step; a pure function of (config, step, dataset)."""
    seed = config.train.seed
    clips = []
    for c in range(config.data.clips_per_step):
        rng = rng_stream(seed, "data", step, c)
        video = dataset.videos[int(rng.integers(0, len(dataset)))]
        clips.append(build_clip(video, config, int(rng.integers(0, 2 ** 31))))
    return Batch(step=step, clips=clips)


_DONE = object()


class ClipLoader:
    """Background producer of training batches.

    A daemon thread builds the batches for steps [start_step, end_step) in
    order and puts them into a bounded queue; iteration consumes them. Errors
    raised in the producer are re-raised in the consumer.

    Attributes:
        dataset: Videos to sample from
        config: Full configuration (data, model sizes, seed)
    """

    def __init__(self, dataset: ClipDataset, config: Config, start_step: int, end_step: int):
        self.dataset = dataset
        self.config = config
        self.start_step = start_step
        self.end_step = end_step
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, config.data.prefetch))
        self._running = False
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        """Start the producer thread."""
        if self._running:
            logger.warning("ClipLoader already running")
            return
        self._running = True
        self._thread = threading.Thread(target=self._run_loop, daemon=True)
        self._thread.start()
        logger.debug(f"ClipLoader started for steps {self.start_step}..{self.end_step - 1}")

    def stop(self) -> None:
        """Stop the producer thread, discarding buffered batches."""
        if not self._running:
            return
        self._running = False
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        if self._thread:
            self._thread.join(timeout=5)
            self._thread = None
        logger.debug("ClipLoader stopped")

    def _put(self, item) -> bool:
        while self._running:
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run_loop(self) -> None:
        try:
            for step in range(self.start_step, self.end_step):
                if not self._put((step, build_batch(self.dataset, self.config, step))):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[Tuple[int, Batch]]:
        if not self._running:
            self.start()
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def __enter__(self) -> "ClipLoader":
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()
