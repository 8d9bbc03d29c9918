"""Frame and Mask File IO Module.

Reads and writes the on-disk formats the rest of the package consumes:
binary PPM (P6, 8-bit RGB) frames, binary PGM (P5, 8-bit) masks and UTF-8
cut lists, and exposes a directory of numbered frames as a VideoSource.

Frames are returned as float32 torch tensors laid out (C, H, W) with values
in [0, 1]; masks as (H, W) tensors.

Directory layout of a video:
    <dir>/frame_000000.ppm, frame_000001.ppm, ...
    <dir>/cuts.txt          (optional) one sorted frame index per line

Example:
    >>> from vidssl.frames import open_video
    >>> video = open_video("data/clips/clip_0000")
    >>> frame = video.load(0)
    >>> frame.shape
    torch.Size([3, 64, 64])
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .utils import VidsslError

logger = logging.getLogger(__name__)

FRAME_NAME = "frame_{:06d}.ppm"
FRAME_RE = re.compile(r"^frame_(\d{6})\.ppm$")
CUTS_NAME = "cuts.txt"


class DataError(VidsslError):
    """Base class for data ingestion and sampling errors."""
    pass


class FrameDecodeError(DataError):
    """A frame or mask file could not be decoded.

    Raised for unreadable files, non-PPM/PGM formats and unsupported modes
    (only 8-bit RGB frames and 8-bit grayscale masks are accepted). Decode
    failures are hard errors; frames are never silently skipped.
    """
    pass


def to_tensor(image: Image.Image) -> torch.Tensor:
    """Convert an 8-bit Pillow image to a float32 tensor in [0, 1] ((C, H, W) or (H, W) for L)."""
    array = np.asarray(image, dtype=np.uint8).astype(np.float32) / 255.0
    if array.ndim == 3:
        array = array.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(array))


def to_image(tensor: torch.Tensor) -> Image.Image:
    """Quantize a [0, 1] tensor ((C, H, W) RGB or (H, W) gray) to an 8-bit Pillow image."""
    array = (tensor.detach().cpu().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()
    if array.ndim == 3:
        if array.shape[0] == 1:
            return Image.fromarray(array[0])
        return Image.fromarray(np.ascontiguousarray(array.transpose(1, 2, 0)))
    return Image.fromarray(array)


def _open(path: Union[str, Path], expected_format: str, expected_mode: str) -> Image.Image:
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != expected_format:
                raise FrameDecodeError(f"{path}: expected {expected_format}, found {img.format}")
            if img.mode != expected_mode:
                raise FrameDecodeError(f"{path}: expected mode {expected_mode}, found {img.mode}")
            return img.copy()
    except FrameDecodeError:
        raise
    except FileNotFoundError as e:
        raise FrameDecodeError(f"Frame file not found: {path}") from e
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise FrameDecodeError(f"Failed to decode {path}: {e}") from e


def read_frame(path: Union[str, Path]) -> torch.Tensor:
    """Read a binary PPM (P6, maxval 255) frame as a (3, H, W) tensor."""
    return to_tensor(_open(path, "PPM", "RGB"))


def write_frame(path: Union[str, Path], frame: torch.Tensor) -> None:
    """Write a (3, H, W) [0, 1] tensor as binary PPM (P6)."""
    if frame.dim() != 3 or frame.shape[0] != 3:
        raise DataError(f"Expected a (3, H, W) frame, got shape {tuple(frame.shape)}")
    path = Path(path)
    try:
        to_image(frame).save(path, format="PPM")
    except OSError as e:
        raise DataError(f"Failed to write frame {path}: {e}") from e


def read_mask(path: Union[str, Path]) -> torch.Tensor:
    """Read a binary PGM (P5) mask as an (H, W) tensor in [0, 1]."""
    return to_tensor(_open(path, "PPM", "L"))


def write_mask(path: Union[str, Path], mask: torch.Tensor) -> None:
    """Write an (H, W) tensor in [0, 1] (or boolean) as binary PGM (P5)."""
    if mask.dim() != 2:
        raise DataError(f"Expected an (H, W) mask, got shape {tuple(mask.shape)}")
    path = Path(path)
    try:
        to_image(mask.to(torch.float32)).save(path, format="PPM")
    except OSError as e:
        raise DataError(f"Failed to write mask {path}: {e}") from e


def read_cut_list(path: Union[str, Path]) -> Tuple[int, ...]:
    """Read a UTF-8 cut list: one strictly increasing integer frame index per line.

    Blank lines are ignored.

    Raises:
        DataError: If the file is unreadable or the indices are malformed or unsorted.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"Failed to read cut list {path}: {e}") from e
    cuts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            cuts.append(int(line))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: not an integer frame index: {line!r}") from e
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise DataError(f"{path}: cut indices must be strictly increasing")
    return tuple(cuts)


@dataclass(frozen=True)
class VideoSource:
    """A video as a sequence of numbered frames.

    Attributes:
        frame_count: Number of frames
        cuts: Sorted frame indices where a new shot starts
        fps: Nominal frame rate
        root: Directory holding ``frame_%06d.ppm`` files (None for in-memory sources)
    """
    frame_count: int
    cuts: Tuple[int, ...] = ()
    fps: float = 30.0
    root: Optional[Path] = None

    def __post_init__(self):
        if self.frame_count < 0:
            raise DataError(f"frame_count must be >= 0, got {self.frame_count}")
        if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
            raise DataError("Cut indices must be strictly increasing")
        if any(not 0 <= c < self.frame_count for c in self.cuts):
            raise DataError(f"Cut indices must lie in [0, {self.frame_count})")

    @property
    def name(self) -> str:
        return self.root.name if self.root is not None else "<memory>"

    def frame_path(self, index: int) -> Path:
        if self.root is None:
            raise DataError("In-memory video source has no frame files")
        if not 0 <= index < self.frame_count:
            raise DataError(f"Frame index {index} outside [0, {self.frame_count})")
        return self.root / FRAME_NAME.format(index)

    def load(self, index: int) -> torch.Tensor:
        """Decode frame ``index`` as a (3, H, W) tensor."""
        return read_frame(self.frame_path(index))


def open_video(directory: Union[str, Path], fps: float = 30.0) -> VideoSource:
    """Open a directory of ``frame_%06d.ppm`` files (plus optional ``cuts.txt``).

    Raises:
        DataError: If the directory is missing, holds no frames, or the
            numbering has gaps.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Video directory not found: {directory}")
    indices = sorted(int(m.group(1)) for p in directory.iterdir() if (m := FRAME_RE.match(p.name)))
    if not indices:
        raise DataError(f"No frame_%06d.ppm files in {directory}")
    if indices != list(range(len(indices))):
        raise DataError(f"Frame numbering in {directory} is not contiguous from 0")
    cuts_path = directory / CUTS_NAME
    cuts = read_cut_list(cuts_path) if cuts_path.exists() else ()
    logger.debug(f"Opened video {directory} with {len(indices)} frames and {len(cuts)} cuts")
    return VideoSource(frame_count=len(indices), cuts=cuts, fps=fps, root=directory)
