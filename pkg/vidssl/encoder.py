"""Minimal Vision Transformer Encoder Module.

This module tokenizes frames into non-overlapping patches, runs pre-norm
multi-head self-attention blocks, and exposes what the object tracker needs:
the query and key embeddings and the per-head attention matrices of one
designated block (the last one by default, optionally the second-last).

The module handles:
- Patch extraction and its inverse (raster order, (p1 p2 c) flattening)
- Learned [CLS] token and fixed-resolution positional embeddings, one table
  per supported token grid (global and local views); no interpolation
- Pre-norm transformer blocks (LayerNorm, MSA, GELU MLP)
- An optional different head count for the final block, so the tracker can
  discover more objects than the regular head count allows
- Finite-value checks after every block

Key Classes:
    VisionTransformer: The encoder network (a torch ``nn.Module``)
    EncoderOutput: Per-frame embeddings, queries, keys and attention stack
    PatchGrid: Patch vectors of one frame with their grid geometry

Frames are ``torch`` tensors laid out channels-first (C, H, W) with values
in [0, 1].

Example:
    >>> from vidssl.encoder import VisionTransformer, encode
    >>> model = VisionTransformer(image_size=64, local_size=32, patch_size=8, dim=48, heads=6)
    >>> out = encode(model, torch.rand(3, 64, 64))
    >>> out.attn.shape
    torch.Size([6, 65, 65])
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
from einops import rearrange

from .config import ModelConfig
from .utils import VidsslError, derive_seed

logger = logging.getLogger(__name__)

PATCH_PATTERN = "c (h p1) (w p2) -> (h w) (p1 p2 c)"


class EncoderError(VidsslError):
    """Base class for encoder errors."""
    pass


class SizingError(EncoderError):
    """Frame or grid dimensions are incompatible with the patch size or positional tables."""
    pass


class HeadConfigError(EncoderError):
    """Embedding dimension, head count or tracker layer are inconsistent."""
    pass


class NumericOverflowError(EncoderError):
    """A block produced non-finite activations.

    Attributes:
        layer: Index of the block whose output was non-finite
    """

    def __init__(self, layer: int, message: str = ""):
        self.layer = layer
        super().__init__(message or f"Non-finite activations after block {layer}")


@dataclass(frozen=True)
class PatchGrid:
    """Patch vectors of one frame.

    Attributes:
        patches: n × (p²·c) tensor in raster order
        patch_size: Patch side p
        rows: h / p
        cols: w / p
    """
    patches: torch.Tensor
    patch_size: int
    rows: int
    cols: int

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def index_to_cell(self, index: int) -> tuple:
        """Map a token index to its (row, col) grid cell."""
        if not 0 <= index < self.n:
            raise IndexError(f"Token index {index} outside grid of {self.n} patches")
        return divmod(index, self.cols)

    def cell_to_index(self, row: int, col: int) -> int:
        """Map a (row, col) grid cell to its token index."""
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"Cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col


@dataclass
class EncoderOutput:
    """Encoder output for one frame.

    Attributes:
        Z: (n+1) × d final token embeddings; row 0 is the [CLS] embedding
        Q: (n+1) × d query embeddings of the tracker block
        K: (n+1) × d key embeddings of the tracker block
        attn: h × (n+1) × (n+1) attention matrices of the tracker block
        Z_track: (n+1) × d output of the tracker block (equals Z when it is the last block)
        rows: Token grid rows
        cols: Token grid columns
    """
    Z: torch.Tensor
    Q: torch.Tensor
    K: torch.Tensor
    attn: torch.Tensor
    Z_track: torch.Tensor
    rows: int
    cols: int

    @property
    def cls(self) -> torch.Tensor:
        return self.Z[0]

    @property
    def n(self) -> int:
        return self.Z.shape[0] - 1

    @property
    def heads(self) -> int:
        return self.attn.shape[0]


def patchify(frame: torch.Tensor, p: int) -> PatchGrid:
    """Split a (C, H, W) frame into non-overlapping p×p patches.

    Args:
        frame: Frame tensor, channels first.
        p: Patch size.

    Returns:
        PatchGrid with n = (H/p)·(W/p) patch vectors in raster order; each
        vector is the p×p×c block flattened row-major with channels last.

    Raises:
        SizingError: If H or W is not divisible by p.
    """
    if frame.dim() != 3:
        raise SizingError(f"Expected a (C, H, W) frame, got shape {tuple(frame.shape)}")
    c, h, w = frame.shape
    if p <= 0 or h % p or w % p:
        raise SizingError(f"Frame {h}x{w} is not divisible by patch size {p}")
    patches = rearrange(frame, PATCH_PATTERN, p1=p, p2=p)
    return PatchGrid(patches=patches, patch_size=p, rows=h // p, cols=w // p)


def unpatchify(grid: PatchGrid, channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify`; returns the (C, H, W) frame."""
    p = grid.patch_size
    if grid.patches.shape != (grid.n, p * p * channels):
        raise SizingError(
            f"Patch tensor {tuple(grid.patches.shape)} does not match a "
            f"{grid.rows}x{grid.cols} grid of {p}x{p}x{channels} patches"
        )
    return rearrange(grid.patches, "(h w) (p1 p2 c) -> c (h p1) (w p2)",
                     h=grid.rows, w=grid.cols, p1=p, p2=p, c=channels)


def head_dims(d: int, h: int) -> int:
    """Per-head dimension d/h.

    Raises:
        HeadConfigError: If h < 1 or d is not divisible by h.

    Examples:
        >>> head_dims(384, 16)
        24
    """
    if h < 1 or d % h:
        raise HeadConfigError(f"Embedding dim {d} is not divisible by head count {h}")
    return d // h


def grid_key(rows: int, cols: int) -> str:
    return f"{rows}x{cols}"


class Attention(nn.Module):
    """Multi-head self-attention that also returns queries, keys and attention maps."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dims(dim, heads)
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        qh, kh, vh = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))
        attn = torch.softmax(torch.matmul(qh, kh.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, vh), "b h n d -> b n (h d)")
        return self.proj(out), q, k, attn


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor):
        y, q, k, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, q, k, attn


class VisionTransformer(nn.Module):
    """Vision transformer encoder g_θ.

    Teacher and student are two instances with identical shapes; the trainer
    deep-copies the student to create the teacher.

    Attributes:
        patch_size: Patch side p
        dim: Embedding dimension d
        heads: Head count of the regular blocks
        tracker_block: Index of the block whose attention feeds the tracker
    """

    def __init__(
        self,
        *,
        image_size: int = 64,
        local_size: Optional[int] = 32,
        patch_size: int = 8,
        channels: int = 3,
        dim: int = 48,
        depth: int = 4,
        heads: int = 6,
        last_block_heads: int = 0,
        mlp_ratio: int = 4,
        tracker_layer: str = "last",
    ):
        super().__init__()
        head_dims(dim, heads)
        final_heads = last_block_heads or heads
        head_dims(dim, final_heads)
        if tracker_layer not in ("last", "second_last"):
            raise HeadConfigError(f"tracker_layer must be last or second_last, got {tracker_layer!r}")
        if tracker_layer == "second_last" and depth < 2:
            raise HeadConfigError("tracker_layer=second_last needs depth >= 2")

        self.patch_size = patch_size
        self.channels = channels
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.tracker_block = depth - 1 if tracker_layer == "last" else depth - 2

        self.patch_embed = nn.Linear(patch_size * patch_size * channels, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.ParameterDict()
        for size in (image_size, local_size):
            if size is None:
                continue
            if size % patch_size:
                raise SizingError(f"View size {size} is not divisible by patch size {patch_size}")
            g = size // patch_size
            self.pos_embed[grid_key(g, g)] = nn.Parameter(torch.zeros(1, g * g + 1, dim))
        self.blocks = nn.ModuleList([
            Block(dim, final_heads if i == depth - 1 else heads, mlp_ratio)
            for i in range(depth)
        ])
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self._init_parameters()

    @classmethod
    def from_config(cls, cfg: ModelConfig, seed: Optional[int] = None) -> "VisionTransformer":
        """Build an encoder from a ModelConfig, seeding initialization from the ``init`` stream."""
        def build():
            return cls(
                image_size=cfg.image_size,
                local_size=cfg.local_size,
                patch_size=cfg.patch_size,
                channels=cfg.channels,
                dim=cfg.dim,
                depth=cfg.depth,
                heads=cfg.heads,
                last_block_heads=cfg.last_block_heads,
                mlp_ratio=cfg.mlp_ratio,
                tracker_layer=cfg.tracker_layer,
            )
        if seed is None:
            return build()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "init", 0))
            return build()

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def _init_parameters(self) -> None:
        self.apply(self._init_module)
        nn.init.trunc_normal_(self.cls_token, mean=0.0, std=0.02)
        for table in self.pos_embed.values():
            nn.init.trunc_normal_(table, mean=0.0, std=0.02)

    @property
    def grids(self) -> Sequence[str]:
        return list(self.pos_embed.keys())

    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        """Patch-embed a (B, C, H, W) batch and prepend the [CLS] token."""
        if x.dim() != 4:
            raise SizingError(f"Expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
        b, c, h, w = x.shape
        p = self.patch_size
        if c != self.channels:
            raise SizingError(f"Encoder expects {self.channels} channels, got {c}")
        if h % p or w % p:
            raise SizingError(f"Frame {h}x{w} is not divisible by patch size {p}")
        key = grid_key(h // p, w // p)
        if key not in self.pos_embed:
            raise SizingError(f"No positional embedding for a {key} token grid (have {self.grids})")
        tokens = self.patch_embed(rearrange(x, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=p, p2=p))
        tokens = torch.cat((self.cls_token.expand(b, -1, -1), tokens), dim=1)
        return tokens + self.pos_embed[key]

    def forward_features(self, x: torch.Tensor) -> dict:
        """Run the encoder and collect the tracker block's internals.

        Args:
            x: (B, C, H, W) batch.

        Returns:
            Dict with ``Z`` (B, n+1, d) final embeddings, ``Q``/``K`` (B, n+1, d),
            ``attn`` (B, h, n+1, n+1) and ``Z_track`` (B, n+1, d).

        Raises:
            NumericOverflowError: If any block emits non-finite values.
        """
        tokens = self.tokenize(x)
        captured = {}
        for i, block in enumerate(self.blocks):
            tokens, q, k, attn = block(tokens)
            if not torch.isfinite(tokens).all():
                raise NumericOverflowError(i)
            if i == self.tracker_block:
                captured = {"Q": q, "K": k, "attn": attn, "Z_track": tokens}
        z = self.norm(tokens)
        if self.tracker_block == self.depth - 1:
            captured["Z_track"] = z
        captured["Z"] = z
        return captured

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return the [CLS] embeddings (B, d)."""
        return self.forward_features(x)["Z"][:, 0]


def encode(model: VisionTransformer, frame: torch.Tensor) -> EncoderOutput:
    """Encode a single (C, H, W) frame.

    Deterministic and side-effect free: no gradients are recorded and the
    parameters are only read, so several threads may encode against one
    parameter snapshot.

    Raises:
        SizingError: For frames the encoder cannot tokenize.
        NumericOverflowError: For non-finite activations (with block index).
    """
    if frame.dim() != 3:
        raise SizingError(f"Expected a (C, H, W) frame, got shape {tuple(frame.shape)}")
    p = model.patch_size
    with torch.no_grad():
        feats = model.forward_features(frame.unsqueeze(0))
    return EncoderOutput(
        Z=feats["Z"][0],
        Q=feats["Q"][0],
        K=feats["K"][0],
        attn=feats["attn"][0],
        Z_track=feats["Z_track"][0],
        rows=frame.shape[1] // p,
        cols=frame.shape[2] // p,
    )


def encode_batch(model: VisionTransformer, frames: torch.Tensor) -> list:
    """Encode a (B, C, H, W) batch without gradients into per-frame outputs."""
    p = model.patch_size
    with torch.no_grad():
        feats = model.forward_features(frames)
    rows, cols = frames.shape[2] // p, frames.shape[3] // p
    return [
        EncoderOutput(Z=feats["Z"][i], Q=feats["Q"][i], K=feats["K"][i], attn=feats["attn"][i],
                      Z_track=feats["Z_track"][i], rows=rows, cols=cols)
        for i in range(frames.shape[0])
    ]
