"""Object Discovery and Tracking Module.

Discovers k objects in the reference frame of a clip from the teacher's
multi-head [CLS]-attention, refines the object prototypes with an optimal
transport plan against the patch embeddings, and tracks the objects through
the remaining frames by cross-attention against each frame's patch keys.
The resulting per-object maps are upsampled and used as soft masks on the
student's global views.

Pipeline for one clip (t0 = first frame):
    1. cls_attention:   h attention rows [CLS] -> patches
    2. sample_heads:    k distinct heads, one subset per clip
    3. object_prototypes: P = A_I · Q̃
    4. refine_prototypes: M* = sinkhorn(P · Z̃ᵀ), P′ = row-normalized M* · Z̃
    5. cross_attention: T′_t = softmax(P′ · K̃_tᵀ / √d) for every frame t
    6. upsample_map + apply_mask: X ⊙ 𝐓^i

All functions are pure; track_clip encodes frames under torch.no_grad and
never touches the encoder's parameters.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .config import TrackerConfig
from .encoder import EncoderOutput, HeadConfigError, VisionTransformer, encode_batch
from .transport import SinkhornConfig, TransportPlan, sinkhorn
from .utils import VidsslError, rng_stream

logger = logging.getLogger(__name__)

STOCHASTIC_ATOL = 1e-4


class TrackerError(VidsslError):
    """Shape or dimension mismatch in a tracking operation."""
    pass


class ContractViolation(TrackerError):
    """An input broke an operation's precondition (e.g. non row-stochastic attention)."""
    pass


@dataclass(frozen=True)
class HeadSubset:
    """k distinct attention heads used to seed object discovery."""
    indices: Tuple[int, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.indices)


@dataclass
class ObjectPrototypes:
    """k × d prototype matrix; raw (P) or transport-refined (P′)."""
    P: torch.Tensor
    refined: bool = False

    @property
    def k(self) -> int:
        return self.P.shape[0]


@dataclass
class CrossAttentionMap:
    """k × n row-stochastic map of objects over the patches of one frame."""
    T: torch.Tensor
    frame_index: int
    refined: bool


@dataclass
class TrackResult:
    """Everything track_clip produces for one clip.

    Attributes:
        maps: Per-frame maps used for masking (refined unless refinement is off)
        raw_maps: Per-frame maps from the unrefined prototypes
        plan: Transport plan at t0 (None when refinement is off)
        heads: Head subset used for discovery
        prototypes: Prototypes used for tracking
        raw_prototypes: Prototypes before refinement
        rows, cols: Token grid of the tracked frames
    """
    maps: List[CrossAttentionMap]
    raw_maps: List[CrossAttentionMap]
    plan: Optional[TransportPlan]
    heads: HeadSubset
    prototypes: ObjectPrototypes
    raw_prototypes: ObjectPrototypes
    rows: int
    cols: int


def sinkhorn_config(cfg: TrackerConfig) -> SinkhornConfig:
    return SinkhornConfig(epsilon=cfg.epsilon, tolerance=cfg.sk_tolerance,
                          max_iterations=cfg.sk_max_iterations)


def cls_attention(attn: torch.Tensor) -> torch.Tensor:
    """Return the [CLS] -> patch attention of every head.

    Args:
        attn: h × (n+1) × (n+1) attention stack, each matrix row-stochastic.

    Returns:
        h × n tensor: row 0 of each matrix restricted to the patch columns.

    Raises:
        ContractViolation: If the stack is malformed or not row-stochastic.
    """
    if attn.dim() != 3 or attn.shape[1] != attn.shape[2] or attn.shape[1] < 2:
        raise ContractViolation(f"Expected an h×(n+1)×(n+1) attention stack, got {tuple(attn.shape)}")
    if (attn < 0).any():
        raise ContractViolation("Attention matrices contain negative entries")
    row_sums = attn.sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=STOCHASTIC_ATOL):
        worst = float((row_sums - 1).abs().max())
        raise ContractViolation(f"Attention matrices are not row-stochastic (max row deviation {worst:.2e})")
    return attn[:, 0, 1:]


def sample_heads(h: int, k: int, seed: int) -> HeadSubset:
    """Draw k distinct head indices uniformly without replacement.

    Raises:
        HeadConfigError: If k > h; the final block's head count must be
            raised with ``model.last_block_heads``.
    """
    if k < 1:
        raise HeadConfigError(f"Object count k must be >= 1, got {k}")
    if k > h:
        raise HeadConfigError(
            f"Cannot discover k={k} objects with {h} heads; "
            f"set model.last_block_heads >= {k} to reconfigure the final block"
        )
    rng = rng_stream(seed, "heads")
    indices = rng.choice(h, size=k, replace=False)
    return HeadSubset(indices=tuple(int(i) for i in indices), seed=seed)


def object_prototypes(A_I: torch.Tensor, Q_patches: torch.Tensor) -> ObjectPrototypes:
    """Raw prototypes P = A_I · Q̃ (k × d)."""
    if A_I.dim() != 2 or Q_patches.dim() != 2 or A_I.shape[1] != Q_patches.shape[0]:
        raise TrackerError(
            f"Cannot multiply attention {tuple(A_I.shape)} with patch queries {tuple(Q_patches.shape)}"
        )
    return ObjectPrototypes(P=A_I @ Q_patches, refined=False)


def refine_prototypes(
    prototypes: ObjectPrototypes,
    Z_patches: torch.Tensor,
    cfg: SinkhornConfig = SinkhornConfig(),
) -> Tuple[TransportPlan, ObjectPrototypes]:
    """Refine prototypes with the transport plan between objects and patches.

    Solves M* = sinkhorn(P · Z̃ᵀ) in float64 and pools the patch embeddings
    with the plan's rows normalized to sum to one, so each refined prototype
    is a convex combination of patch embeddings (k=1 gives the patch mean).

    Returns:
        (plan, refined prototypes)
    """
    P = prototypes.P
    if P.dim() != 2 or Z_patches.dim() != 2 or P.shape[1] != Z_patches.shape[1]:
        raise TrackerError(
            f"Prototype dim {tuple(P.shape)} does not match patch embeddings {tuple(Z_patches.shape)}"
        )
    Z64 = Z_patches.detach().to(torch.float64)
    plan = sinkhorn(P.detach().to(torch.float64) @ Z64.T, cfg)
    weights = plan.M / plan.M.sum(dim=1, keepdim=True)
    refined = (weights @ Z64).to(Z_patches.dtype)
    return plan, ObjectPrototypes(P=refined, refined=True)


def cross_attention(
    prototypes: ObjectPrototypes,
    K_patches: torch.Tensor,
    d: Optional[int] = None,
    frame_index: int = 0,
) -> CrossAttentionMap:
    """Track objects into a frame: T = row-softmax(P · K̃ᵀ / √d)."""
    P = prototypes.P
    if K_patches.dim() != 2 or P.shape[1] != K_patches.shape[1]:
        raise TrackerError(f"Prototypes {tuple(P.shape)} do not match keys {tuple(K_patches.shape)}")
    d = d or P.shape[1]
    scores = (P @ K_patches.T) / (d ** 0.5)
    return CrossAttentionMap(T=torch.softmax(scores, dim=-1), frame_index=frame_index,
                             refined=prototypes.refined)


def upsample_map(row: torch.Tensor, grid: Tuple[int, int], target: Tuple[int, int]) -> torch.Tensor:
    """Reshape a length-n row to the token grid, upsample bilinearly, scale peak to 1.

    Args:
        row: Length-n nonnegative vector.
        grid: (rows, cols) with rows·cols = n.
        target: (h, w), integer multiples of the grid.

    Returns:
        h × w map in [0, 1]; an all-zero row stays all-zero.
    """
    rows, cols = grid
    h, w = target
    if row.numel() != rows * cols:
        raise TrackerError(f"Row of length {row.numel()} does not fit a {rows}x{cols} grid")
    if h % rows or w % cols:
        raise TrackerError(f"Target {h}x{w} is not a multiple of the {rows}x{cols} grid")
    image = row.reshape(1, 1, rows, cols)
    up = F.interpolate(image, size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    peak = up.max()
    if peak > 0:
        up = up / peak
    return up.clamp(0.0, 1.0)


def apply_mask(view: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Hadamard product of a (C, H, W) view with an H × W mask repeated over channels."""
    if view.dim() != 3 or mask.shape != view.shape[1:]:
        raise TrackerError(f"Mask {tuple(mask.shape)} does not match view {tuple(view.shape)}")
    return view * mask.unsqueeze(0)


def random_block_mask(
    grid: Tuple[int, int],
    target: Tuple[int, int],
    ratio: float,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Block-wise patch mask covering at least ``ratio`` of the patches.

    Rectangles of random size and aspect ratio are added until the
    coverage is reached; the patch mask is then expanded to pixels.
    """
    rows, cols = grid
    h, w = target
    if h % rows or w % cols:
        raise TrackerError(f"Target {h}x{w} is not a multiple of the {rows}x{cols} grid")
    n = rows * cols
    goal = max(1, int(np.ceil(ratio * n)))
    patch_mask = np.zeros((rows, cols), dtype=bool)
    while patch_mask.sum() < goal:
        remaining = goal - int(patch_mask.sum())
        area = rng.uniform(1, max(1, remaining))
        aspect = np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3)))
        bh = int(np.clip(round(np.sqrt(area * aspect)), 1, rows))
        bw = int(np.clip(round(np.sqrt(area / aspect)), 1, cols))
        top = int(rng.integers(0, rows - bh + 1))
        left = int(rng.integers(0, cols - bw + 1))
        patch_mask[top:top + bh, left:left + bw] = True
    pixels = np.kron(patch_mask, np.ones((h // rows, w // cols), dtype=bool))
    return torch.from_numpy(pixels.astype(np.float32))


def separation(maps: torch.Tensor) -> float:
    """Mean pairwise cosine similarity between the rows of a k × n map (0.0 for k < 2)."""
    k = maps.shape[0]
    if k < 2:
        return 0.0
    unit = F.normalize(maps.to(torch.float64), dim=1)
    sims = unit @ unit.T
    iu = torch.triu_indices(k, k, offset=1)
    return float(sims[iu[0], iu[1]].mean())


def peak_patches(maps: torch.Tensor) -> List[int]:
    """Argmax patch of every row; ties resolve to the lowest patch index."""
    return [int(i) for i in torch.argmax(maps, dim=1)]


def overlay(frame: torch.Tensor, maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Composite up to three object maps over the grayscale frame.

    Object i (0-based) modulates channel i (R, G, B); channels without an
    object carry the plain grayscale value.
    """
    if len(maps) > 3:
        raise TrackerError(f"Overlay supports at most 3 objects, got {len(maps)}")
    gray = TF.rgb_to_grayscale(frame) if frame.shape[0] == 3 else frame[:1]
    gray = gray[0]
    channels = []
    for c in range(3):
        if c < len(maps):
            if maps[c].shape != gray.shape:
                raise TrackerError(f"Map {tuple(maps[c].shape)} does not match frame {tuple(gray.shape)}")
            channels.append(gray * maps[c])
        else:
            channels.append(gray)
    return torch.stack(channels).clamp(0.0, 1.0)


def discover(
    reference: EncoderOutput,
    heads: HeadSubset,
    cfg: TrackerConfig,
) -> Tuple[ObjectPrototypes, Optional[TransportPlan], ObjectPrototypes]:
    """Build raw and (optionally) refined prototypes from the reference frame.

    Returns:
        (raw prototypes, transport plan or None, prototypes used for tracking)
    """
    A = cls_attention(reference.attn)
    if max(heads.indices) >= A.shape[0]:
        raise HeadConfigError(f"Head subset {heads.indices} exceeds the {A.shape[0]} available heads")
    A_I = A[list(heads.indices)]
    raw = object_prototypes(A_I, reference.Q[1:])
    if not cfg.refine:
        return raw, None, raw
    plan, refined = refine_prototypes(raw, reference.Z_track[1:], sinkhorn_config(cfg))
    return raw, plan, refined


def track_outputs(
    outputs: Sequence[EncoderOutput],
    heads: HeadSubset,
    cfg: TrackerConfig,
) -> TrackResult:
    """Track objects through pre-computed teacher outputs (outputs[0] is t0).

    A single output is the single-image mode: keys come from the same image.
    """
    if not outputs:
        raise TrackerError("Cannot track an empty clip")
    reference = outputs[0]
    raw, plan, used = discover(reference, heads, cfg)
    d = reference.Q.shape[1]
    maps, raw_maps = [], []
    for t, out in enumerate(outputs):
        if (out.rows, out.cols) != (reference.rows, reference.cols):
            raise TrackerError(f"Frame {t} grid {out.rows}x{out.cols} differs from the reference grid")
        keys = out.K[1:]
        raw_map = cross_attention(raw, keys, d, frame_index=t)
        raw_maps.append(raw_map)
        maps.append(cross_attention(used, keys, d, frame_index=t) if plan is not None else raw_map)
    if plan is not None and not plan.converged:
        logger.warning(f"Tracking with unconverged transport plan (error {plan.marginal_error:.2e})")
    return TrackResult(maps=maps, raw_maps=raw_maps, plan=plan, heads=heads, prototypes=used,
                       raw_prototypes=raw, rows=reference.rows, cols=reference.cols)


def track_clip(
    teacher: VisionTransformer,
    clip: torch.Tensor,
    k: int,
    seed: int,
    cfg: TrackerConfig = TrackerConfig(),
) -> TrackResult:
    """Discover k objects in frame 0 of a clip and track them through all frames.

    Args:
        teacher: Encoder whose parameters are read, never written.
        clip: (T, C, H, W) tensor of frames (T = 1 for single-image mode).
        k: Number of objects.
        seed: Seed of the ``heads`` stream (one head subset per clip).
        cfg: Tracker settings (ε, tolerance, refinement toggle).

    Returns:
        TrackResult with one map per frame.
    """
    if clip.dim() == 3:
        clip = clip.unsqueeze(0)
    if clip.dim() != 4 or clip.shape[0] < 1:
        raise TrackerError(f"Expected a (T, C, H, W) clip, got shape {tuple(clip.shape)}")
    outputs = encode_batch(teacher, clip)
    heads = sample_heads(outputs[0].heads, k, seed)
    logger.debug(f"Tracking {k} objects over {clip.shape[0]} frames with heads {heads.indices}")
    return track_outputs(outputs, heads, cfg)


def object_masks(
    result: TrackResult,
    frame_index: int,
    target: Tuple[int, int],
) -> List[torch.Tensor]:
    """Upsampled per-object masks of one tracked frame."""
    T = result.maps[frame_index].T
    return [upsample_map(T[i], (result.rows, result.cols), target) for i in range(T.shape[0])]
