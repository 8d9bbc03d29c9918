"""Teacher-student self-distillation: projection head, EMA, centering, losses.

The student and teacher share the same encoder and projection head
architecture. The student is trained by gradient descent; the teacher is
an exponential moving average of the student and provides sharpened,
centered target distributions.

Losses are cross-entropies H(teacher, student) summed over their terms:
    - multi_object_loss: teacher global view u vs. student masked view v
      (object i), over ordered view pairs u != v: 2k terms for two views
    - local_loss: teacher global view v vs. student local crop i: 2m terms
    - total_loss: per-frame sums averaged over the T frames of a clip
"""

import logging
import math
from collections import Counter
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import HeadConfig
from .utils import VidsslError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


class DistillError(VidsslError):
    """Invalid input to the head, EMA or loss functions."""
    pass


class ProjectionHead(nn.Module):
    """MLP head d -> 4d -> 4d -> d (bottleneck) -> D logits.

    The bottleneck output is L2-normalized before the final bias-free layer.
    """

    def __init__(self, dim: int, out_dim: int = 256, hidden_ratio: int = 4):
        super().__init__()
        if out_dim < 2:
            raise DistillError(f"Head output dimension must be >= 2, got {out_dim}")
        hidden = dim * hidden_ratio
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )
        self.last_layer = nn.Linear(dim, out_dim, bias=False)
        self.out_dim = out_dim
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.normalize(self.mlp(x), dim=-1, p=2)
        return self.last_layer(x)


def head_forward(
    head: ProjectionHead,
    cls_embed: torch.Tensor,
    role: str,
    cfg: HeadConfig = HeadConfig(),
    center: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Map [CLS] embeddings to probability vectors.

    Args:
        head: Projection head.
        cls_embed: (..., d) embeddings.
        role: ``student`` -> softmax(logits / τs);
            ``teacher`` -> softmax((logits - center) / τt).
        cfg: Temperatures.
        center: Teacher center (length D); zeros when omitted.

    Raises:
        DistillError: On an unknown role or non-finite logits.
    """
    logits = head(cls_embed)
    return probabilities(logits, role, cfg, center)


def probabilities(
    logits: torch.Tensor,
    role: str,
    cfg: HeadConfig = HeadConfig(),
    center: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled softmax of head logits for the given role."""
    if not torch.isfinite(logits).all():
        raise DistillError("Projection head produced non-finite logits")
    if role == "student":
        return torch.softmax(logits / cfg.student_temp, dim=-1)
    if role == "teacher":
        if center is not None:
            logits = logits - center
        return torch.softmax(logits / cfg.teacher_temp, dim=-1)
    raise DistillError(f"Unknown head role {role!r}; expected student or teacher")


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    """In-place θ′ ← α·θ′ + (1 − α)·θ over matching parameters."""
    if not 0.0 <= alpha <= 1.0:
        raise DistillError(f"EMA alpha must be in [0, 1], got {alpha}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise DistillError("Teacher and student parameter sets differ")
    for name, p_t in t_params.items():
        p_s = s_params[name]
        if p_t.shape != p_s.shape:
            raise DistillError(f"Shape mismatch for {name}: {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
        p_t.mul_(alpha).add_(p_s.detach(), alpha=1.0 - alpha)


@torch.no_grad()
def center_update(center: torch.Tensor, batch_mean: torch.Tensor, momentum: float) -> torch.Tensor:
    """center ← m·center + (1 − m)·batch_mean."""
    return center * momentum + batch_mean.detach() * (1.0 - momentum)


def ema_alpha(step: int, total: int, base: float, schedule: str = "constant") -> float:
    """Teacher momentum at a step: constant, or cosine increase from base to 1.

    Examples:
        >>> ema_alpha(0, 100, 0.996, "cosine")
        0.996
        >>> ema_alpha(100, 100, 0.996, "cosine")
        1.0
    """
    if schedule == "constant" or total <= 0:
        return base
    if schedule != "cosine":
        raise DistillError(f"Unknown EMA schedule {schedule!r}")
    progress = min(max(step / total, 0.0), 1.0)
    return 1.0 - (1.0 - base) * (math.cos(math.pi * progress) + 1.0) / 2.0


def cross_entropy(teacher_p: torch.Tensor, student_p: torch.Tensor) -> torch.Tensor:
    """H(t, s) = −Σ t·log(s + 1e-12) over the last dimension."""
    return -(teacher_p * torch.log(student_p + LOG_EPS)).sum(dim=-1)


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy −Σ p·log p (0·log 0 = 0)."""
    return -(torch.special.xlogy(p, p)).sum(dim=-1)


def multi_object_loss(
    teacher_out: torch.Tensor,
    student_out: torch.Tensor,
    counter: Optional[Counter] = None,
) -> torch.Tensor:
    """Σ_{u≠v} Σ_i H(teacher(X^u), student(X^{v,o_i})).

    Args:
        teacher_out: (V, D) teacher distributions of the global views.
        student_out: (V, k, D) student distributions of the masked views.
        counter: Incremented under ``"object"`` once per cross-entropy term.
    """
    if teacher_out.dim() != 2 or student_out.dim() != 3 or student_out.shape[0] != teacher_out.shape[0]:
        raise DistillError(
            f"Expected teacher (V, D) and student (V, k, D) outputs, got "
            f"{tuple(teacher_out.shape)} and {tuple(student_out.shape)}"
        )
    if student_out.shape[1] < 1:
        raise DistillError("Student outputs are missing masked object views")
    V, k = student_out.shape[0], student_out.shape[1]
    loss = teacher_out.new_zeros(())
    for u in range(V):
        for v in range(V):
            if u == v:
                continue
            loss = loss + cross_entropy(teacher_out[u].unsqueeze(0), student_out[v]).sum()
            if counter is not None:
                counter["object"] += k
    return loss


def local_loss(
    teacher_out: torch.Tensor,
    student_local_out: torch.Tensor,
    counter: Optional[Counter] = None,
) -> torch.Tensor:
    """Σ_v Σ_i H(teacher(X^v), student(X^{ℓ_i})).

    Args:
        teacher_out: (V, D) teacher distributions of the global views.
        student_local_out: (m, D) student distributions of the local crops.
        counter: Incremented under ``"local"`` once per cross-entropy term.
    """
    if teacher_out.dim() != 2 or student_local_out.dim() != 2:
        raise DistillError(
            f"Expected teacher (V, D) and local (m, D) outputs, got "
            f"{tuple(teacher_out.shape)} and {tuple(student_local_out.shape)}"
        )
    if student_local_out.shape[0] < 1:
        raise DistillError("Student outputs are missing local crops")
    pairs = cross_entropy(teacher_out.unsqueeze(1), student_local_out.unsqueeze(0))
    if counter is not None:
        counter["local"] += pairs.numel()
    return pairs.sum()


def total_loss(obj_losses: Sequence[torch.Tensor], local_losses: Sequence[torch.Tensor]) -> torch.Tensor:
    """(1/T)·Σ_t (L_t^O + L_t^LC)."""
    if len(obj_losses) == 0:
        raise DistillError("Cannot average losses over an empty clip")
    if len(obj_losses) != len(local_losses):
        raise DistillError(
            f"Got {len(obj_losses)} object losses but {len(local_losses)} local losses"
        )
    per_frame = [_as_loss(o) + _as_loss(l) for o, l in zip(obj_losses, local_losses)]
    return torch.stack(per_frame).mean()


def _as_loss(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.tensor(float(value), dtype=torch.float64)
