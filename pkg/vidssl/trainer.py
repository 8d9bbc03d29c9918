"""Training Loop Module.

Wires the pieces into one training step per batch of clips:

    1. The teacher encodes the two global views of every frame.
    2. The tracker discovers k objects in frame 0 of each global view and
       tracks them through the clip; the upsampled maps mask the student's
       copies of the global views (or random block masks in the ablation).
    3. The student encodes the k masked views per global view and the m
       local crops; the multi-object and local losses are averaged over the
       clip's frames and over the clips of the batch.
    4. The optimizer updates the student, then the teacher follows by EMA
       and the teacher center by its running mean.

The teacher never receives gradients: its parameters have
``requires_grad=False`` and are only written by ema_update.

Outputs of Trainer.run (under ``out_dir``):
    metrics.csv            step,loss_total,loss_obj,loss_local,lr,ema_alpha,sk_err
    ckpt_%06d.dora         every ``train.checkpoint_every`` steps
    last.dora              after the final step
"""

import copy
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from .checkpoint import (
    CheckpointError,
    decode_int,
    decode_text,
    encode_int,
    encode_text,
    load_checkpoint,
    save_checkpoint,
)
from .config import Config, ConfigManager, HeadConfig, OptimConfig
from .data import Batch, ClipDataset, ClipLoader, ClipSample
from .distill import (
    DistillError,
    ProjectionHead,
    center_update,
    ema_alpha,
    ema_update,
    local_loss,
    multi_object_loss,
    probabilities,
    total_loss,
)
from .encoder import EncoderOutput, VisionTransformer
from .tracker import apply_mask, object_masks, random_block_mask, sample_heads, track_outputs
from .utils import VidsslError, derive_seed, format_duration, rng_stream

logger = logging.getLogger(__name__)

METRICS_HEADER = "step,loss_total,loss_obj,loss_local,lr,ema_alpha,sk_err"
METRICS_NAME = "metrics.csv"
LAST_CHECKPOINT = "last.dora"


class TrainingError(VidsslError):
    """Base class for training loop errors."""
    pass


class NumericFailure(TrainingError):
    """A loss or gradient became non-finite; the step was aborted."""
    pass


class Network(nn.Module):
    """Encoder followed by the projection head; forward returns head logits of the [CLS] token."""

    def __init__(self, encoder: VisionTransformer, head: ProjectionHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


def build_network(config: Config, seed: Optional[int] = None) -> Network:
    """Student network initialized from the ``init`` stream of the seed."""
    seed = config.train.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init", 0))
        encoder = VisionTransformer.from_config(config.model)
        head = ProjectionHead(config.model.dim, config.head.out_dim)
    return Network(encoder, head)


def make_teacher(student: Network) -> Network:
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    return teacher


def lr_schedule(step: int, cfg: OptimConfig, total_steps: int) -> float:
    """Linear warmup 0 -> lr over warmup_steps, then cosine decay lr -> min_lr at total_steps.

    Examples:
        >>> lr_schedule(0, OptimConfig(), 500)
        0.0
        >>> lr_schedule(10, OptimConfig(), 500)
        0.0005
    """
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    decay_steps = max(1, total_steps - cfg.warmup_steps)
    progress = min(max((step - cfg.warmup_steps) / decay_steps, 0.0), 1.0)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def param_groups(model: nn.Module) -> List[dict]:
    """Weight-decayed matrices and undecayed biases / norm weights."""
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    return [{"params": decay, "apply_decay": True}, {"params": no_decay, "apply_decay": False}]


def build_optimizer(params: Union[nn.Module, Iterable[torch.Tensor]], cfg: OptimConfig) -> torch.optim.Optimizer:
    """AdamW (decoupled decay) or SGD with momentum.

    A module is split into decayed / undecayed groups; a plain parameter
    list forms one decayed group. Learning rate and decay are set per step
    by optimizer_step.
    """
    groups = param_groups(params) if isinstance(params, nn.Module) else [{"params": list(params), "apply_decay": True}]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                                 weight_decay=0.0, foreach=False)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, weight_decay=0.0, foreach=False)
    raise TrainingError(f"Unknown optimizer {cfg.optimizer!r}")


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float, weight_decay: float) -> None:
    """Apply one update with decoupled weight decay.

    Raises:
        NumericFailure: If any gradient is non-finite; no parameter is changed.
    """
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericFailure(f"Non-finite gradient for a parameter of shape {tuple(p.shape)}")
    is_adamw = isinstance(optimizer, torch.optim.AdamW)
    for group in optimizer.param_groups:
        group["lr"] = lr
        wd = weight_decay if group.get("apply_decay", True) else 0.0
        if is_adamw:
            group["weight_decay"] = wd
        elif wd:
            with torch.no_grad():
                for p in group["params"]:
                    p.mul_(1.0 - lr * wd)
    optimizer.step()


@dataclass
class ClipTargets:
    """Teacher-side products for one clip.

    Attributes:
        teacher_probs: (T, V, D) centered, sharpened teacher distributions
        teacher_logits: (T·V, D) raw teacher logits (for the center update)
        masked_views: (T, V, k, C, G, G) student inputs
        local_views: (T, m, C, L, L) student inputs
        sk_err: Largest transport marginal error over the clip's views
        sk_converged: Whether every transport solve converged
    """
    teacher_probs: torch.Tensor
    teacher_logits: torch.Tensor
    masked_views: torch.Tensor
    local_views: torch.Tensor
    sk_err: float = 0.0
    sk_converged: bool = True
    tracks: list = field(default_factory=list)


@torch.no_grad()
def clip_targets(
    teacher: Network,
    center: torch.Tensor,
    clip: ClipSample,
    config: Config,
    step: int,
    clip_index: int,
) -> ClipTargets:
    """Run the teacher and the tracker on one clip and build the masked student inputs."""
    globals_ = torch.stack([vs.global_views for vs in clip.views])
    T, V, C, G, _ = globals_.shape
    feats = teacher.encoder.forward_features(globals_.reshape(T * V, C, G, G))
    logits = teacher.head(feats["Z"][:, 0])
    probs = probabilities(logits, "teacher", config.head, center).reshape(T, V, -1)

    seed = config.train.seed
    k = config.tracker.k
    p = teacher.encoder.patch_size
    rows = cols = G // p
    heads = sample_heads(feats["attn"].shape[1], k, derive_seed(seed, "heads", step, clip_index))
    masked = globals_.new_empty((T, V, k, C, G, G))
    sk_err, converged, tracks = 0.0, True, []
    for v in range(V):
        if config.tracker.mask_mode == "block":
            rng = rng_stream(seed, "mask", step, clip_index, v)
            masks = [random_block_mask((rows, cols), (G, G), config.tracker.block_mask_ratio, rng)
                     for _ in range(k)]
            # one set of block masks per view, shared by all frames
            for t in range(T):
                for i, mask in enumerate(masks):
                    masked[t, v, i] = apply_mask(globals_[t, v], mask.to(globals_.dtype))
            continue
        outputs = [
            EncoderOutput(Z=feats["Z"][i], Q=feats["Q"][i], K=feats["K"][i], attn=feats["attn"][i],
                          Z_track=feats["Z_track"][i], rows=rows, cols=cols)
            for i in range(v, T * V, V)
        ]
        result = track_outputs(outputs, heads, config.tracker)
        tracks.append(result)
        if result.plan is not None:
            sk_err = max(sk_err, result.plan.marginal_error)
            converged = converged and result.plan.converged
        for t in range(T):
            for i, mask in enumerate(object_masks(result, t, (G, G))):
                masked[t, v, i] = apply_mask(globals_[t, v], mask.to(globals_.dtype))
    locals_ = torch.stack([vs.local_views for vs in clip.views])
    return ClipTargets(teacher_probs=probs, teacher_logits=logits, masked_views=masked,
                       local_views=locals_, sk_err=sk_err, sk_converged=converged, tracks=tracks)


def student_clip_loss(
    student: Network,
    teacher_probs: torch.Tensor,
    masked_views: torch.Tensor,
    local_views: torch.Tensor,
    head_cfg: HeadConfig,
    counter: Optional[Counter] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Clip loss of the student against fixed teacher targets.

    Args:
        teacher_probs: (T, V, D)
        masked_views: (T, V, k, C, G, G)
        local_views: (T, m, C, L, L); m may be 0
        counter: Cross-entropy term counter

    Returns:
        (total, mean object loss per frame, mean local loss per frame)
    """
    T, V, k = masked_views.shape[:3]
    masked_logits = student(masked_views.reshape(T * V * k, *masked_views.shape[3:]))
    masked_probs = probabilities(masked_logits, "student", head_cfg).reshape(T, V, k, -1)
    m = local_views.shape[1]
    if m:
        local_logits = student(local_views.reshape(T * m, *local_views.shape[2:]))
        local_probs = probabilities(local_logits, "student", head_cfg).reshape(T, m, -1)
    obj_terms, local_terms = [], []
    for t in range(T):
        obj_terms.append(multi_object_loss(teacher_probs[t], masked_probs[t], counter))
        local_terms.append(local_loss(teacher_probs[t], local_probs[t], counter) if m
                           else teacher_probs.new_zeros(()))
    total = total_loss(obj_terms, local_terms)
    return total, torch.stack(obj_terms).mean(), torch.stack(local_terms).mean()


@dataclass
class StepMetrics:
    step: int
    loss_total: float
    loss_obj: float
    loss_local: float
    lr: float
    ema_alpha: float
    sk_err: float
    sk_converged: bool = True
    terms: Counter = field(default_factory=Counter)

    def csv_row(self) -> str:
        return (f"{self.step},{self.loss_total:.9g},{self.loss_obj:.9g},{self.loss_local:.9g},"
                f"{self.lr:.9g},{self.ema_alpha:.9g},{self.sk_err:.9g}")


class Trainer:
    """Owns the student, teacher, center, optimizer and step counter.

    Attributes:
        config: Full configuration
        student: Gradient-trained network
        teacher: EMA copy of the student
        center: Running mean of teacher logits (length D)
        optimizer: Student optimizer
        step: Number of completed steps
    """

    def __init__(self, config: Config):
        self.config = config
        if config.train.deterministic:
            torch.use_deterministic_algorithms(True)
        self.student = build_network(config)
        self.teacher = make_teacher(self.student)
        self.center = torch.zeros(config.head.out_dim)
        self.optimizer = build_optimizer(self.student, config.optim)
        self.step = 0

    def train_step(self, batch: Batch) -> StepMetrics:
        """One optimizer step on a batch of clips.

        Raises:
            NumericFailure: On a non-finite loss or gradient (state untouched).
            NumericOverflowError: On non-finite encoder activations.
        """
        cfg = self.config
        step = batch.step
        lr = lr_schedule(step, cfg.optim, cfg.train.total_steps)
        alpha = ema_alpha(step, cfg.train.total_steps, cfg.train.ema_alpha, cfg.train.ema_schedule)
        counter: Counter = Counter()

        self.student.train()
        self.optimizer.zero_grad(set_to_none=True)
        totals, objs, locs, teacher_logits = [], [], [], []
        sk_err, converged = 0.0, True
        for c, clip in enumerate(batch.clips):
            targets = clip_targets(self.teacher, self.center, clip, cfg, step, c)
            try:
                total, obj, loc = student_clip_loss(self.student, targets.teacher_probs, targets.masked_views,
                                                    targets.local_views, cfg.head, counter)
            except DistillError as e:
                raise NumericFailure(f"Student forward failed at step {step}: {e}") from e
            totals.append(total)
            objs.append(obj.detach())
            locs.append(loc.detach())
            teacher_logits.append(targets.teacher_logits)
            sk_err = max(sk_err, targets.sk_err)
            converged = converged and targets.sk_converged
        loss = torch.stack(totals).mean()
        if not torch.isfinite(loss):
            raise NumericFailure(f"Non-finite loss at step {step}: obj={objs}, local={locs}")
        loss.backward()
        optimizer_step(self.optimizer, lr, cfg.optim.weight_decay)
        ema_update(self.teacher, self.student, alpha)
        self.center = center_update(self.center, torch.cat(teacher_logits).mean(dim=0), cfg.head.center_momentum)
        self.step = step + 1
        return StepMetrics(step=step, loss_total=float(loss.detach()), loss_obj=float(torch.stack(objs).mean()),
                           loss_local=float(torch.stack(locs).mean()), lr=lr, ema_alpha=alpha,
                           sk_err=sk_err, sk_converged=converged, terms=counter)

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        """Everything needed to continue training, as named tensors."""
        tensors = {
            "meta/step": encode_int(self.step),
            "meta/seed": encode_int(self.config.train.seed),
            "meta/config": encode_text(ConfigManager.from_config(self.config).to_yaml()),
            "head/center": self.center,
        }
        for name, p in self.student.state_dict().items():
            tensors[f"student/{name}"] = p
        for name, p in self.teacher.state_dict().items():
            tensors[f"teacher/{name}"] = p
        for idx, state in self.optimizer.state_dict()["state"].items():
            for key, value in state.items():
                tensors[f"optim/{idx}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
        return tensors

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(self.state_tensors(), path)

    def load_state(self, tensors: Dict[str, torch.Tensor]) -> None:
        """Restore student, teacher, center, optimizer state and step."""
        try:
            self.student.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("student/")})
            self.teacher.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("teacher/")})
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint does not match the configured model: {e}") from e
        self.center = tensors["head/center"].clone()
        optim_state: Dict[int, dict] = {}
        for name, value in tensors.items():
            if name.startswith("optim/"):
                _, idx, key = name.split("/", 2)
                optim_state.setdefault(int(idx), {})[key] = value.clone()
        current = self.optimizer.state_dict()
        self.optimizer.load_state_dict({"state": optim_state, "param_groups": current["param_groups"]})
        self.step = decode_int(tensors["meta/step"])

    def resume(self, path: Union[str, Path]) -> None:
        """Continue from a checkpoint written by save()."""
        tensors = load_checkpoint(path)
        self.load_state(tensors)
        logger.info(f"Resumed from {path} at step {self.step}")

    def run(
        self,
        dataset: ClipDataset,
        out_dir: Union[str, Path],
        total_steps: Optional[int] = None,
    ) -> List[StepMetrics]:
        """Train from the current step up to total_steps, writing metrics and checkpoints."""
        cfg = self.config
        total_steps = cfg.train.total_steps if total_steps is None else total_steps
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_NAME
        if self.step == 0 or not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")

        history = []
        started = time.monotonic()
        logger.info(f"Training steps {self.step}..{total_steps - 1} on {len(dataset)} videos")
        with ClipLoader(dataset, cfg, self.step, total_steps) as loader, \
                metrics_path.open("a", encoding="utf-8") as metrics_file:
            for step, batch in loader:
                metrics = self.train_step(batch)
                history.append(metrics)
                metrics_file.write(metrics.csv_row() + "\n")
                metrics_file.flush()
                if cfg.train.log_every and (step % cfg.train.log_every == 0 or step == total_steps - 1):
                    logger.info(
                        f"step {step}: loss {metrics.loss_total:.4f} (obj {metrics.loss_obj:.4f}, "
                        f"local {metrics.loss_local:.4f}) lr {metrics.lr:.2e} sk_err {metrics.sk_err:.1e}"
                    )
                if cfg.train.checkpoint_every and self.step % cfg.train.checkpoint_every == 0:
                    self.save(out_dir / f"ckpt_{self.step:06d}.dora")
        self.save(out_dir / LAST_CHECKPOINT)
        logger.info(f"Training finished at step {self.step} in {format_duration(time.monotonic() - started)}")
        return history


def load_teacher(path: Union[str, Path], config: Optional[Config] = None) -> Tuple[Network, Config]:
    """Rebuild the teacher network (and its config echo) from a checkpoint."""
    tensors = load_checkpoint(path)
    if config is None:
        if "meta/config" not in tensors:
            raise CheckpointError(f"{path} carries no config echo")
        config = ConfigManager.from_yaml(decode_text(tensors["meta/config"])).config
    teacher = build_network(config)
    try:
        teacher.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("teacher/")})
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its config: {e}") from e
    teacher.requires_grad_(False)
    teacher.eval()
    return teacher, config
