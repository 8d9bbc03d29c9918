"""Configuration management system for vidssl.

This module provides a hierarchical configuration system using YAML files and
Python dataclasses. Each section is a dataclass with defaults sized for
desk-scale experiments; a YAML file only needs to name the values it changes.

Key Features:
- YAML-based configuration files
- Dataclass-based type safety
- Hierarchical configuration sections
- Default values for all settings
- ``--set key=value`` overrides, type-checked against the defaults
- Unknown sections and keys are rejected

Configuration Sections:
- model: vision transformer geometry and tracker source layer
- head: projection head and distillation temperatures
- tracker: object count, Sinkhorn settings, masking mode
- data: clip sampling and multi-crop augmentation
- optim: optimizer and learning-rate schedule
- train: steps, EMA schedule, seed, checkpointing

Example:
    >>> from vidssl.config import ConfigManager
    >>> config_mgr = ConfigManager()
    >>> print(config_mgr.config.tracker.k)
    3
    >>> config_mgr.apply_overrides(["train.total_steps=2"])
    >>> config_mgr.config.train.total_steps
    2
"""

import dataclasses
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Tuple

import yaml

from .utils import VidsslError

logger = logging.getLogger(__name__)


class ConfigError(VidsslError):
    """Raised for unreadable, unknown, mistyped or inconsistent settings.

    Example:
        >>> try:
        ...     ConfigManager().apply_overrides(["nonsense=1"])
        ... except ConfigError as e:
        ...     print(f"Bad override: {e}")
    """
    pass


@dataclass
class ModelConfig:
    """Vision transformer configuration.

    Attributes:
        image_size: Global view side length in pixels (default: 64)
        local_size: Local view side length in pixels (default: 32)
        patch_size: Patch side p (default: 8)
        channels: Input channels (default: 3)
        dim: Embedding dimension d (default: 48)
        depth: Number of transformer blocks (default: 4)
        heads: Heads per block h (default: 6)
        last_block_heads: Head count of the final block only; 0 keeps ``heads``.
            Raising it lets the tracker discover more objects than ``heads``.
        mlp_ratio: MLP hidden width as a multiple of dim (default: 4)
        tracker_layer: Block whose attention feeds the tracker: last or second_last
    """
    image_size: int = 64
    local_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 48
    depth: int = 4
    heads: int = 6
    last_block_heads: int = 0
    mlp_ratio: int = 4
    tracker_layer: str = "last"


@dataclass
class HeadConfig:
    """Projection head configuration.

    Attributes:
        out_dim: Output dimension D of the probability vectors (default: 256)
        student_temp: Student softmax temperature (default: 0.1)
        teacher_temp: Teacher softmax temperature (default: 0.04)
        center_momentum: Teacher center momentum (default: 0.9)
    """
    out_dim: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9


@dataclass
class TrackerConfig:
    """Object discovery and tracking configuration.

    Attributes:
        k: Number of objects tracked per clip (default: 3)
        epsilon: Sinkhorn entropic coefficient (default: 0.05)
        sk_tolerance: Max marginal deviation for convergence (default: 1e-6)
        sk_max_iterations: Sinkhorn iteration cap (default: 100)
        refine: Refine prototypes with Sinkhorn-Knopp; False uses raw cross-attention
        mask_mode: object (tracked attention maps) or block (random block-wise)
        block_mask_ratio: Fraction of patches hidden per block mask (default: 0.4)
    """
    k: int = 3
    epsilon: float = 0.05
    sk_tolerance: float = 1e-6
    sk_max_iterations: int = 100
    refine: bool = True
    mask_mode: str = "object"
    block_mask_ratio: float = 0.4


@dataclass
class DataConfig:
    """Clip sampling and augmentation configuration.

    Attributes:
        T: Frames per clip (default: 4)
        stride: Source frames between clip frames (default: 1)
        clips_per_step: Clips in one training batch (default: 4)
        base_crop_size: Side of the per-clip base crop (default: 64)
        n_local: Local crops per frame m (default: 6)
        global_scale: Area scale range of global crops
        local_scale: Area scale range of local crops
        flip_p: Horizontal flip probability (default: 0.5)
        jitter_p: Color jitter probability (default: 0.8)
        gray_p: Grayscale probability (default: 0.2)
        cut_aware: Reject clips spanning a shot cut (default: True)
        max_retries: Resampling attempts for cut-aware sampling (default: 100)
        prefetch: Batches buffered by the loader thread (default: 2)
    """
    T: int = 4
    stride: int = 1
    clips_per_step: int = 4
    base_crop_size: int = 64
    n_local: int = 6
    global_scale: Tuple[float, float] = (0.4, 1.0)
    local_scale: Tuple[float, float] = (0.05, 0.4)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    gray_p: float = 0.2
    cut_aware: bool = True
    max_retries: int = 100
    prefetch: int = 2


@dataclass
class OptimConfig:
    """Optimizer and learning-rate schedule configuration.

    Attributes:
        optimizer: adamw (adaptive moments, decoupled decay) or sgd (momentum)
        lr: Peak learning rate after warmup (default: 5e-4)
        min_lr: Final learning rate of the cosine decay (default: 1e-6)
        warmup_steps: Linear warmup length (default: 10)
        weight_decay: Decoupled weight decay (default: 0.04)
        momentum: SGD momentum (default: 0.9)
        beta1: First moment decay (default: 0.9)
        beta2: Second moment decay (default: 0.999)
        eps: Adaptive update denominator epsilon (default: 1e-8)
    """
    optimizer: str = "adamw"
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_steps: int = 10
    weight_decay: float = 0.04
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    """Training loop configuration.

    Attributes:
        total_steps: Optimizer steps to run (default: 500)
        ema_alpha: Teacher EMA momentum (default: 0.996)
        ema_schedule: constant or cosine (toward 1) (default: constant)
        seed: Root of every random stream (default: 0)
        checkpoint_every: Steps between checkpoints, 0 = only at the end
        log_every: Steps between INFO metric lines (default: 10)
        deterministic: Force deterministic torch kernels (default: True)
    """
    total_steps: int = 500
    ema_alpha: float = 0.996
    ema_schedule: str = "constant"
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 10
    deterministic: bool = True


@dataclass
class Config:
    """Top-level configuration container.

    Attributes:
        model: Vision transformer settings
        head: Projection head settings
        tracker: Tracking and masking settings
        data: Sampling and augmentation settings
        optim: Optimizer settings
        train: Training loop settings
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _section_types() -> dict:
    return {
        "model": ModelConfig,
        "head": HeadConfig,
        "tracker": TrackerConfig,
        "data": DataConfig,
        "optim": OptimConfig,
        "train": TrainConfig,
    }


def _coerce(section: str, key: str, value, default):
    """Type-check ``value`` against the type of the field's default."""
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # PyYAML reads exponent literals without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} expects a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where} expects a list of {len(default)} numbers, got {value!r}")
        try:
            return tuple(float(v) for v in value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where} expects numbers, got {value!r}") from e
    raise ConfigError(f"Unsupported config field type for {where}")


def validate(config: Config) -> None:
    """Check cross-field invariants.

    Raises:
        ConfigError: On the first violated invariant.
    """
    m, h, t, d, o, tr = config.model, config.head, config.tracker, config.data, config.optim, config.train
    checks = [
        (o.min_lr <= o.lr, f"optim.min_lr ({o.min_lr}) must not exceed optim.lr ({o.lr})"),
        (0 <= o.warmup_steps < tr.total_steps,
         f"optim.warmup_steps ({o.warmup_steps}) must be < train.total_steps ({tr.total_steps})"),
        (o.optimizer in ("adamw", "sgd"), f"optim.optimizer must be adamw or sgd, got {o.optimizer!r}"),
        (t.k >= 1, f"tracker.k must be >= 1, got {t.k}"),
        (t.k <= (m.last_block_heads if m.tracker_layer == "last" and m.last_block_heads else m.heads),
         f"tracker.k ({t.k}) exceeds the tracker block's head count; raise model.last_block_heads"),
        (t.epsilon > 0, f"tracker.epsilon must be > 0, got {t.epsilon}"),
        (t.sk_tolerance > 0, f"tracker.sk_tolerance must be > 0, got {t.sk_tolerance}"),
        (t.sk_max_iterations >= 1, f"tracker.sk_max_iterations must be >= 1, got {t.sk_max_iterations}"),
        (t.mask_mode in ("object", "block"), f"tracker.mask_mode must be object or block, got {t.mask_mode!r}"),
        (0.0 < t.block_mask_ratio < 1.0, f"tracker.block_mask_ratio must be in (0,1), got {t.block_mask_ratio}"),
        (h.student_temp > 0 and h.teacher_temp > 0, "head temperatures must be > 0"),
        (0.0 <= h.center_momentum <= 1.0, f"head.center_momentum must be in [0,1], got {h.center_momentum}"),
        (h.out_dim >= 2, f"head.out_dim must be >= 2, got {h.out_dim}"),
        (0.0 <= tr.ema_alpha <= 1.0, f"train.ema_alpha must be in [0,1], got {tr.ema_alpha}"),
        (tr.ema_schedule in ("constant", "cosine"),
         f"train.ema_schedule must be constant or cosine, got {tr.ema_schedule!r}"),
        (m.tracker_layer in ("last", "second_last"),
         f"model.tracker_layer must be last or second_last, got {m.tracker_layer!r}"),
        (m.tracker_layer == "last" or m.depth >= 2, "model.tracker_layer=second_last needs model.depth >= 2"),
        (m.depth >= 1, f"model.depth must be >= 1, got {m.depth}"),
        (m.heads >= 1 and m.dim % m.heads == 0, f"model.dim ({m.dim}) must be divisible by model.heads ({m.heads})"),
        (m.last_block_heads == 0 or m.dim % m.last_block_heads == 0,
         f"model.dim ({m.dim}) must be divisible by model.last_block_heads ({m.last_block_heads})"),
        (m.image_size % m.patch_size == 0 and m.local_size % m.patch_size == 0,
         "model.image_size and model.local_size must be multiples of model.patch_size"),
        (m.local_size < m.image_size, "model.local_size must be smaller than model.image_size"),
        (d.T >= 1 and d.stride >= 1, "data.T and data.stride must be >= 1"),
        (d.clips_per_step >= 1, "data.clips_per_step must be >= 1"),
        (d.n_local >= 0, "data.n_local must be >= 0"),
        (d.base_crop_size >= m.image_size // 2, "data.base_crop_size is too small for the global views"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


class ConfigManager:
    """Manages configuration loading, overrides and saving.

    Handles YAML configuration file I/O, merging user settings with the
    dataclass defaults. Unlike a lenient settings file, unknown keys are
    errors: a typo in an experiment config must not silently fall back to a
    default.

    Attributes:
        path: Configuration file path being used, or None for defaults
        config: Current configuration object

    Example:
        >>> config_mgr = ConfigManager(Path("experiment.yaml"))
        >>> config_mgr.apply_overrides(["tracker.k=2", "seed=7"])
        >>> config_mgr.save(Path("out/config.yaml"))
    """

    def __init__(self, path: Optional[Path] = None):
        """Initialize ConfigManager.

        Args:
            path: Config file path (uses defaults if None)

        Raises:
            ConfigError: If the file cannot be read or holds invalid settings.
        """
        self.path = Path(path).expanduser() if path else None
        self.config = self._load()

    def _load(self) -> Config:
        """Load configuration from YAML file.

        Returns:
            Config object with loaded or default values
        """
        if self.path is None:
            logger.debug("No config file given, using defaults")
            return Config()
        if not self.path.exists():
            raise ConfigError(f"Config file not found: {self.path}")
        try:
            with open(self.path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (yaml.YAMLError, OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"Failed to load config from {self.path}: {e}") from e
        config = self._dict_to_config(data)
        logger.info(f"Loaded configuration from {self.path}")
        return config

    def _dict_to_config(self, data) -> Config:
        """Construct Config from a dictionary.

        Accepts either a mapping of sections or a flat mapping of keys that
        are unique across sections.

        Args:
            data: Dictionary from YAML file

        Returns:
            Config object with values from dict merged with defaults
        """
        if not isinstance(data, dict):
            raise ConfigError("Config file must contain a mapping")
        config = Config()
        types = _section_types()
        for key, value in data.items():
            if key in types and isinstance(value, dict):
                for sub_key, sub_value in value.items():
                    self._set(config, key, sub_key, sub_value)
            else:
                section = self._resolve_section(str(key))
                self._set(config, section, str(key), value)
        return config

    @staticmethod
    def _resolve_section(key: str) -> str:
        owners = [name for name, cls in _section_types().items()
                  if key in {f.name for f in dataclasses.fields(cls)}]
        if not owners:
            raise ConfigError(f"Unknown config key: {key}")
        if len(owners) > 1:
            raise ConfigError(f"Ambiguous config key {key}; use one of {[f'{o}.{key}' for o in owners]}")
        return owners[0]

    @staticmethod
    def _set(config: Config, section: str, key: str, value) -> None:
        section_obj = getattr(config, section, None)
        if section_obj is None:
            raise ConfigError(f"Unknown config section: {section}")
        known = {f.name for f in dataclasses.fields(section_obj)}
        if key not in known:
            raise ConfigError(f"Unknown config key: {section}.{key}")
        setattr(section_obj, key, _coerce(section, key, value, getattr(section_obj, key)))

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """Apply ``key=value`` overrides.

        Args:
            overrides: Strings like ``train.total_steps=2`` or ``total_steps=2``.
                Values are parsed as YAML scalars (``true``, ``0.5``, ``[0.4, 1.0]``).

        Raises:
            ConfigError: For malformed, unknown or mistyped overrides.
        """
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"Override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse value for {key}: {raw!r}") from e
            if "." in key:
                section, sub_key = key.split(".", 1)
            else:
                section, sub_key = self._resolve_section(key), key
            old_value = getattr(getattr(self.config, section, None), sub_key, None)
            self._set(self.config, section, sub_key, value)
            logger.info(f"Override {section}.{sub_key}: {old_value} → {getattr(getattr(self.config, section), sub_key)}")

    def validate(self) -> None:
        """Validate the current configuration (see :func:`validate`)."""
        validate(self.config)

    def to_dict(self) -> dict:
        """Convert configuration to dictionary (tuples become lists)."""
        def plain(obj):
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, tuple):
                return [plain(v) for v in obj]
            return obj
        return plain(asdict(self.config))

    def to_yaml(self) -> str:
        """Serialize the configuration as YAML text."""
        return yaml.dump(self.to_dict(), default_flow_style=False, sort_keys=False, indent=2)

    def save(self, path: Optional[Path] = None) -> Path:
        """Save current configuration to YAML file.

        Creates parent directories if they don't exist.

        Raises:
            OSError: If file write fails
        """
        target = Path(path) if path else self.path
        if target is None:
            raise ConfigError("No path to save configuration to")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(self.to_yaml(), encoding="utf-8")
            logger.info(f"Saved configuration to {target}")
        except OSError as e:
            logger.error(f"Failed to save config to {target}: {e}")
            raise
        return target

    @classmethod
    def from_yaml(cls, text: str) -> "ConfigManager":
        """Rebuild a manager from YAML text (the checkpoint config echo)."""
        mgr = cls()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid embedded config: {e}") from e
        mgr.config = mgr._dict_to_config(data)
        return mgr

    @classmethod
    def from_config(cls, config: Config) -> "ConfigManager":
        """Wrap an existing Config object."""
        mgr = cls()
        mgr.config = config
        return mgr


def load_config(path: Optional[Path] = None) -> Config:
    """Load and validate a configuration file (defaults when path is None)."""
    mgr = ConfigManager(path)
    mgr.validate()
    return mgr.config


def apply_overrides(config: Config, overrides: Iterable[str]) -> Config:
    """Apply ``key=value`` overrides in place, validate, and return the config."""
    mgr = ConfigManager.from_config(config)
    mgr.apply_overrides(overrides)
    mgr.validate()
    return mgr.config


def save_config(config: Config, path: Path) -> Path:
    """Write ``config`` as YAML to ``path``."""
    return ConfigManager.from_config(config).save(path)
