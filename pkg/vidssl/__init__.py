"""vidssl - Self-Supervised Pretraining from Video with Multi-Object Tracking.

Trains a small vision transformer on unlabeled video clips by
self-distillation. An EMA teacher discovers k objects in the first frame of
each clip from its last-block attention heads, refines them with
Sinkhorn-Knopp optimal transport, and tracks them through the clip by
cross-attention. The student sees one masked copy of every view per tracked
object and matches the teacher's [CLS] distribution.

Modules:

1. Encoder (`encoder.py`): Vision transformer exposing per-head queries,
   keys and attention of the tracker block.
2. Transport (`transport.py`): Log-domain Sinkhorn-Knopp with convergence
   reporting.
3. Tracker (`tracker.py`): Object prototypes, refinement, cross-attention
   maps, object masks and overlays.
4. Distill (`distill.py`): Projection head, centering, sharpening, EMA
   updates and the multi-object / multi-crop losses.
5. Frames, Synthetic and Data (`frames.py`, `synthetic.py`, `data.py`):
   PPM/PGM IO, the moving-shapes generator, clip sampling (cut-aware),
   base crops, multi-crop views and the prefetching loader.
6. Trainer and Checkpoint (`trainer.py`, `checkpoint.py`): The training
   loop, schedules, optimizers and the binary checkpoint format.
7. Evaluation (`evaluation.py`): k-NN, linear probe, CorLoc and Jaccard.
8. CLI (`cli.py`): ``python -m vidssl train|track|synth|eval``.

Key Features:
- Single-seed determinism through named random streams
- Refinement and masking ablations (raw maps, block masks)
- Single-image mode (clips of one frame)
- Desk-scale defaults: 64x64 frames, 8x8 patches, CPU training

Dependencies:
- torch / torchvision: Tensors, autodiff, optimizers, view augmentation
- einops: Patch rearrangement
- numpy / scipy: Random streams, synthetic drawing, connected components
- scikit-learn: Linear probe
- Pillow: PPM/PGM frames and masks
- PyYAML: Configuration files

Usage:
    from vidssl.config import ConfigManager
    from vidssl.data import load_dataset
    from vidssl.trainer import Trainer

    config = ConfigManager().config
    trainer = Trainer(config)
    trainer.run(load_dataset("data"), "run")

License: MIT
Python Version: 3.10+
"""

__version__ = "0.1.0"

from .config import Config, ConfigManager
from .utils import VidsslError

__all__ = ["Config", "ConfigManager", "VidsslError", "__version__"]
