"""Shared utilities for vidssl.

This module provides the package-wide exception root, the named random
streams every stochastic component draws from, and small formatting helpers
used in log lines.
"""

import zlib
from typing import Union

import numpy as np


class VidsslError(Exception):
    """Root of every error raised by the vidssl package.

    Module-specific errors (ConfigError, EncoderError, DataError, ...) derive
    from this class so callers such as the CLI can catch the whole family.
    """
    pass


def stream_key(name: str) -> int:
    """Stable integer key for a stream name (CRC32, independent of PYTHONHASHSEED)."""
    return zlib.crc32(name.encode("utf-8"))


def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return the random generator for a named sub-stream.

    All randomness flows from one seed. Each consumer (``init``, ``data``,
    ``heads``, ``augment``, ``mask``) draws from its own stream, optionally
    keyed further by step, clip or frame indices.

    Args:
        seed: Base seed (``train.seed`` or ``--seed``).
        name: Stream name.
        *keys: Additional non-negative integers, e.g. the training step.

    Returns:
        A freshly seeded ``numpy.random.Generator``; equal arguments always
        produce identical draws.

    Examples:
        >>> a = rng_stream(0, "data", 3).integers(1 << 30)
        >>> b = rng_stream(0, "data", 3).integers(1 << 30)
        >>> a == b
        True
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *[int(k) for k in keys]))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """Derive a 63-bit integer seed from a named stream (for torch generators)."""
    return int(rng_stream(seed, name, *keys).integers(0, 2**63 - 1))


def format_duration(seconds: Union[int, float]) -> str:
    """Wall-clock duration for training log lines.

    Examples:
        >>> format_duration(0.42)
        '0.42s'
        >>> format_duration(125)
        '2m 05s'
        >>> format_duration(3725)
        '1h 02m 05s'
    """
    seconds = max(float(seconds), 0.0)
    if seconds < 60:
        return f"{seconds:.2f}s" if seconds < 10 else f"{seconds:.0f}s"
    minutes, secs = divmod(int(round(seconds)), 60)
    hours, minutes = divmod(minutes, 60)
    if hours:
        return f"{hours}h {minutes:02d}m {secs:02d}s"
    return f"{minutes}m {secs:02d}s"
