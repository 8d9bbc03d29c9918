"""Binary checkpoint format.

A checkpoint is a flat list of named float32 tensors:

    header   b"DORA" | u16 version | u32 tensor count
    record   u16 name length | UTF-8 name | u8 rank | rank × u64 dims | float32 payload (little-endian)
    trailer  u32 CRC32 over all record bytes

Non-tensor state (step, seed, the YAML config echo) is stored as tensors
too: integers as 1-element tensors and text as its UTF-8 bytes, one byte
per element.
"""

import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch

from .utils import VidsslError

logger = logging.getLogger(__name__)

MAGIC = b"DORA"
VERSION = 1
HEADER = struct.Struct("<4sHI")
NAME_LEN = struct.Struct("<H")
RANK = struct.Struct("<B")
DIM = struct.Struct("<Q")
CRC = struct.Struct("<I")


class CheckpointError(VidsslError):
    """Base class for checkpoint errors."""
    pass


class CheckpointCorruptError(CheckpointError):
    """Bad magic, truncated data or CRC mismatch."""
    pass


class CheckpointVersionError(CheckpointError):
    """The file was written by an unsupported format version."""
    pass


def encode_text(text: str) -> torch.Tensor:
    return torch.tensor(list(text.encode("utf-8")), dtype=torch.float32)


def decode_text(tensor: torch.Tensor) -> str:
    return bytes(int(v) for v in tensor.tolist()).decode("utf-8")


def encode_int(value: int) -> torch.Tensor:
    """Exact integer as decimal text; float32 payloads only hold integers up to 2**24."""
    return encode_text(str(int(value)))


def decode_int(tensor: torch.Tensor) -> int:
    try:
        return int(decode_text(tensor))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointCorruptError(f"Integer field is not decimal text: {e}") from e


def encode_tensors(tensors: Dict[str, torch.Tensor], version: int = VERSION) -> bytes:
    """Serialize named tensors (converted to float32) to checkpoint bytes."""
    records = bytearray()
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        array = tensor.detach().cpu().to(torch.float32).numpy()
        if array.ndim > 255:
            raise CheckpointError(f"Tensor {name} has rank {array.ndim} > 255")
        records += NAME_LEN.pack(len(raw_name)) + raw_name
        records += RANK.pack(array.ndim)
        for dim in array.shape:
            records += DIM.pack(dim)
        records += np.ascontiguousarray(array, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, version, len(tensors)) + bytes(records) + CRC.pack(zlib.crc32(records))


def decode_tensors(data: bytes) -> Dict[str, torch.Tensor]:
    """Parse checkpoint bytes.

    Raises:
        CheckpointCorruptError: Bad magic, truncation, trailing bytes or CRC mismatch.
        CheckpointVersionError: Unsupported version.
    """
    if len(data) < HEADER.size + CRC.size:
        raise CheckpointCorruptError(f"Checkpoint is truncated ({len(data)} bytes)")
    magic, version, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"Bad magic {magic!r}; not a checkpoint file")
    if version != VERSION:
        raise CheckpointVersionError(f"Checkpoint version {version} is not supported (expected {VERSION})")
    records = memoryview(data)[HEADER.size:len(data) - CRC.size]
    (expected_crc,) = CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(records) != expected_crc:
        raise CheckpointCorruptError("CRC32 mismatch; checkpoint is corrupt or truncated")

    tensors = {}
    offset = 0
    try:
        for _ in range(count):
            (name_len,) = NAME_LEN.unpack_from(records, offset)
            offset += NAME_LEN.size
            name = bytes(records[offset:offset + name_len]).decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise CheckpointCorruptError("Tensor name is truncated")
            offset += name_len
            (rank,) = RANK.unpack_from(records, offset)
            offset += RANK.size
            shape = []
            for _ in range(rank):
                (dim,) = DIM.unpack_from(records, offset)
                offset += DIM.size
                shape.append(dim)
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(records):
                raise CheckpointCorruptError(f"Payload of {name} is truncated")
            array = np.frombuffer(records[offset:offset + nbytes], dtype="<f4").reshape(shape)
            offset += nbytes
            tensors[name] = torch.from_numpy(array.astype(np.float32))
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointCorruptError(f"Malformed checkpoint record: {e}") from e
    if offset != len(records):
        raise CheckpointCorruptError(f"{len(records) - offset} unexpected bytes after the last tensor")
    return tensors


def save_checkpoint(tensors: Dict[str, torch.Tensor], path: Union[str, Path]) -> Path:
    """Write a checkpoint atomically (temporary file + rename)."""
    path = Path(path)
    data = encode_tensors(tensors)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written: {path} ({len(tensors)} tensors, {len(data)} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, torch.Tensor]:
    """Read and verify a checkpoint file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e
    return decode_tensors(data)
