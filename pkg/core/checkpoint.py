"""Weight checkpoints.

Layout: the magic ``RPLK1`` followed, for each named parameter, by
``uint32 name_len | name (utf-8) | uint32 rank | uint64 dims[rank] | float64 data``,
every integer and float little-endian.
"""

import struct
from pathlib import Path
from typing import Dict, Iterable, Union

import numpy as np

from utils.persistence import atomic_write_bytes

from .exceptions import CheckpointFormatError
from .tensor import Parameter

MAGIC = b"RPLK1"


def encode_checkpoint(params: Iterable[Parameter]) -> bytes:
    chunks = [MAGIC]
    seen = set()
    for p in params:
        if p.name in seen:
            raise CheckpointFormatError(f"duplicate parameter name {p.name!r}", error_code="DUPLICATE_NAME")
        seen.add(p.name)
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        chunks.append(p.data.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    if not payload.startswith(MAGIC):
        raise CheckpointFormatError("not a checkpoint: bad magic", error_code="BAD_MAGIC")
    arrays: Dict[str, np.ndarray] = {}
    offset = len(MAGIC)
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            arrays[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {e}", error_code="CORRUPT") from e
    return arrays


def save_checkpoint(path: Union[str, Path], params: Iterable[Parameter]) -> Path:
    return atomic_write_bytes(path, encode_checkpoint(params))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"checkpoint {path} not found", error_code="NOT_FOUND")
    return decode_checkpoint(path.read_bytes())
