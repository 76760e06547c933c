"""16-bit binary PGM (P5, maxval 65535) reader and writer."""

from pathlib import Path
from typing import Union

import numpy as np

from core.exceptions import PGMFormatError

from .persistence import atomic_write_bytes

MAXVAL = 65535


def encode_pgm(pixels: np.ndarray) -> bytes:
    image = np.asarray(pixels, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    if image.ndim != 2:
        raise PGMFormatError(f"expected a 2-d image, got shape {image.shape}", error_code="BAD_SHAPE")
    height, width = image.shape
    samples = np.rint(np.clip(image, 0.0, 1.0) * MAXVAL).astype(">u2")
    header = f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    return header + samples.tobytes(order="C")


def decode_pgm(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """Return pixels as a (1, H, W) float64 array in [0, 1]."""
    tokens = []
    offset = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while offset < len(payload) and payload[offset:offset + 1].isspace():
            offset += 1
        if payload[offset:offset + 1] == b"#":
            offset = payload.index(b"\n", offset) + 1
            continue
        start = offset
        while offset < len(payload) and not payload[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise PGMFormatError(f"{source}: truncated PGM header", error_code="TRUNCATED")
        tokens.append(payload[start:offset])
    offset += 1

    if tokens[0] != b"P5":
        raise PGMFormatError(
            f"{source}: unsupported format {tokens[0]!r}; only binary 16-bit P5 is accepted",
            error_code="BAD_MAGIC",
        )
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise PGMFormatError(f"{source}: malformed header", error_code="BAD_HEADER") from e
    if maxval != MAXVAL:
        raise PGMFormatError(f"{source}: maxval {maxval} is not {MAXVAL}", error_code="BAD_MAXVAL")
    expected = width * height * 2
    body = payload[offset:offset + expected]
    if len(body) != expected:
        raise PGMFormatError(f"{source}: expected {expected} payload bytes, found {len(body)}", error_code="TRUNCATED")
    samples = np.frombuffer(body, dtype=">u2").reshape(height, width)
    return (samples.astype(np.float64) / MAXVAL)[None]


def write_pgm(path: Union[str, Path], pixels: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_pgm(pixels))


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise PGMFormatError(f"image {path} not found", error_code="NOT_FOUND")
    return decode_pgm(path.read_bytes(), source=str(path))
