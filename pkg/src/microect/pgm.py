"""8-bit binary PGM (P5) export for permittivity images."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(255.0 * image).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Write ``image`` (values in [0, 1], or uint8) as a P5 file."""
    pixels = image if np.asarray(image).dtype == np.uint8 else to_bytes(image)
    pixels = np.ascontiguousarray(pixels)
    h, w = pixels.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file back as a ``uint8`` array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    data = raw[pos + 1: pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError("truncated PGM data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
