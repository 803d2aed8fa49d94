"""Binary PGM (P5, 8-bit) reader/writer.

Images are stored as gray levels 0..255; segmentation masks store class
IDs directly as gray levels.
"""

from __future__ import annotations

import numpy as np

from .codec import FormatError


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM values must fit in 0..255")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise FormatError("bad PGM magic")
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comment lines between header fields
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(raw[start:pos])
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError:
        raise FormatError(f"bad PGM header fields: {fields}") from None
    if maxval < 1 or maxval > 255:
        raise FormatError(f"bad PGM maxval: {maxval}")
    pos += 1  # single whitespace after maxval
    if len(raw) - pos != w * h:
        raise FormatError(f"bad PGM payload size: expected {w * h} bytes, got {len(raw) - pos}")
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def image_to_u8(img: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] -> rounded 8-bit gray."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
