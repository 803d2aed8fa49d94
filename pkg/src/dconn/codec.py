"""Connectivity-mask codec.

A segmentation mask (integer class IDs, 0 = background) converts to a
per-class 8-channel connectivity mask: channel j of class c is 1 at a
pixel iff the pixel has class c AND its j-th 8-neighbor has class c.
Channels are ordered by a row-major scan of the neighborhood so that
channel j and channel 9-j (1-indexed) point in opposite directions:

    1:(-1,-1)  2:(-1,0)  3:(-1,+1)
    4:( 0,-1)            5:( 0,+1)
    6:(+1,-1)  7:(+1,0)  8:(+1,+1)

Decoding runs bilateral voting (each channel multiplied by its
opposite-direction partner at the neighboring pixel), region-guided
channel aggregation (per-pixel max over the 8 voted channels), then an
argmax-with-background-threshold over classes. Out-of-bounds neighbors
count as "not connected" (0). An isolated single-pixel region encodes to
all-zero channels and decodes to background; that lossiness is inherent
to the representation and asserted in tests, not patched.

All functions are pure; arrays in, arrays out.
"""

from __future__ import annotations

import struct

import numpy as np

# 1-indexed direction table; OFFSETS[j - 1] = (row offset, col offset)
OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


def partner(j: int) -> int:
    """0-indexed opposite-direction channel: j <-> 7 - j."""
    return 7 - j


def _shifted(arr: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    """out[r, c] = arr[r + dy, c + dx], `fill` where out of bounds."""
    h, w = arr.shape[-2], arr.shape[-1]
    out = np.full_like(arr, fill)
    src_r = slice(max(dy, 0), h + min(dy, 0))
    dst_r = slice(max(-dy, 0), h + min(-dy, 0))
    src_c = slice(max(dx, 0), w + min(dx, 0))
    dst_c = slice(max(-dx, 0), w + min(-dx, 0))
    lead = (Ellipsis,)
    out[lead + (dst_r, dst_c)] = arr[lead + (src_r, src_c)]
    return out


def encode_connectivity(seg: np.ndarray, classes: int) -> np.ndarray:
    """Segmentation mask [H, W] -> binary connectivity mask [classes, 8, H, W]."""
    if classes < 1:
        raise ValueError("classes must be >= 1")
    seg = np.asarray(seg)
    if seg.ndim != 2:
        raise ValueError(f"seg must be 2-D, got shape {seg.shape}")
    if seg.max(initial=0) > classes:
        raise ValueError(f"seg contains class {int(seg.max())} > classes={classes}")
    h, w = seg.shape
    out = np.zeros((classes, 8, h, w))
    for c in range(1, classes + 1):
        m = seg == c
        for j, (dy, dx) in enumerate(OFFSETS):
            out[c - 1, j] = m & _shifted(m, dy, dx, fill=False)
    return out


def bilateral_vote(x: np.ndarray) -> np.ndarray:
    """Multiply each channel with its opposite partner at the neighbor pixel."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for j, (dy, dx) in enumerate(OFFSETS):
        out[:, j] = x[:, j] * _shifted(x[:, partner(j)], dy, dx, fill=0.0)
    return out


def rca(bicon: np.ndarray) -> np.ndarray:
    """Region-guided channel aggregation: per-class max over the 8 channels."""
    return np.asarray(bicon, dtype=np.float64).max(axis=1)


def decode_segmentation(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Connectivity probabilities [classes, 8, H, W] -> class-ID mask [H, W].

    Pixels whose best per-class aggregated score falls below `threshold`
    become background; ties break toward the lowest class index.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    probs = rca(bilateral_vote(pred))
    best = probs.argmax(axis=0)
    return np.where(probs.max(axis=0) >= threshold, best + 1, 0).astype(np.int64)


# -- CMK binary format ---------------------------------------------------------
#
# magic "CMK1"; little-endian u32: classes, channels (= 8), H, W, dtype
# (0 = u8 binary, 1 = f32); payload in class-major, channel-major,
# row-major order.

_MAGIC = b"CMK1"


class FormatError(ValueError):
    """Malformed binary file; the message names the offending field."""


def write_cmk(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 4 or mask.shape[1] != 8:
        raise ValueError(f"connectivity mask must be [classes, 8, H, W], got {mask.shape}")
    binary = np.isin(mask, (0, 1)).all()
    payload = mask.astype(np.uint8) if binary else mask.astype("<f4")
    header = _MAGIC + struct.pack(
        "<5I", mask.shape[0], 8, mask.shape[2], mask.shape[3], 0 if binary else 1
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_cmk(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise FormatError("bad CMK magic")
    if len(raw) < 24:
        raise FormatError("truncated CMK header")
    classes, channels, h, w, dtype = struct.unpack("<5I", raw[4:24])
    if channels != 8:
        raise FormatError(f"bad CMK channels field: expected 8, got {channels}")
    if dtype not in (0, 1):
        raise FormatError(f"bad CMK dtype field: {dtype}")
    count = classes * 8 * h * w
    itemsize = 1 if dtype == 0 else 4
    if len(raw) - 24 != count * itemsize:
        raise FormatError(f"bad CMK payload size: expected {count * itemsize} bytes, got {len(raw) - 24}")
    buf = np.frombuffer(raw, dtype=np.uint8 if dtype == 0 else "<f4", offset=24)
    return buf.reshape(classes, 8, h, w).astype(np.float64)
