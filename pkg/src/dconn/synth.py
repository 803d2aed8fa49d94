"""Deterministic synthetic datasets.

Four kinds cover the stress cases the model targets:

  * ``blobs``: unions of 1-3 ellipses with a log-uniform primary area,
    producing the strong two-level size imbalance of small lesions;
  * ``rings``: annuli, so ground truth carries holes (b1 >= 1);
  * ``vessels``: thin dilated random-walk curves;
  * ``multiclass``: two spatially disjoint blob classes.

Every mask is cleaned so no foreground pixel is isolated (that is the
connectivity codec's round-trip precondition) and every image derives
its own SplitMix64 substream, so a (spec, seed) pair pins the dataset
bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .codec import _shifted
from .pgm import image_to_u8, read_pgm, write_pgm
from .rng import SplitMix64, derive

KINDS = ("blobs", "rings", "vessels", "multiclass")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    count: int = 20
    size: int = 64
    seed: int = 0
    area_range: tuple[float, float] = (20.0, 400.0)  # log-uniform ellipse areas
    noise: float = 0.05

    @property
    def classes(self) -> int:
        return 2 if self.kind == "multiclass" else 1

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.size % 16:
            raise ValueError(f"size {self.size} must be divisible by 16")
        if not 0.0 < self.area_range[0] < self.area_range[1]:
            raise ValueError(f"bad area range {self.area_range}")
        if self.noise < 0.0:
            raise ValueError("noise must be >= 0")


def _grid(size: int):
    return np.mgrid[0:size, 0:size]


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = _grid(size)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def remove_isolated(mask: np.ndarray) -> np.ndarray:
    """Drop foreground pixels with no same-class 8-neighbor, to a fixpoint."""
    mask = np.asarray(mask).copy()
    while True:
        changed = False
        for c in np.unique(mask):
            if c == 0:
                continue
            m = mask == c
            support = np.zeros_like(m)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy or dx:
                        support |= _shifted(m, dy, dx, fill=False)
            lonely = m & ~support
            if lonely.any():
                mask[lonely] = 0
                changed = True
        if not changed:
            return mask


def _draw_blob(rng: SplitMix64, size: int, area_range, region=None) -> np.ndarray:
    """Union of 1-3 ellipses; the first has log-uniform area, extras attach to it."""
    lo, hi = area_range
    area = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    mask = np.zeros((size, size), dtype=bool)
    y0, y1, x0, x1 = region if region is not None else (2, size - 2, 2, size - 2)
    n_parts = 1 + rng.randint(3)
    cy = rng.uniform(y0, y1)
    cx = rng.uniform(x0, x1)
    for part in range(n_parts):
        a = area if part == 0 else area * rng.uniform(0.3, 1.0)
        aspect = rng.uniform(0.6, 1.6)
        ry = max(np.sqrt(a * aspect / np.pi), 1.2)
        rx = max(np.sqrt(a / (aspect * np.pi)), 1.2)
        if part > 0:  # keep satellites overlapping the primary ellipse
            cy = min(max(cy + rng.uniform(-ry, ry), y0), y1)
            cx = min(max(cx + rng.uniform(-rx, rx), x0), x1)
        mask |= _ellipse(size, cy, cx, ry, rx)
    return mask


def _draw_ring(rng: SplitMix64, size: int) -> np.ndarray:
    r_out = rng.uniform(6.0, size / 3.0)
    r_in = rng.uniform(2.0, r_out - 3.0)
    margin = r_out + 2.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    return _ellipse(size, cy, cx, r_out, r_out) & ~_ellipse(size, cy, cx, r_in, r_in)


def _draw_vessel(rng: SplitMix64, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    y = rng.uniform(3, size - 3)
    x = rng.uniform(3, size - 3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    for _ in range(int(size * 1.5)):
        mask[int(y), int(x)] = True
        angle += rng.normal(0.0, 0.35)
        y = min(max(y + np.sin(angle), 1.0), size - 2.0)
        x = min(max(x + np.cos(angle), 1.0), size - 2.0)
    width = 1 + rng.randint(3)
    if width == 1:
        return mask
    offsets = [(0, 0), (0, 1), (1, 0), (1, 1)] if width == 2 else [
        (dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    ]
    dilated = np.zeros_like(mask)
    for dy, dx in offsets:
        dilated |= _shifted(mask, dy, dx, fill=False)
    return dilated


def _draw_mask(rng: SplitMix64, spec: DatasetSpec) -> np.ndarray:
    size = spec.size
    mask = np.zeros((size, size), dtype=np.int64)
    if spec.kind == "blobs":
        mask[_draw_blob(rng, size, spec.area_range)] = 1
    elif spec.kind == "rings":
        mask[_draw_ring(rng, size)] = 1
    elif spec.kind == "vessels":
        mask[_draw_vessel(rng, size)] = 1
    else:  # multiclass: disjoint halves keep the two classes apart
        half = size // 2
        m1 = _draw_blob(rng, size, spec.area_range, region=(2, size - 2, 2, half - 2))
        m2 = _draw_blob(rng, size, spec.area_range, region=(2, size - 2, half + 2, size - 2))
        mask[m1] = 1
        mask[m2 & ~m1] = 2
    return remove_isolated(mask)


def _render_image(rng: SplitMix64, mask: np.ndarray, noise: float) -> np.ndarray:
    img = np.where(mask > 0, 0.8, 0.2)
    if noise > 0.0:
        flat = img.reshape(-1)
        img = np.array([flat[i] + noise * rng.normal() for i in range(flat.size)]).reshape(mask.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: DatasetSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Render `count` (image, mask) pairs, bit-exact given (spec, seed)."""
    spec.validate()
    out = []
    for idx in range(spec.count):
        mask = None
        for attempt in range(20):
            rng = SplitMix64(derive(spec.seed, idx * 1000 + attempt))
            candidate = _draw_mask(rng, spec)
            counts = [int((candidate == c).sum()) for c in range(1, spec.classes + 1)]
            if all(k >= 2 for k in counts):
                mask = candidate
                break
        if mask is None:
            raise RuntimeError(f"could not draw a valid mask for image {idx} after 20 attempts")
        img = _render_image(rng, mask, spec.noise)
        out.append((img, mask))
    return out


def split(dataset: list, train_fraction: float, seed: int):
    """Deterministic shuffled split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    order = list(range(len(dataset)))
    SplitMix64(derive(seed, 0x5317)).shuffle(order)
    n_train = int(round(train_fraction * len(dataset)))
    if n_train == 0 or n_train == len(dataset):
        raise ValueError(f"degenerate split: {n_train}/{len(dataset) - n_train}")
    train = [dataset[i] for i in order[:n_train]]
    test = [dataset[i] for i in order[n_train:]]
    return train, test


# -- on-disk layout -------------------------------------------------------------


def write_dataset(path, spec: DatasetSpec, pairs) -> None:
    """img_NNNN.pgm / msk_NNNN.pgm plus a manifest with per-class sizes."""
    os.makedirs(path, exist_ok=True)
    lines = [
        f"# kind={spec.kind} count={spec.count} size={spec.size} classes={spec.classes} "
        f"seed={spec.seed} noise={spec.noise}"
    ]
    for idx, (img, mask) in enumerate(pairs):
        img_name = f"img_{idx:04d}.pgm"
        msk_name = f"msk_{idx:04d}.pgm"
        write_pgm(os.path.join(path, img_name), image_to_u8(img))
        write_pgm(os.path.join(path, msk_name), mask)
        sizes = ",".join(f"{c}={int((mask == c).sum())}" for c in range(1, spec.classes + 1))
        lines.append(f"{img_name}\t{msk_name}\t{sizes}")
    with open(os.path.join(path, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[list[tuple[np.ndarray, np.ndarray]], dict]:
    """Read a dataset directory back; returns (pairs, manifest metadata)."""
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.txt in {path}")
    with open(manifest) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    meta = {}
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            key, _, val = tok.partition("=")
            meta[key] = val
        lines = lines[1:]
    pairs = []
    for ln in lines:
        img_name, msk_name = ln.split("\t")[:2]
        img = read_pgm(os.path.join(path, img_name)).astype(np.float64) / 255.0
        mask = read_pgm(os.path.join(path, msk_name)).astype(np.int64)
        pairs.append((img, mask))
    return pairs, meta
