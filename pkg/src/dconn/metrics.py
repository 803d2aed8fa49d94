"""Evaluation metrics: Dice, IoU, and 0-/1-dimensional Betti numbers.

Betti numbers use the standard dual connectivity pairing for binary
images: foreground components are 8-connected, holes are 4-connected
background components that do not touch the image border. Mixing the
pairing the other way produces paradoxes (a diagonal line that both
separates and does not separate the plane), so both choices are pinned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def dice_iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[float, float]:
    """Per-class Dice and IoU; empty-vs-empty counts as a perfect 1.0."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred == cls
    g = gt == cls
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0, 1.0
    inter = int((p & g).sum())
    union = np_ + ng - inter
    return 2.0 * inter / (np_ + ng), inter / union if union else 0.0


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def label_components(mask: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    """Union-find component labeling of a boolean mask (4- or 8-connectivity).

    Returns (labels [H, W] with 0 = off-mask, count).
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    uf = _UnionFind(h * w)
    # scan only backward-looking neighbors; forward ones are covered symmetrically
    offsets = [(-1, 0), (0, -1)] if connectivity == 4 else [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dy, dx in offsets:
                rr, cc = r + dy, c + dx
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc]:
                    uf.union(rr * w + cc, r * w + c)
    labels = np.zeros((h, w), dtype=np.int64)
    remap: dict[int, int] = {}
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                root = uf.find(r * w + c)
                if root not in remap:
                    remap[root] = len(remap) + 1
                labels[r, c] = remap[root]
    return labels, len(remap)


def betti_numbers(mask: np.ndarray) -> tuple[int, int]:
    """(b0, b1) of a binary mask: components and holes."""
    mask = np.asarray(mask).astype(bool)
    _, b0 = label_components(mask, 8)
    bg_labels, n_bg = label_components(~mask, 4)
    border = np.unique(
        np.concatenate([bg_labels[0], bg_labels[-1], bg_labels[:, 0], bg_labels[:, -1]])
    )
    touching = len([v for v in border if v > 0])
    return b0, n_bg - touching


@dataclass
class MetricsReport:
    classes: int
    dice: list[float]  # per class, averaged over images
    iou: list[float]
    betti0_error: float  # mean absolute difference, per image and class
    betti1_error: float
    per_image: list[dict] = field(default_factory=list)


def evaluate(preds: list[np.ndarray], gts: list[np.ndarray], classes: int) -> MetricsReport:
    """Aggregate per-image metrics over paired prediction/GT mask lists."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground-truth masks")
    if not preds:
        raise ValueError("nothing to evaluate")
    dice_acc = np.zeros(classes)
    iou_acc = np.zeros(classes)
    b0_acc = 0.0
    b1_acc = 0.0
    rows = []
    for idx, (p, g) in enumerate(zip(preds, gts)):
        row = {"index": idx, "dice": [], "iou": [], "betti0_error": 0.0, "betti1_error": 0.0}
        for c in range(1, classes + 1):
            d, i = dice_iou(p, g, c)
            dice_acc[c - 1] += d
            iou_acc[c - 1] += i
            b0p, b1p = betti_numbers(p == c)
            b0g, b1g = betti_numbers(g == c)
            row["dice"].append(d)
            row["iou"].append(i)
            row["betti0_error"] += abs(b0p - b0g) / classes
            row["betti1_error"] += abs(b1p - b1g) / classes
        b0_acc += row["betti0_error"]
        b1_acc += row["betti1_error"]
        rows.append(row)
    n = len(preds)
    return MetricsReport(
        classes=classes,
        dice=list(dice_acc / n),
        iou=list(iou_acc / n),
        betti0_error=b0_acc / n,
        betti1_error=b1_acc / n,
        per_image=rows,
    )


def format_report(report: MetricsReport, names: list[str] | None = None) -> str:
    """Tab-separated per-image rows followed by an aggregate summary block."""
    lines = ["index\tname\t" + "\t".join(f"dice_{c + 1}\tiou_{c + 1}" for c in range(report.classes))
             + "\tbetti0_err\tbetti1_err"]
    for row in report.per_image:
        name = names[row["index"]] if names else str(row["index"])
        cells = [str(row["index"]), name]
        for c in range(report.classes):
            cells.append(f"{row['dice'][c]:.6f}")
            cells.append(f"{row['iou'][c]:.6f}")
        cells.append(f"{row['betti0_error']:.6f}")
        cells.append(f"{row['betti1_error']:.6f}")
        lines.append("\t".join(cells))
    lines.append("== summary ==")
    for c in range(report.classes):
        lines.append(f"class {c + 1}\tdice {report.dice[c]:.6f}\tiou {report.iou[c]:.6f}")
    lines.append(f"betti0_error {report.betti0_error:.6f}")
    lines.append(f"betti1_error {report.betti1_error:.6f}")
    return "\n".join(lines) + "\n"
