"""Training objectives.

Per head (main and prior outputs) the loss is

    L = [use_sdl] * size_density_loss + decouple + connectivity_consistency

and the run total is L_main + 0.3 * L_prior.

The size density loss is a Dice variant whose per-class weight is
-log of the empirical probability of the class's label size, so rare
label sizes are never down-weighted. The connectivity terms supervise
the 8-channel logits directly: `decouple` is binary cross-entropy over
all entries plus a second BCE restricted to edge pixels (pixels whose 8
ground-truth channels disagree), equally weighted; `con_const` penalizes
the L1 gap between each channel and its opposite-direction partner at
the neighboring pixel, the mutual-connectivity property that bilateral
voting relies on (exact labels score 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, amax, clip, concat, mul, shift2d, sigmoid, slice_axis, tlog, tabs, tsum
from .codec import OFFSETS, partner
from .network import ForwardOutput

BCE_EPS = 1e-6
WEIGHT_CLAMP = (0.1, 20.0)


@dataclass
class SizePdf:
    """Per-class histogram of positive-pixel label sizes.

    `edges[j]` holds bins+1 bin edges for foreground class j+1 and
    `masses[j]` the probability mass per bin over nonzero-size samples.
    Classes never observed with a nonzero size keep all-zero masses; a
    query there falls through to the clamped maximum weight.
    """

    classes: int
    bins: int
    edges: np.ndarray  # [classes, bins + 1]
    masses: np.ndarray  # [classes, bins]

    def mass(self, cls: int, k: int) -> float:
        """Probability mass of the bin containing size k > 0 for class cls."""
        lo, hi = self.edges[cls - 1, 0], self.edges[cls - 1, -1]
        idx = int((k - lo) * self.bins / (hi - lo))
        return float(self.masses[cls - 1, min(max(idx, 0), self.bins - 1)])


def estimate_size_pdf(labels: list[np.ndarray], classes: int, bins: int = 16) -> SizePdf:
    """Histogram nonzero per-image label sizes into equal-width bins."""
    if not labels:
        raise ValueError("need at least one label mask")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    edges = np.zeros((classes, bins + 1))
    masses = np.zeros((classes, bins))
    for c in range(1, classes + 1):
        sizes = np.array([int((lab == c).sum()) for lab in labels])
        sizes = sizes[sizes > 0]
        if sizes.size == 0:
            edges[c - 1] = np.linspace(0.0, 1.0, bins + 1)
            continue
        lo, hi = float(sizes.min()), float(sizes.max())
        if hi == lo:
            hi = lo + 1.0  # degenerate single-size class: everything lands in bin 0
        edges[c - 1] = np.linspace(lo, hi, bins + 1)
        idx = np.clip(((sizes - lo) * bins / (hi - lo)).astype(np.int64), 0, bins - 1)
        for i in idx:
            masses[c - 1, i] += 1.0
        masses[c - 1] /= sizes.size
    return SizePdf(classes, bins, edges, masses)


def size_density_weight(pdf: SizePdf, cls: int, k: int) -> float:
    """1 for empty labels, else clamp(-ln(bin mass), 0.1, 20)."""
    if k < 0:
        raise ValueError("label size must be >= 0")
    if k == 0:
        return 1.0
    m = pdf.mass(cls, k)
    w = -math.log(m) if m > 0.0 else math.inf
    return min(max(w, WEIGHT_CLAMP[0]), WEIGHT_CLAMP[1])


def save_size_pdf(path, pdf: SizePdf) -> None:
    lines = [f"classes {pdf.classes}", f"bins {pdf.bins}"]
    for c in range(1, pdf.classes + 1):
        lines.append(f"class {c}")
        lines.append("edges " + " ".join(format(v, ".17g") for v in pdf.edges[c - 1]))
        lines.append("masses " + " ".join(format(v, ".17g") for v in pdf.masses[c - 1]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_size_pdf(path) -> SizePdf:
    with open(path) as f:
        tokens = [line.split() for line in f if line.strip()]
    classes = int(tokens[0][1])
    bins = int(tokens[1][1])
    pdf = SizePdf(classes, bins, np.zeros((classes, bins + 1)), np.zeros((classes, bins)))
    c = 0
    for tok in tokens[2:]:
        if tok[0] == "class":
            c = int(tok[1])
        elif tok[0] == "edges":
            pdf.edges[c - 1] = [float(v) for v in tok[1:]]
        elif tok[0] == "masses":
            pdf.masses[c - 1] = [float(v) for v in tok[1:]]
    return pdf


# -- differentiable pieces ---------------------------------------------------


def bilateral_vote_t(p: Tensor) -> Tensor:
    """Autodiff bilateral voting on probabilities [classes, 8, H, W]."""
    voted = []
    for j, (dy, dx) in enumerate(OFFSETS):
        pj = slice_axis(p, 1, j, j + 1)
        pk = slice_axis(p, 1, partner(j), partner(j) + 1)
        voted.append(mul(pj, shift2d(pk, dy, dx)))
    return concat(voted, axis=1)


def rca_t(bicon: Tensor) -> Tensor:
    """Autodiff channel aggregation; gradient flows through the argmax channel."""
    return amax(bicon, axis=1)


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    pc = clip(p, BCE_EPS, 1.0 - BCE_EPS)
    t = Tensor(target)
    return -(mul(t, tlog(pc)) + mul(Tensor(1.0 - target), tlog(1.0 - pc)))


def sdl_loss(s: Tensor, g: np.ndarray, pdf: SizePdf) -> Tensor:
    """Size-density-weighted Dice variant over foreground classes.

    `s` holds per-class probabilities [classes, H, W]; `g` is the integer
    ground-truth mask. Stabilizer 1 in numerator and denominator.
    """
    classes = s.shape[0]
    if g.shape != s.shape[1:]:
        raise ValueError(f"mask shape {g.shape} does not match prediction {s.shape}")
    total = Tensor(0.0)
    for c in range(1, classes + 1):
        gc = (g == c).astype(np.float64)
        k = int(gc.sum())
        w = size_density_weight(pdf, c, k)
        sc = slice_axis(s, 0, c - 1, c)
        inter = tsum(mul(sc, Tensor(gc)))
        dice = (2.0 * inter + 1.0) / (tsum(sc) + float(gc.sum()) + 1.0)
        total = total + w * (1.0 - dice)
    return total


def bicon_loss(x: Tensor, c_gt: np.ndarray) -> tuple[Tensor, Tensor]:
    """Connectivity supervision on logits [classes, 8, H, W].

    Returns (decouple, con_const); see the module docstring for the
    definitions. `c_gt` must be binary.
    """
    if x.shape != c_gt.shape:
        raise ValueError(f"logits shape {x.shape} does not match labels {c_gt.shape}")
    if not np.isin(c_gt, (0, 1)).all():
        raise ValueError("connectivity labels must be binary")

    p = sigmoid(x)
    bce = _bce(p, c_gt)
    decouple = bce.mean()

    # edge pixels: the 8 ground-truth channels disagree
    edge = (c_gt.max(axis=1) != c_gt.min(axis=1)).astype(np.float64)  # [classes, H, W]
    n_edge_entries = edge.sum() * 8.0
    if n_edge_entries > 0:
        masked = mul(bce, Tensor(edge[:, None, :, :]))
        decouple = decouple + tsum(masked) * (1.0 / n_edge_entries)

    total = Tensor(0.0)
    count = 0.0
    h, w = x.shape[2], x.shape[3]
    for j, (dy, dx) in enumerate(OFFSETS):
        pj = slice_axis(p, 1, j, j + 1)
        pk = shift2d(slice_axis(p, 1, partner(j), partner(j) + 1), dy, dx)
        inb = np.zeros((h, w))
        rows = slice(max(-dy, 0), h + min(-dy, 0))
        cols = slice(max(-dx, 0), w + min(-dx, 0))
        inb[rows, cols] = 1.0
        total = total + tsum(mul(tabs(pj - pk), Tensor(inb)))
        count += x.shape[0] * inb.sum()
    con_const = total * (1.0 / count) if count > 0 else Tensor(0.0)
    return decouple, con_const


@dataclass
class LossReport:
    """Scalar components of one training step.

    Components combine the heads the same way the total does
    (x_main + 0.3 * x_prior), so total == main + 0.3 * prior and
    total == sd + decouple + con_const both hold.
    """

    total: float
    main: float
    prior: float
    sd: float
    decouple: float
    con_const: float


def total_loss(
    out: ForwardOutput,
    seg_gt: np.ndarray,
    conn_gt: np.ndarray,
    pdf: SizePdf | None,
    use_sdl: bool = True,
) -> tuple[Tensor, LossReport]:
    """Combined objective over both heads; returns (scalar tensor, report)."""
    if use_sdl and pdf is None:
        raise ValueError("use_sdl requires a size pdf")
    classes = conn_gt.shape[0]

    def head(x_flat: Tensor):
        x = x_flat.reshape(classes, 8, x_flat.shape[1], x_flat.shape[2])
        dec, con = bicon_loss(x, conn_gt)
        if use_sdl:
            s = rca_t(bilateral_vote_t(sigmoid(x)))
            sd = sdl_loss(s, seg_gt, pdf)
        else:
            sd = Tensor(0.0)
        return sd + dec + con, sd, dec, con

    l_main, sd_m, dec_m, con_m = head(out.x_main)
    l_prior, sd_p, dec_p, con_p = head(out.x_prior)
    total = l_main + 0.3 * l_prior

    def mix(a: Tensor, b: Tensor) -> float:
        return a.item() + 0.3 * b.item()

    report = LossReport(
        total=total.item(),
        main=l_main.item(),
        prior=l_prior.item(),
        sd=mix(sd_m, sd_p),
        decouple=mix(dec_m, dec_p),
        con_const=mix(con_m, con_p),
    )
    return total, report
