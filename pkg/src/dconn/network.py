"""Directional-connectivity segmentation network.

Pieces, wired in :func:`net_forward`:

  * a small trainable conv encoder (5 stages by default, stages 2+
    downsample by stride-2, deepest features at 1/16 resolution);
  * a directional-prior head: a 1x1 conv + bilinear upsample produces an
    auxiliary connectivity output whose squeezed channel statistics are
    gated into a per-channel prior vector in (0, 1);
  * sub-path direction excitation: the deepest features and the prior
    vector are split into 8 channel groups, each group runs position and
    channel attention, is scaled by its prior slice, re-encoded, and
    added back residually; the groups are restacked and recoded;
  * an interactive decoder with a feature flow (maps ``d``, upsampled
    with encoder skips) and a space flow (direction-enhanced maps ``r``
    whose pooled embedding gates each new ``d`` through a spatial
    sigmoid attention map);
  * an output head that upsamples all decoder feature maps to input
    size, concatenates them and maps to `8 * classes` connectivity
    logits.

Parameters live in a flat name -> Tensor dict so checkpoints, ablation
hooks, and the optimizer can address every learnable tensor directly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    channel_split,
    concat,
    conv2d,
    gap,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
    tsum,
    upsample_bilinear,
)
from .rng import SplitMix64

NetParams = dict[str, Tensor]


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 1
    classes: int = 1
    input_size: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    decoder_channels: tuple[int, ...] = (32, 16, 16, 16)
    # 0 = auto: 2 when the slice width is >= 4, else 1
    attention_reduction: int = 0

    @property
    def n_stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def c_last(self) -> int:
        return self.encoder_channels[-1]

    @property
    def c_k(self) -> int:
        return 8 * self.classes

    @property
    def slice_width(self) -> int:
        return self.c_last // 8

    @property
    def downsample(self) -> int:
        return 2 ** (self.n_stages - 1)

    @property
    def reduction(self) -> int:
        if self.attention_reduction:
            return self.attention_reduction
        return 2 if self.slice_width >= 4 else 1

    def validate(self) -> None:
        if self.input_channels < 1 or self.classes < 1:
            raise ValueError("input_channels and classes must be >= 1")
        if len(self.encoder_channels) < 3:
            raise ValueError("need at least 3 encoder stages")
        if any(c < 1 for c in self.encoder_channels):
            raise ValueError("encoder channel widths must be >= 1")
        if self.c_last % 8:
            raise ValueError(f"last encoder width {self.c_last} must be divisible by 8")
        if len(self.decoder_channels) != self.n_stages - 1:
            raise ValueError(
                f"decoder_channels needs {self.n_stages - 1} entries, got {len(self.decoder_channels)}"
            )
        if any(c % 2 or c < 2 for c in self.decoder_channels):
            raise ValueError("decoder channel widths must be even (space flow re-encodes to half width)")
        if self.input_size % self.downsample:
            raise ValueError(f"input size {self.input_size} not divisible by {self.downsample}")
        if self.slice_width % self.reduction:
            raise ValueError(f"slice width {self.slice_width} not divisible by reduction {self.reduction}")


@dataclass
class ForwardOutput:
    x_main: Tensor  # connectivity logits [8 * classes, H, W]
    x_prior: Tensor  # auxiliary connectivity logits, same shape
    diagnostics: dict = field(default_factory=dict)


# -- parameter construction ------------------------------------------------


def _uniform_array(rng: SplitMix64, shape: tuple, bound: float) -> np.ndarray:
    flat = np.empty(int(np.prod(shape)))
    for i in range(flat.size):
        flat[i] = rng.uniform(-bound, bound)
    return flat.reshape(shape)


def _add_conv(params: NetParams, rng: SplitMix64, name: str, k: int, c: int, ksz: int) -> None:
    # He-style uniform bound: without normalization layers, a plain
    # 1/sqrt(fan_in) bound shrinks activations ~1/sqrt(6) per conv+relu
    # and the deep features vanish (measured rms 5e-5 at stage 5).
    bound = math.sqrt(6.0 / (c * ksz * ksz))
    params[name + ".w"] = Tensor(_uniform_array(rng, (k, c, ksz, ksz), bound), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(k), requires_grad=True)


def _decoder_plan(cfg: NetConfig) -> list[tuple[int, int, int, int]]:
    """(produced d index, r-input width, skip width, d width) per layer."""
    plan = []
    r_width = cfg.c_last
    for step, d_width in enumerate(cfg.decoder_channels):
        li = cfg.n_stages - 1 - step
        plan.append((li, r_width, cfg.encoder_channels[li - 1], d_width))
        r_width = d_width // 2
    return plan


def init_params(cfg: NetConfig, seed: int) -> NetParams:
    """Fresh parameters; uniform(+-1/sqrt(fan_in)) weights, zero biases/gammas."""
    cfg.validate()
    rng = SplitMix64(seed)
    p: NetParams = {}

    c_in = cfg.input_channels
    for s, c_out in enumerate(cfg.encoder_channels, start=1):
        _add_conv(p, rng, f"enc{s}.conv1", c_out, c_in, 3)
        _add_conv(p, rng, f"enc{s}.conv2", c_out, c_out, 3)
        c_in = c_out

    _add_conv(p, rng, "prior.head", cfg.c_k, cfg.c_last, 1)
    _add_conv(p, rng, "prior.squeeze", cfg.c_last, cfg.c_k, 1)
    _add_conv(p, rng, "prior.gate", cfg.c_last, cfg.c_last, 1)

    sw = cfg.slice_width
    attn_w = max(sw // cfg.reduction, 1)
    for i in range(1, 9):
        pre = f"sde.path{i}"
        _add_conv(p, rng, pre + ".pam.q", attn_w, sw, 1)
        _add_conv(p, rng, pre + ".pam.k", attn_w, sw, 1)
        _add_conv(p, rng, pre + ".pam.v", sw, sw, 1)
        p[pre + ".pam.gamma"] = Tensor(0.0, requires_grad=True)
        p[pre + ".cam.gamma"] = Tensor(0.0, requires_grad=True)
        _add_conv(p, rng, pre + ".out", sw, sw, 1)
    _add_conv(p, rng, "sde.recode", cfg.c_last, cfg.c_last, 1)

    for li, r_w, skip_w, d_w in _decoder_plan(cfg):
        _add_conv(p, rng, f"dec{li}.feat.conv1", r_w, r_w, 3)
        _add_conv(p, rng, f"dec{li}.feat.conv2", r_w, r_w, 3)
        _add_conv(p, rng, f"dec{li}.feat.fuse", d_w, r_w + skip_w, 1)
        _add_conv(p, rng, f"dec{li}.space.proj_d", d_w, d_w, 1)
        _add_conv(p, rng, f"dec{li}.space.proj_n", d_w, r_w, 1)
        _add_conv(p, rng, f"dec{li}.space.recode", d_w // 2, d_w, 1)

    _add_conv(p, rng, "head", cfg.c_k, sum(cfg.decoder_channels), 1)
    return p


def zero_sde_excitation(params: NetParams, cfg: NetConfig) -> None:
    """Ablation hook: make the whole excitation module an exact identity.

    Zeroes every attention gamma and per-path output conv and sets the
    recode conv to the channel identity, so the module output equals its
    input bit for bit.
    """
    for i in range(1, 9):
        pre = f"sde.path{i}"
        params[pre + ".pam.gamma"].data[...] = 0.0
        params[pre + ".cam.gamma"].data[...] = 0.0
        params[pre + ".out.w"].data[...] = 0.0
        params[pre + ".out.b"].data[...] = 0.0
    eye = np.eye(cfg.c_last).reshape(cfg.c_last, cfg.c_last, 1, 1)
    params["sde.recode.w"].data[...] = eye
    params["sde.recode.b"].data[...] = 0.0


# -- forward pieces -----------------------------------------------------------


def _conv(x: Tensor, params: NetParams, name: str, stride: int = 1) -> Tensor:
    return conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride)


def _vec_linear(v: Tensor, params: NetParams, name: str) -> Tensor:
    """1x1 conv applied to a [1, C] vector, returning [1, C_out]."""
    c = v.shape[1]
    out = _conv(reshape(v, (1, c, 1, 1)), params, name)
    return reshape(out, (1, out.shape[1]))


def encoder_forward(x: Tensor, params: NetParams, cfg: NetConfig) -> list[Tensor]:
    """Run all encoder stages; returns [e1 .. e_n]."""
    if x.shape[2] % cfg.downsample or x.shape[3] % cfg.downsample:
        raise ValueError(f"input spatial size {x.shape[2:]} not divisible by {cfg.downsample}")
    outs = []
    h = x
    for s in range(1, cfg.n_stages + 1):
        h = relu(_conv(h, params, f"enc{s}.conv1", stride=1 if s == 1 else 2))
        h = relu(_conv(h, params, f"enc{s}.conv2"))
        outs.append(h)
    return outs


def directional_prior(e_last: Tensor, params: NetParams, cfg: NetConfig) -> tuple[Tensor, Tensor]:
    """Auxiliary connectivity logits at input size + per-channel prior in (0, 1)."""
    logits_small = _conv(e_last, params, "prior.head")
    factor = cfg.input_size // e_last.shape[2]
    x_prior = upsample_bilinear(logits_small, factor) if factor > 1 else logits_small
    pooled = gap(sigmoid(x_prior))  # summarize probabilities, not raw logits
    v = relu(_vec_linear(pooled, params, "prior.squeeze"))
    alpha_prior = sigmoid(_vec_linear(v, params, "prior.gate"))
    return x_prior, alpha_prior


def pam_forward(x: Tensor, params: NetParams, prefix: str) -> Tensor:
    """Position attention over the h*w grid, residual with learnable gamma."""
    c, h, w = x.shape[1], x.shape[2], x.shape[3]
    hw = h * w
    q = reshape(_conv(x, params, prefix + ".q"), (-1, hw))
    k = reshape(_conv(x, params, prefix + ".k"), (-1, hw))
    v = reshape(_conv(x, params, prefix + ".v"), (c, hw))
    attn = softmax(matmul(transpose(q), k), axis=1)  # [hw, hw], rows sum to 1
    out = reshape(matmul(v, transpose(attn)), (1, c, h, w))
    return add(mul(params[prefix + ".gamma"], out), x)


def cam_forward(x: Tensor, params: NetParams, prefix: str) -> Tensor:
    """Channel attention from the channel Gram matrix, residual with gamma."""
    c, h, w = x.shape[1], x.shape[2], x.shape[3]
    xf = reshape(x, (c, h * w))
    attn = softmax(matmul(xf, transpose(xf)), axis=1)  # [c, c], rows sum to 1
    out = reshape(matmul(attn, xf), (1, c, h, w))
    return add(mul(params[prefix + ".gamma"], out), x)


def sub_path_excitation(e_last: Tensor, alpha_prior: Tensor, params: NetParams, cfg: NetConfig) -> Tensor:
    """Slice into 8 direction sub-paths, excite each, restack and recode."""
    sw = cfg.slice_width
    e_slices = channel_split(e_last, 8, axis=1)
    a_slices = channel_split(alpha_prior, 8, axis=1)
    outs = []
    for i in range(8):
        pre = f"sde.path{i + 1}"
        attended = cam_forward(pam_forward(e_slices[i], params, pre + ".pam"), params, pre + ".cam")
        gate = reshape(a_slices[i], (1, sw, 1, 1))
        excited = _conv(mul(gate, attended), params, pre + ".out")
        outs.append(add(excited, e_slices[i]))
    return _conv(concat(outs, axis=1), params, "sde.recode")


def space_block(r: Tensor, d: Tensor, params: NetParams, prefix: str) -> tuple[Tensor, Tensor]:
    """Gate a half-width re-encoding of d by a spatial map built from r's embedding."""
    n = gap(r)  # [1, C_r]
    d_proj = _conv(d, params, prefix + ".proj_d")
    n_proj = _vec_linear(n, params, prefix + ".proj_n")
    scores = tsum(mul(d_proj, reshape(n_proj, (1, d.shape[1], 1, 1))), axis=1, keepdims=True)
    alpha = sigmoid(scores)  # [1, 1, h, w]
    r_next = mul(alpha, _conv(d, params, prefix + ".recode"))
    return r_next, alpha


def feature_block(r: Tensor, skip: Tensor, params: NetParams, prefix: str) -> Tensor:
    """Two 3x3 convs, x2 bilinear upsample, skip concat, 1x1 fuse."""
    if skip.shape[2] != 2 * r.shape[2] or skip.shape[3] != 2 * r.shape[3]:
        raise ValueError(f"skip spatial size {skip.shape[2:]} is not 2x the input {r.shape[2:]}")
    h = relu(_conv(r, params, prefix + ".conv1"))
    h = relu(_conv(h, params, prefix + ".conv2"))
    up = upsample_bilinear(h, 2)
    return _conv(concat([up, skip], axis=1), params, prefix + ".fuse")


def net_forward(image, params: NetParams, cfg: NetConfig, diagnostics: bool = False) -> ForwardOutput:
    """Full forward pass on one [C_in, H, W] image (or [1, C_in, H, W] tensor)."""
    x = as_tensor(image)
    if x.ndim == 3:
        x = reshape(x, (1,) + tuple(x.shape))
    if x.shape[1] != cfg.input_channels or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ValueError(f"image shape {x.shape[1:]} does not match config "
                         f"({cfg.input_channels}, {cfg.input_size}, {cfg.input_size})")

    encoded = encoder_forward(x, params, cfg)
    x_prior, alpha_prior = directional_prior(encoded[-1], params, cfg)
    e_sde = sub_path_excitation(encoded[-1], alpha_prior, params, cfg)

    r = e_sde  # feature and space flows both start at the excited map
    d_maps, alpha_maps = [], []
    for li, _, _, _ in _decoder_plan(cfg):
        d = feature_block(r, encoded[li - 1], params, f"dec{li}.feat")
        r, alpha = space_block(r, d, params, f"dec{li}.space")
        d_maps.append(d)
        alpha_maps.append(alpha)

    ups = []
    for d in d_maps:
        factor = cfg.input_size // d.shape[2]
        ups.append(upsample_bilinear(d, factor) if factor > 1 else d)
    x_main = _conv(concat(ups, axis=1), params, "head")

    hw = (cfg.c_k, cfg.input_size, cfg.input_size)
    diag = {}
    if diagnostics:
        diag = {"alpha_prior": alpha_prior, "alpha_nd": alpha_maps, "e_sde": e_sde, "d_maps": d_maps}
    return ForwardOutput(reshape(x_main, hw), reshape(x_prior, hw), diag)


def count_attention_params(width: int, reduction: int) -> int:
    """Learnable scalars inside one position+channel attention pair."""
    qk = max(width // reduction, 1)
    pam = 2 * (width * qk + qk) + width * width + width + 1
    cam = 1
    return pam + cam


# -- DCW1 checkpoint format -----------------------------------------------------
#
# magic "DCW1"; u32 tensor count; per tensor: u32 name length, UTF-8 name,
# u32 ndim, u32 dims, f32 little-endian data. All integers little-endian.

_CKPT_MAGIC = b"DCW1"


def save_checkpoint(path, params: NetParams) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.data.ndim))
            for dim in t.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(t.data.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    from .codec import FormatError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError("bad DCW1 magic")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
            pos += 4 * n
            out[name] = data.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise FormatError(f"truncated DCW1 payload: {e}") from None
    if pos != len(raw):
        raise FormatError(f"bad DCW1 length: {len(raw) - pos} trailing bytes")
    return out


def apply_checkpoint(params: NetParams, arrays: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into an initialized parameter dict."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint does not match config: missing={sorted(missing)[:3]} "
                         f"extra={sorted(extra)[:3]}")
    for name, arr in arrays.items():
        if params[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} "
                             f"vs config {params[name].data.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in checkpoint tensor {name}")
        params[name].data = arr.astype(np.float64)
