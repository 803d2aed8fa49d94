"""Finite-difference gradient verification.

`grad_check` compares analytic gradients against central differences
(f(x+eps) - f(x-eps)) / (2 eps) elementwise, with relative error
|fd - analytic| / max(|fd|, |analytic|, 1e-8). The registry at the
bottom wires up one check per primitive op, per composite block, and for
the full network loss; the CLI `gradcheck` subcommand runs them.

Known non-smooth points (relu kink at 0, |x| at 0, clip edges, max
ties) are avoided by nudging sampled inputs away from them — central
differences straddle the kink otherwise and disagree with any chosen
subgradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import NetConfig, init_params, net_forward
from .codec import encode_connectivity
from .losses import bicon_loss, estimate_size_pdf, sdl_loss, total_loss
from .rng import SplitMix64


def grad_check(fn: Callable[[], Tensor], params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    `fn` must re-execute the computation from scratch on each call,
    reading the current `.data` of every tensor in `params`.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(fd), abs(an_flat[i]), 1e-8)
            worst = max(worst, abs(fd - an_flat[i]) / denom)
    return worst


def _rand(rng: SplitMix64, shape, lo=-1.0, hi=1.0, nudge=0.0) -> np.ndarray:
    flat = np.empty(int(np.prod(shape)))
    for i in range(flat.size):
        v = rng.uniform(lo, hi)
        if nudge and abs(v) < nudge:
            v = nudge if v >= 0 else -nudge
        flat[i] = v
    return flat.reshape(shape)


TINY_NET = NetConfig(
    input_channels=1,
    classes=1,
    input_size=8,
    encoder_channels=(2, 4, 8),
    decoder_channels=(4, 2),
)


def _check_conv(ksize: int, stride: int):
    def run(eps: float) -> float:
        rng = SplitMix64(11 * ksize + stride)
        x = Tensor(_rand(rng, (1, 2, 5, 5)), requires_grad=True)
        w = Tensor(_rand(rng, (3, 2, ksize, ksize)), requires_grad=True)
        b = Tensor(_rand(rng, (3,)), requires_grad=True)
        tgt = _rand(rng, (1,))  # fixed projection makes the loss non-trivial

        def fn():
            y = ad.conv2d(x, w, b, stride=stride)
            return ad.tsum(y * y) + tgt[0] * ad.tsum(y)

        return grad_check(fn, [x, w, b], eps)

    return run


def _check_unary(op, nudge=0.0, lo=-2.0, hi=2.0):
    def run(eps: float) -> float:
        rng = SplitMix64(23)
        x = Tensor(_rand(rng, (3, 4), lo=lo, hi=hi, nudge=nudge), requires_grad=True)

        def fn():
            y = op(x)
            return ad.tsum(y * y)

        return grad_check(fn, [x], eps)

    return run


def _check_gap(eps: float) -> float:
    rng = SplitMix64(31)
    x = Tensor(_rand(rng, (1, 3, 4, 4)), requires_grad=True)

    def fn():
        y = ad.gap(x)
        return ad.tsum(y * y)

    return grad_check(fn, [x], eps)


def _check_upsample(eps: float) -> float:
    rng = SplitMix64(37)
    x = Tensor(_rand(rng, (1, 2, 3, 3)), requires_grad=True)

    def fn():
        y = ad.upsample_bilinear(x, 2)
        return ad.tsum(y * y)

    return grad_check(fn, [x], eps)


def _check_matmul(eps: float) -> float:
    rng = SplitMix64(41)
    a = Tensor(_rand(rng, (4, 4)), requires_grad=True)
    b = Tensor(_rand(rng, (4, 4)), requires_grad=True)

    def fn():
        y = ad.matmul(a, b)
        return ad.tsum(y * y)

    return grad_check(fn, [a, b], eps)


def _check_softmax(eps: float) -> float:
    rng = SplitMix64(43)
    x = Tensor(_rand(rng, (3, 5)), requires_grad=True)
    w = _rand(rng, (3, 5))

    def fn():
        return ad.tsum(ad.softmax(x, axis=1) * Tensor(w))

    return grad_check(fn, [x], eps)


def _check_amax(eps: float) -> float:
    rng = SplitMix64(47)
    # spread values so +-eps never flips the argmax
    x = Tensor(np.arange(24).reshape(2, 3, 4) * 0.37 + _rand(rng, (2, 3, 4), lo=-0.05, hi=0.05),
               requires_grad=True)

    def fn():
        y = ad.amax(x, axis=1)
        return ad.tsum(y * y)

    return grad_check(fn, [x], eps)


def _check_shift(eps: float) -> float:
    rng = SplitMix64(53)
    x = Tensor(_rand(rng, (1, 2, 4, 4)), requires_grad=True)

    def fn():
        y = ad.shift2d(x, 1, -1) + ad.shift2d(x, -1, 1)
        return ad.tsum(y * y)

    return grad_check(fn, [x], eps)


def _check_slice_concat(eps: float) -> float:
    rng = SplitMix64(59)
    x = Tensor(_rand(rng, (1, 8, 2, 2)), requires_grad=True)
    w = _rand(rng, (1, 8, 2, 2))

    def fn():
        parts = ad.channel_split(x, 4, axis=1)
        y = ad.concat(parts[::-1], axis=1)
        return ad.tsum(y * Tensor(w))

    return grad_check(fn, [x], eps)


def _check_attention(eps: float) -> float:
    from .network import cam_forward, pam_forward

    cfg = NetConfig(encoder_channels=(2, 4, 8), decoder_channels=(4, 2), input_size=8)
    params = init_params(cfg, seed=3)
    rng = SplitMix64(61)
    x = Tensor(_rand(rng, (1, 1, 3, 3)), requires_grad=True)
    # nonzero gammas so the attention path contributes
    params["sde.path1.pam.gamma"].data = np.asarray(0.7)
    params["sde.path1.cam.gamma"].data = np.asarray(-0.4)
    targets = [x] + [params[k] for k in params if k.startswith("sde.path1.")]

    def fn():
        y = cam_forward(pam_forward(x, params, "sde.path1.pam"), params, "sde.path1.cam")
        return ad.tsum(y * y)

    return grad_check(fn, targets, eps)


def _check_space_block(eps: float) -> float:
    from .network import space_block

    cfg = TINY_NET
    params = init_params(cfg, seed=5)
    rng = SplitMix64(67)
    r = Tensor(_rand(rng, (1, 8, 2, 2)), requires_grad=True)
    d = Tensor(_rand(rng, (1, 4, 4, 4)), requires_grad=True)
    names = [k for k in params if k.startswith("dec2.space.")]
    targets = [r, d] + [params[k] for k in names]

    def fn():
        out, _ = space_block(r, d, params, "dec2.space")
        return ad.tsum(out * out)

    return grad_check(fn, targets, eps)


def _check_feature_block(eps: float) -> float:
    from .network import feature_block

    cfg = TINY_NET
    params = init_params(cfg, seed=7)
    rng = SplitMix64(71)
    r = Tensor(_rand(rng, (1, 8, 2, 2)), requires_grad=True)
    skip = Tensor(_rand(rng, (1, 4, 4, 4)), requires_grad=True)
    names = [k for k in params if k.startswith("dec2.feat.")]
    targets = [r, skip] + [params[k] for k in names]

    def fn():
        out = feature_block(r, skip, params, "dec2.feat")
        return ad.tsum(out * out)

    return grad_check(fn, targets, eps)


def _check_encoder(eps: float) -> float:
    from .network import encoder_forward

    cfg = TINY_NET
    params = init_params(cfg, seed=9)
    rng = SplitMix64(73)
    img = Tensor(_rand(rng, (1, 1, 8, 8), lo=0.05, hi=0.95), requires_grad=True)
    targets = [img] + [params[k] for k in params if k.startswith("enc")]

    def fn():
        e_last = encoder_forward(img, params, cfg)[-1]
        return ad.tsum(ad.mul(e_last, e_last))

    return grad_check(fn, targets, eps)


def _check_sdl(eps: float) -> float:
    rng = SplitMix64(79)
    gt = (_rand(SplitMix64(80), (4, 4), 0.0, 1.0) > 0.5).astype(np.int64)
    pdf = estimate_size_pdf([gt, np.roll(gt, 1)], classes=1, bins=4)
    s_raw = Tensor(_rand(rng, (1, 4, 4), lo=0.05, hi=0.95), requires_grad=True)

    def fn():
        return sdl_loss(ad.sigmoid(s_raw), gt, pdf)

    return grad_check(fn, [s_raw], eps)


def _check_bicon(eps: float) -> float:
    rng = SplitMix64(83)
    gt_seg = (_rand(SplitMix64(84), (4, 4), 0, 1) > 0.45).astype(np.int64)
    c_gt = encode_connectivity(gt_seg, 1)
    x = Tensor(_rand(rng, (1, 8, 4, 4), lo=-2.0, hi=2.0, nudge=1e-3), requires_grad=True)

    def fn():
        dec, con = bicon_loss(x, c_gt)
        return dec + con

    return grad_check(fn, [x], eps)


def _check_full_net(eps: float) -> float:
    cfg = TINY_NET
    params = init_params(cfg, seed=1)
    rng = SplitMix64(97)
    img = _rand(rng, (1, 8, 8), lo=0.05, hi=0.95)
    seg = np.zeros((8, 8), dtype=np.int64)
    seg[2:5, 2:6] = 1
    seg[6, 1:4] = 1
    conn = encode_connectivity(seg, 1)
    pdf = estimate_size_pdf([seg], classes=1, bins=4)
    targets = list(params.values())

    def fn():
        out = net_forward(img, params, cfg)
        loss, _ = total_loss(out, seg, conn, pdf, use_sdl=True)
        return loss

    return grad_check(fn, targets, eps)


# name -> (runner, threshold)
REGISTRY: dict[str, tuple[Callable[[float], float], float]] = {
    "conv1x1": (_check_conv(1, 1), 1e-5),
    "conv3x3": (_check_conv(3, 1), 1e-5),
    "conv3x3_s2": (_check_conv(3, 2), 1e-5),
    "relu": (_check_unary(ad.relu, nudge=1e-3), 1e-5),
    "sigmoid": (_check_unary(ad.sigmoid), 1e-5),
    "log": (_check_unary(ad.tlog, lo=0.1, hi=3.0), 1e-5),
    "abs": (_check_unary(ad.tabs, nudge=1e-3), 1e-5),
    "clip": (_check_unary(lambda t: ad.clip(t, -1.5, 1.5), nudge=1e-3), 1e-5),
    "gap": (_check_gap, 1e-5),
    "upsample": (_check_upsample, 1e-5),
    "matmul": (_check_matmul, 1e-5),
    "softmax": (_check_softmax, 1e-5),
    "amax": (_check_amax, 1e-5),
    "shift": (_check_shift, 1e-5),
    "slice_concat": (_check_slice_concat, 1e-5),
    "attention": (_check_attention, 1e-4),
    "space_block": (_check_space_block, 1e-4),
    "feature_block": (_check_feature_block, 1e-4),
    "encoder": (_check_encoder, 1e-4),
    "sdl": (_check_sdl, 1e-4),
    "bicon": (_check_bicon, 1e-4),
    "full_net": (_check_full_net, 1e-3),
}


def run_checks(scope: str = "all", eps: float = 1e-5):
    """Yield (name, max_rel_err, threshold, passed) for the selected scope."""
    if scope == "all":
        names = list(REGISTRY)
    elif scope in REGISTRY:
        names = [scope]
    else:
        raise KeyError(f"unknown gradcheck target {scope!r}; known: {', '.join(REGISTRY)}")
    for name in names:
        runner, threshold = REGISTRY[name]
        err = runner(eps)
        yield name, err, threshold, err < threshold
