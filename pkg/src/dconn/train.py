"""Deterministic SGD training loop.

A run is fully pinned by (config, seed, data): parameter init, the
per-epoch visiting order, and every update are derived from the config
seed through SplitMix64 streams, so two runs produce byte-identical
loss logs and checkpoints. The optimizer is plain SGD with momentum and
an optional polynomial learning-rate decay lr * (1 - step/steps)^0.9.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError
from .codec import encode_connectivity
from .losses import LossReport, SizePdf, estimate_size_pdf, save_size_pdf, total_loss
from .network import NetConfig, NetParams, init_params, net_forward, save_checkpoint
from .rng import SplitMix64, derive

POLY_POWER = 0.9


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite; message carries the step."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.5
    momentum: float = 0.9
    steps: int = 1000
    batch_size: int = 1
    poly_decay: bool = True

    def validate(self) -> None:
        if self.lr < 0.0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    use_sdl: bool = True
    sdl_bins: int = 16


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    data: str = ""
    out: str = ""

    def validate(self) -> None:
        self.net.validate()
        self.optim.validate()
        if self.loss.sdl_bins < 1:
            raise ValueError("sdl_bins must be >= 1")


_SECTION_FIELDS = {
    "net": set(NetConfig.__dataclass_fields__),
    "optimizer": set(OptimConfig.__dataclass_fields__),
    "loss": set(LossConfig.__dataclass_fields__),
}
_TOP_FIELDS = {"net", "optimizer", "loss", "seed", "data", "out"}


def parse_run_config(obj: dict) -> RunConfig:
    """Build a RunConfig from a JSON document; unknown keys are errors."""
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(obj) - _TOP_FIELDS
    if unknown:
        raise ValueError(f"unknown config key: {sorted(unknown)[0]!r}")
    sections = {}
    for section, cls in (("net", NetConfig), ("optimizer", OptimConfig), ("loss", LossConfig)):
        sub = obj.get(section, {})
        if not isinstance(sub, dict):
            raise ValueError(f"config section {section!r} must be an object")
        bad = set(sub) - _SECTION_FIELDS[section]
        if bad:
            raise ValueError(f"unknown config key: {section}.{sorted(bad)[0]}")
        kwargs = dict(sub)
        for key in ("encoder_channels", "decoder_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        sections[section] = cls(**kwargs)
    seed = obj.get("seed", 0)
    if "DCONN_SEED" in os.environ:
        seed = int(os.environ["DCONN_SEED"])
    cfg = RunConfig(
        net=sections["net"],
        optim=sections["optimizer"],
        loss=sections["loss"],
        seed=int(seed),
        data=str(obj.get("data", "")),
        out=str(obj.get("out", "")),
    )
    cfg.validate()
    return cfg


def learning_rate(optim: OptimConfig, step: int) -> float:
    if not optim.poly_decay:
        return optim.lr
    return optim.lr * (1.0 - step / optim.steps) ** POLY_POWER


def format_log_line(step: int, rep: LossReport) -> str:
    vals = (rep.total, rep.main, rep.prior, rep.sd, rep.decouple, rep.con_const)
    return str(step) + "\t" + "\t".join(format(v, ".17g") for v in vals)


LOG_HEADER = "step\ttotal\tmain\tprior\tsd\tdecouple\tcon_const"


@dataclass
class TrainResult:
    params: NetParams
    log_lines: list[str]
    reports: list[LossReport]
    pdf: SizePdf | None


def prepare_pairs(pairs, cfg: NetConfig):
    """Images to [1, H, W] float arrays plus precomputed connectivity labels."""
    prepped = []
    for img, mask in pairs:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        mask = np.asarray(mask, dtype=np.int64)
        prepped.append((img, mask, encode_connectivity(mask, cfg.classes)))
    return prepped


def train(cfg: RunConfig, pairs, params: NetParams | None = None,
          on_step=None) -> TrainResult:
    """Run the configured number of SGD steps over (image, mask) pairs."""
    cfg.validate()
    if not pairs:
        raise ValueError("empty training set")
    data = prepare_pairs(pairs, cfg.net)
    pdf = None
    if cfg.loss.use_sdl:
        pdf = estimate_size_pdf([m for _, m, _ in data], cfg.net.classes, cfg.loss.sdl_bins)
    if params is None:
        params = init_params(cfg.net, derive(cfg.seed, 1))

    order_rng = SplitMix64(derive(cfg.seed, 2))
    order: list[int] = []
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    log_lines = [LOG_HEADER]
    reports = []

    cursor = 0
    for step in range(cfg.optim.steps):
        grads = {name: np.zeros_like(p.data) for name, p in params.items()}
        batch_report = np.zeros(6)
        for _ in range(cfg.optim.batch_size):
            if cursor >= len(order):
                order = list(range(len(data)))
                order_rng.shuffle(order)
                cursor = 0
            img, mask, conn = data[order[cursor]]
            cursor += 1
            for p in params.values():
                p.grad = None
            try:
                out = net_forward(img, params, cfg.net)
                loss, rep = total_loss(out, mask, conn, pdf, cfg.loss.use_sdl)
                loss.backward()
            except NonFiniteError as e:
                raise TrainingAborted(f"non-finite loss at step {step}: {e}") from None
            for name, p in params.items():
                if p.grad is not None:
                    grads[name] += p.grad
            batch_report += np.array([rep.total, rep.main, rep.prior, rep.sd,
                                      rep.decouple, rep.con_const])
        scale = 1.0 / cfg.optim.batch_size
        lr = learning_rate(cfg.optim, step)
        for name, p in params.items():
            velocity[name] = cfg.optim.momentum * velocity[name] + grads[name] * scale
            p.data = p.data - lr * velocity[name]
        rep = LossReport(*(batch_report * scale))
        reports.append(rep)
        log_lines.append(format_log_line(step, rep))
        if on_step is not None:
            on_step(step, rep, params)

    return TrainResult(params=params, log_lines=log_lines, reports=reports, pdf=pdf)


def run_training(cfg: RunConfig, pairs, out_dir) -> TrainResult:
    """Train and write loss_log.tsv, model.dcw1 (and size_pdf.txt) to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    result = train(cfg, pairs)
    with open(os.path.join(out_dir, "loss_log.tsv"), "w") as f:
        f.write("\n".join(result.log_lines) + "\n")
    save_checkpoint(os.path.join(out_dir, "model.dcw1"), result.params)
    if result.pdf is not None:
        save_size_pdf(os.path.join(out_dir, "size_pdf.txt"), result.pdf)
    return result
