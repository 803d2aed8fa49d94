"""Command-line front end.

Subcommands: gen, encode, decode, train, eval, gradcheck.
Exit codes: 0 ok, 1 check failure, 2 usage/format error.
The environment variable DCONN_SEED overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import codec, metrics, synth
from .codec import FormatError
from .gradcheck import run_checks
from .losses import load_size_pdf
from .network import apply_checkpoint, init_params, load_checkpoint, net_forward
from .pgm import read_pgm, write_pgm
from .train import TrainingAborted, parse_run_config, run_training


def _cmd_gen(args) -> int:
    seed = int(os.environ.get("DCONN_SEED", args.seed))
    spec = synth.DatasetSpec(
        kind=args.kind,
        count=args.n,
        size=args.size,
        seed=seed,
        area_range=(args.area_min, args.area_max),
        noise=args.noise,
    )
    spec.validate()
    pairs = synth.generate(spec)
    synth.write_dataset(args.out, spec, pairs)
    print(f"wrote {len(pairs)} images to {args.out}")
    return 0


def _cmd_encode(args) -> int:
    seg = read_pgm(args.seg).astype(np.int64)
    mask = codec.encode_connectivity(seg, args.classes)
    codec.write_cmk(args.out, mask)
    print(f"encoded {args.seg} -> {args.out} ({args.classes} classes)")
    return 0


def _cmd_decode(args) -> int:
    mask = codec.read_cmk(args.conn)
    seg = codec.decode_segmentation(mask, threshold=args.threshold)
    write_pgm(args.out, seg)
    print(f"decoded {args.conn} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    with open(args.config) as f:
        cfg = parse_run_config(json.load(f))
    data_dir = args.data or cfg.data
    out_dir = args.out or cfg.out
    if not data_dir or not out_dir:
        raise ValueError("train needs data and out paths (config or flags)")
    pairs, _ = synth.load_dataset(data_dir)
    result = run_training(cfg, pairs, out_dir)
    print(f"trained {cfg.optim.steps} steps; final total loss "
          f"{result.reports[-1].total:.6f}; wrote {out_dir}")
    return 0


def _predict_mask(img, params, cfg, threshold: float):
    out = net_forward(img, params, cfg.net)
    probs = 1.0 / (1.0 + np.exp(-out.x_main.data))
    conn = probs.reshape(cfg.net.classes, 8, cfg.net.input_size, cfg.net.input_size)
    return codec.decode_segmentation(conn, threshold=threshold)


def _boundary(mask: np.ndarray) -> np.ndarray:
    m = mask > 0
    interior = np.ones_like(m)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        interior &= codec._shifted(m, dy, dx, fill=False)
    return m & ~interior


def _cmd_eval(args) -> int:
    with open(args.config) as f:
        cfg = parse_run_config(json.load(f))
    params = init_params(cfg.net, seed=0)
    apply_checkpoint(params, load_checkpoint(args.checkpoint))
    pairs, _ = synth.load_dataset(args.data)
    preds, gts = [], []
    for img, mask in pairs:
        preds.append(_predict_mask(img[None], params, cfg, args.threshold))
        gts.append(mask)
    report = metrics.evaluate(preds, gts, cfg.net.classes)
    text = metrics.format_report(report)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    sys.stdout.write(text)
    if args.overlays:
        os.makedirs(args.overlays, exist_ok=True)
        for idx, (pred, gt) in enumerate(zip(preds, gts)):
            overlay = np.zeros(pred.shape, dtype=np.uint8)
            overlay[pred > 0] = 128
            overlay[_boundary(gt)] = 255
            write_pgm(os.path.join(args.overlays, f"overlay_{idx:04d}.pgm"), overlay)
    return 0


def _cmd_gradcheck(args) -> int:
    failures = []
    for name, err, threshold, passed in run_checks(args.scope, args.eps):
        print(f"{name:<16} max_rel_err {err:.3e}  threshold {threshold:.0e}  "
              f"{'PASS' if passed else 'FAIL'}")
        if not passed:
            failures.append(name)
    if failures:
        print(f"FAILED: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dconn",
                                 description="directional connectivity segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--kind", choices=synth.KINDS, default="blobs")
    gen.add_argument("--n", type=int, default=20)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--area-min", type=float, default=20.0)
    gen.add_argument("--area-max", type=float, default=400.0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen)

    enc = sub.add_parser("encode", help="segmentation PGM -> connectivity CMK")
    enc.add_argument("--seg", required=True)
    enc.add_argument("--classes", type=int, default=1)
    enc.add_argument("--out", required=True)
    enc.set_defaults(func=_cmd_encode)

    dec = sub.add_parser("decode", help="connectivity CMK -> segmentation PGM")
    dec.add_argument("--conn", required=True)
    dec.add_argument("--threshold", type=float, default=0.5)
    dec.add_argument("--out", required=True)
    dec.set_defaults(func=_cmd_decode)

    tr = sub.add_parser("train", help="train from a JSON run config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", default="")
    tr.add_argument("--out", default="")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--out", default="")
    ev.add_argument("--overlays", default="")
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--scope", default="all")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.set_defaults(func=_cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as e:
        msg = e.args[0] if e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
