"""Command-line interface: train, eval, infer, params, synth."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch
from PIL import Image

from .data import SynthSpec, generate_dataset, load_dataset, load_image
from .errors import ConfigurationError, ShapeError
from .metrics import (
    accumulate,
    format_report_table,
    render_overlay,
    report,
    sliding_window_infer,
)
from .peft import count_params, count_peft_params
from .siamese import fuse_predictions
from .training import RunConfig, build_model, evaluate_model, load_checkpoint, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="changedet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default="runs/last")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--window", type=int, default=None)
    p_eval.add_argument("--stride", type=int, default=None)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--json", dest="json_out", default=None)
    p_eval.add_argument("--save-maps", dest="save_maps", default=None)

    p_infer = sub.add_parser("infer", help="predict a change map for one image pair")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--a", dest="img_a", required=True)
    p_infer.add_argument("--b", dest="img_b", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.add_argument("--label", default=None)
    p_infer.add_argument("--window", type=int, default=None)
    p_infer.add_argument("--stride", type=int, default=None)

    p_params = sub.add_parser("params", help="print parameter accounting for a config")
    p_params.add_argument("--config", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset split")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--split", default="train")
    p_synth.add_argument("--n", type=int, default=64)
    p_synth.add_argument("--canvas", type=int, default=64)
    p_synth.add_argument("--change-fraction", type=float, default=0.5)
    p_synth.add_argument("--pseudo-change", type=float, default=0.1)
    p_synth.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    state = train(cfg, args.out)
    print(f"trained {state.step} steps, best val IoU {state.best_val_iou:.4f}")
    print(f"checkpoints in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config)
    model, _, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(cfg.data.root, args.split)
    rep, counts = evaluate_model(model, samples, args.window, args.stride)
    print(format_report_table(rep))
    payload = {"split": args.split, "pixels": counts.total, **rep.to_dict()}
    print(json.dumps(payload))
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(payload, f, indent=2)
    if args.save_maps:
        os.makedirs(args.save_maps, exist_ok=True)
        with torch.no_grad():
            for s in samples:
                probs = _infer_probs(model, s.img_a, s.img_b, args.window, args.stride)
                pred = probs.argmax(dim=0).numpy()
                overlay = render_overlay(pred, s.mask)
                Image.fromarray(overlay).save(os.path.join(args.save_maps, f"{s.id}.png"))
    return 0


def _infer_probs(model, img_a_np, img_b_np, window, stride):
    img_a = torch.from_numpy(img_a_np)
    img_b = torch.from_numpy(img_b_np)
    if window is not None:
        return sliding_window_infer(model, img_a, img_b, window, stride or max(1, window // 2))
    model.eval()
    logits_a, logits_b = model(img_a.unsqueeze(0), img_b.unsqueeze(0))
    return fuse_predictions(logits_a, logits_b)[0]


def _cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    img_a = load_image(args.img_a)
    img_b = load_image(args.img_b)
    with torch.no_grad():
        probs = _infer_probs(model, img_a, img_b, args.window, args.stride)
    pred = probs.argmax(dim=0).numpy().astype(np.uint8)
    Image.fromarray(pred * 255).save(args.out)
    print(f"wrote change map {args.out}")
    if args.label:
        label = np.asarray(Image.open(args.label).convert("L"))
        gt = (label > 127).astype(np.uint8)
        overlay_path = os.path.splitext(args.out)[0] + "_overlay.png"
        Image.fromarray(render_overlay(pred, gt)).save(overlay_path)
        rep = report(accumulate(pred, gt))
        print(format_report_table(rep))
        print(f"wrote error overlay {overlay_path}")
    return 0


def _cmd_params(args) -> int:
    cfg = RunConfig.from_file(args.config)
    model = build_model(cfg)
    trainable, total = count_params(model)
    encoder_delta = count_peft_params(model.encoder)
    decoder_trainable = sum(p.numel() for p in model.decoder.parameters() if p.requires_grad)
    print(f"{'encoder PEFT deltas':<24}{encoder_delta:>12,}")
    print(f"{'decoder (trainable)':<24}{decoder_trainable:>12,}")
    print(f"{'trainable total':<24}{trainable:>12,}")
    print(f"{'all parameters':<24}{total:>12,}")
    print(f"{'trainable fraction':<24}{100.0 * trainable / total:>11.2f}%")
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        canvas=args.canvas,
        change_fraction=args.change_fraction,
        pseudo_change=args.pseudo_change,
        seed=args.seed,
    )
    ids = generate_dataset(spec, args.n, args.out, args.split)
    print(f"wrote {len(ids)} samples to {os.path.join(args.out, args.split)}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "params": _cmd_params,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, ShapeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
