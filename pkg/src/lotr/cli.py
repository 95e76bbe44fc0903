"""Command-line entry point: data generation, training, evaluation,
gradient checking, and benchmarking.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
"""

import argparse
import json
import os
import statistics
import sys
import time

import numpy as np

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from .heatmap import decode_argmax, render_heatmap
from .losses import LossSpec
from .metrics import evaluate, nme, norm_factor
from .model import (ModelConfig, attention_mac_counts, ffn_head_forward,
                    flip_averaged_inference, load_checkpoint, lotr_forward,
                    parameter_count, save_checkpoint)
from .tensor import Tensor
from .training import TrainConfig, init_params, train

PRESETS = {
    "micro": ModelConfig(),
    "lotr-m": ModelConfig(
        image_size=192, backbone_channels=[32, 64, 128, 256, 1280],
        reduction_channels=64, upsample_filters=[], token_dim=64,
        num_layers=2, num_heads=8, num_landmarks=106,
        head_hidden=[512, 512], ffn_hidden=[512, 512], dropout_rate=0.1),
    "lotr-m+": ModelConfig(
        image_size=192, backbone_channels=[32, 64, 128, 256, 1280],
        reduction_channels=256, upsample_filters=[128, 64], token_dim=64,
        num_layers=2, num_heads=8, num_landmarks=106,
        head_hidden=[512, 512], ffn_hidden=[512, 512], dropout_rate=0.1),
    "lotr-r+": ModelConfig(
        image_size=192, backbone_channels=[64, 128, 256, 512, 2048],
        reduction_channels=256, upsample_filters=[128, 64], token_dim=64,
        num_layers=2, num_heads=8, num_landmarks=106,
        head_hidden=[512, 512], ffn_hidden=[512, 512], dropout_rate=0.1),
}


class UsageError(ValueError):
    pass


def _write_run_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _resolve_model_config(args):
    """defaults <- preset <- config file <- flags, later wins."""
    cfg_dict = PRESETS[getattr(args, "preset", "micro")].to_dict()
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            file_cfg = json.load(fh)
        if "model" in file_cfg or "train" in file_cfg:
            file_cfg = file_cfg.get("model", {})
        cfg_dict.update(file_cfg)
    return ModelConfig.from_dict(cfg_dict)


def cmd_gen_data(args):
    if args.count <= 0:
        raise UsageError(f"--count must be positive, got {args.count}")
    if args.size <= 0 or args.landmarks < 5:
        raise UsageError("--size must be positive and --landmarks at least 5")
    layout = data_mod.FaceLayoutConfig(image_size=args.size, num_landmarks=args.landmarks)
    threads = max(1, int(os.environ.get("LOTR_THREADS", "1")))
    samples = data_mod.generate_dataset(args.count, args.seed, layout, threads=threads)
    data_mod.write_dataset(args.out, samples, layout)
    _write_run_config(args.out, {"command": "gen-data", "count": args.count,
                                 "seed": args.seed, "layout": layout.to_dict()})
    print(json.dumps({"written": len(samples), "path": args.out}))
    return 0


def cmd_train(args):
    if not os.path.isdir(args.data):
        raise UsageError(f"dataset directory not found: {args.data}")
    samples, layout = data_mod.read_dataset(args.data)
    model_cfg = _resolve_model_config(args)
    if model_cfg.image_size != layout.image_size or model_cfg.num_landmarks != layout.num_landmarks:
        raise UsageError(
            f"model config ({model_cfg.image_size}px, {model_cfg.num_landmarks} landmarks) does not "
            f"match dataset ({layout.image_size}px, {layout.num_landmarks} landmarks)")

    train_dict = TrainConfig().to_dict()
    augment_flip = args.augment_flip
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        train_dict.update(file_cfg.get("train", {}))
        if augment_flip is None:
            augment_flip = bool(file_cfg.get("augment_flip", False))
    train_cfg = TrainConfig.from_dict(train_dict)
    if args.loss:
        train_cfg.loss = LossSpec(kind=args.loss)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.batch_size is not None:
        train_cfg.batch_size = args.batch_size
    if args.lr is not None:
        train_cfg.base_lr = args.lr
    if args.max_steps is not None:
        train_cfg.max_steps = args.max_steps
    if args.seed is not None:
        train_cfg.seed = args.seed

    augment_flip = bool(augment_flip)
    if augment_flip:
        perm = data_mod.swap_map(layout)
        samples = samples + [data_mod.horizontal_flip(s, perm) for s in samples]

    _write_run_config(args.out, {"command": "train", "data": args.data,
                                 "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                                 "augment_flip": augment_flip})
    params, _, log = train(samples, model_cfg, train_cfg, out_dir=args.out)
    final_losses = [r["loss"] for r in log if "val_nme" not in r]
    final_nme = [r["val_nme"] for r in log if "val_nme" in r]
    print(json.dumps({"final_loss": final_losses[-1] if final_losses else None,
                      "val_nme": final_nme[-1] if final_nme else None,
                      "checkpoint": os.path.join(args.out, "ckpt-final.lotr")}))
    return 0


def cmd_eval(args):
    if not os.path.isdir(args.data):
        raise UsageError(f"dataset directory not found: {args.data}")
    samples, layout = data_mod.read_dataset(args.data)
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    if model_cfg.num_landmarks != layout.num_landmarks or model_cfg.image_size != layout.image_size:
        raise UsageError(
            f"checkpoint expects {model_cfg.num_landmarks} landmarks at {model_cfg.image_size}px, "
            f"dataset has {layout.num_landmarks} at {layout.image_size}px")
    swap = data_mod.swap_map(layout)
    mode = {"bbox": "bbox-geomean", "interocular": "inter-ocular"}[args.norm]

    nmes = []
    for s in samples:
        if args.flip:
            pred = flip_averaged_inference(Tensor(s.image), params, model_cfg, swap)
        else:
            pred = lotr_forward(Tensor(s.image), params, model_cfg)
        d = norm_factor(s.landmarks, mode=mode, eye_indices=(0, 1))
        nmes.append(nme(s.landmarks, pred.coords, d))
    report = evaluate(nmes, args.threshold)
    if args.out:
        _write_run_config(args.out, {"command": "eval", "data": args.data,
                                     "checkpoint": args.checkpoint, "norm": args.norm,
                                     "threshold": args.threshold, "flip": args.flip})
        report.write_ced_csv(os.path.join(args.out, "ced.csv"))
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            fh.write(report.to_json())
    print(report.to_json())
    return 0


def cmd_gradcheck(args):
    results = gradcheck_mod.full_suite(seed=args.seed, points=args.points,
                                       corrupt=args.corrupt)
    tol = {"end_to_end": max(args.tolerance, 1e-4)} if args.tolerance > 0 else {}
    failing = []
    for name, err in sorted(results.items()):
        limit = tol.get(name, args.tolerance)
        status = "ok" if err <= limit else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e} tol={limit:.1e} {status}")
        if err > limit:
            failing.append(name)
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args):
    model_cfg = _resolve_model_config(args)
    params = init_params(model_cfg, seed=0, include_ffn_head=True)
    rng = np.random.Generator(np.random.Philox(key=1))
    image = Tensor(rng.random((3, model_cfg.image_size, model_cfg.image_size)))
    macs = attention_mac_counts(model_cfg)

    def time_it(fn):
        times = []
        for _ in range(args.repeat):
            start = time.perf_counter()
            fn()
            times.append((time.perf_counter() - start) * 1e3)
        return (statistics.mean(times),
                statistics.stdev(times) if len(times) > 1 else 0.0)

    rows = []
    mean, std = time_it(lambda: lotr_forward(image, params, model_cfg))
    rows.append(("lotr_forward", mean, std, parameter_count(model_cfg, "lotr"), macs["total"]))
    mean, std = time_it(lambda: ffn_head_forward(image, params, model_cfg))
    rows.append(("ffn_forward", mean, std, parameter_count(model_cfg, "ffn"), 0))
    hm = render_heatmap((model_cfg.image_size / 2, model_cfg.image_size / 2),
                        (model_cfg.image_size, model_cfg.image_size))
    mean, std = time_it(lambda: decode_argmax(hm))
    rows.append(("heatmap_decode", mean, std, 0, model_cfg.image_size ** 2))

    lines = ["component,mean_ms,std_ms,param_count,mac_count"]
    lines += [f"{name},{mean:.4f},{std:.4f},{pcount},{mcount}"
              for name, mean, std, pcount, mcount in rows]
    csv = "\n".join(lines) + "\n"
    if args.out:
        _write_run_config(args.out, {"command": "bench", "preset": args.preset,
                                     "repeat": args.repeat})
        with open(os.path.join(args.out, "bench.csv"), "w") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="lotr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic landmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--landmarks", type=int, default=10)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="micro")
    p.add_argument("--config", help="JSON file with model/train overrides")
    p.add_argument("--loss", choices=["l1", "l2", "smooth-l1", "wing", "smooth-wing"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--augment-flip", action="store_true", default=None,
                   help="also train on horizontally mirrored copies of the dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--norm", choices=["bbox", "interocular"], default="bbox")
    p.add_argument("--threshold", type=float, default=0.08)
    p.add_argument("--flip", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="timing and operation-count report")
    p.add_argument("--preset", choices=sorted(PRESETS), default="micro")
    p.add_argument("--config")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
