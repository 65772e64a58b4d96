"""Operator commands: init-aesemb, make-dataset, train, sample, eval,
extract-plugin, apply-plugin. One config file drives the whole pipeline."""

import argparse
import os
import sys

import numpy as np

from . import lora as lora_mod
from .aesemb import build_aesemb, save_aesemb
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError
from .evaluation import (
    EvalReport,
    alignment_score,
    attribute_shift,
    lambda_sweep,
    toy_fid,
)
from .pipeline import ModelBundle
from .synthdata import DIMENSIONS, make_dataset, write_ppm
from .train import build_text_encoder, run_training


def _load_config(args) -> RunConfig:
    config = getattr(args, "config", None)
    cfg = RunConfig.from_file(config) if config else RunConfig.defaults()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.override("train", "seed", seed)
    out = getattr(args, "out", None)
    if out is not None:
        cfg.override("out", "dir", out)
    return cfg


def cmd_init_aesemb(args):
    cfg = _load_config(args)
    enc = build_text_encoder(cfg)
    emb = build_aesemb(cfg.labels, enc)
    data_dir = cfg.get("data", "dir")
    os.makedirs(data_dir, exist_ok=True)
    enc.vocab.save(os.path.join(data_dir, "vocab.txt"))
    path = os.path.join(data_dir, "aesemb.bin")
    save_aesemb(emb, path)
    print(f"wrote {path} ({emb.matrix.shape[0]}x{emb.matrix.shape[1]}) "
          f"fingerprint {emb.fingerprint:#018x}")
    return 0


def cmd_make_dataset(args):
    cfg = _load_config(args)
    data_dir = cfg.get("data", "dir")
    n = args.n if args.n else cfg.get("data", "n")
    seed = cfg.get("data", "seed")
    make_dataset(n, seed=seed, out_dir=data_dir,
                 positive_rate=cfg.get("data", "positive_rate"))
    print(f"wrote {n} samples under {data_dir} (seed {seed})")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    if args.no_vmix and args.no_lora:
        raise ConfigError("--no-vmix together with --no-lora leaves nothing to train")
    if args.arm == "base":
        arm = "base"
    elif args.no_vmix:
        arm = "no-vmix"
    elif args.no_lora:
        arm = "no-lora"
    else:
        arm = "full"
    path, losses = run_training(cfg, arm, cfg.get("out", "dir"),
                                base_ckpt_path=args.base, resume_path=args.resume,
                                max_steps=args.steps)
    print(f"saved {path} (final loss {losses[-1]:.4f})" if losses else f"saved {path}")
    return 0


def cmd_sample(args):
    cfg = _load_config(args)
    if args.checkpoint:
        bundle = ModelBundle.from_checkpoint(args.checkpoint)
    elif args.base and args.plugin:
        ckpt = load_checkpoint(args.base)
        model = build_model(ckpt)
        lora_mod.apply_plugin(model, args.plugin, strip_lora=args.strip_lora)
        bundle = ModelBundle.from_checkpoint(args.base)
        bundle.model = model
    else:
        raise ConfigError("pass --checkpoint, or --base with --plugin")
    enc = bundle.enc
    for word in args.prompt.split():
        if word not in enc.vocab:
            print(f"warning: unknown token {word!r} maps to [UNK]", file=sys.stderr)
    sampler = bundle.default_sampler_cfg()
    if args.lam is not None:
        from dataclasses import replace
        sampler = replace(sampler, lam=args.lam)
    out_dir = cfg.get("out", "dir")
    os.makedirs(out_dir, exist_ok=True)
    seed = getattr(args, "seed", None)
    seed = seed if seed is not None else 0
    imgs = bundle.sample([args.prompt] * args.n, assignment=args.assignment,
                         seed=seed, sampler_cfg=sampler, baseline=args.baseline)
    for i, img in enumerate(imgs):
        path = os.path.join(out_dir, f"sample_{seed}_{i:03d}.ppm")
        write_ppm(path, img)
        print(path)
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    bundle = ModelBundle.from_checkpoint(args.checkpoint)
    fresh = ModelBundle.fresh(bundle.run_cfg, vmix=bundle.model.proj is not None)
    n = args.n
    seed = getattr(args, "seed", None)
    seed = seed if seed is not None else 0
    report = EvalReport(seeds={"eval_seed": seed, "n": n})
    for dim in DIMENSIONS:
        report.shifts[dim] = attribute_shift(bundle, dim, n, seed)
        report.fresh_shifts[dim] = attribute_shift(fresh, dim, max(8, n // 4), seed)
    report.alignment = alignment_score(bundle, 2 * n, seed)
    baseline_bundle = None
    if args.baseline_checkpoint:
        baseline_bundle = ModelBundle.from_checkpoint(args.baseline_checkpoint)
        report.alignment_baseline = alignment_score(baseline_bundle, 2 * n, seed)
    held_out = [s.image for s in make_dataset(max(64, n), seed=cfg.get("data", "seed") + 1)]
    gen = bundle.sample([s_.caption() for s_ in _eval_specs(max(64, n), seed)],
                        assignment=None, seed=seed)
    report.fid_vs_renders = toy_fid(list(gen), held_out)
    report.sweep = lambda_sweep(bundle, (0.0, 0.5, 1.0, 1.5, 2.0), max(16, n // 2), seed)
    out_dir = cfg.get("out", "dir")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.summary())
    print(report.summary())
    return 0


def _eval_specs(n, seed):
    from .evaluation import _random_specs
    return _random_specs(n, seed)


def cmd_extract_plugin(args):
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    out_dir = cfg.get("out", "dir")
    os.makedirs(out_dir, exist_ok=True)
    path = args.plugin or os.path.join(out_dir, "vmix.plugin")
    lora_mod.extract_plugin(model, path)
    print(f"wrote {path}")
    return 0


def cmd_apply_plugin(args):
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.base)
    model = build_model(ckpt)
    if ckpt.has_vmix or ckpt.has_lora:
        raise ConfigError("--base must be a pristine content-only checkpoint")
    # rebuild with the aesthetic branch so plugin tensors have a target
    run_cfg = RunConfig.from_text(ckpt.config_text)
    from .unet import UNet
    model = UNet(run_cfg.unet_config(vmix=True), seed=run_cfg.get("model", "model_seed"))
    for name, arr in ckpt.tensors.items():
        model.params[name].data = arr.astype(model.dtype)
    adapter = lora_mod.apply_plugin(model, args.plugin, strip_lora=args.strip_lora)
    out_dir = cfg.get("out", "dir")
    os.makedirs(out_dir, exist_ok=True)
    path = args.output or os.path.join(out_dir, "merged.vmck")
    alpha = adapter.alpha if adapter is not None else None
    save_checkpoint(path, model, ckpt.config_text, ckpt.step, optimizer=None,
                    lora_alpha=alpha)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="run configuration file (key=value with sections)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the run seed")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="override the output directory")
    parser = argparse.ArgumentParser(prog="vmixlab", parents=[common],
                                     description="desk-scale aesthetic-conditioning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init-aesemb", parents=[common],
                   help="build and cache the aesthetic embedding")

    p = sub.add_parser("make-dataset", parents=[common], help="render the synthetic dataset")
    p.add_argument("--n", type=int, help="number of samples (default from config)")

    p = sub.add_parser("train", parents=[common], help="train one arm")
    p.add_argument("--arm", choices=("base", "finetune"), default="finetune")
    p.add_argument("--no-vmix", action="store_true", help="adapter arm without the aesthetic branch")
    p.add_argument("--no-lora", action="store_true", help="adapter arm without low-rank factors")
    p.add_argument("--base", help="base checkpoint for the finetune arms")
    p.add_argument("--resume", help="resume from a checkpoint")
    p.add_argument("--steps", type=int, help="override total steps")

    p = sub.add_parser("sample", parents=[common], help="generate images")
    p.add_argument("--checkpoint")
    p.add_argument("--base", help="pristine base checkpoint (with --plugin)")
    p.add_argument("--plugin", help="plugin file to apply onto --base")
    p.add_argument("--strip-lora", action="store_true")
    p.add_argument("--prompt", required=True)
    p.add_argument("--assignment", help="polarity string such as +-+-")
    p.add_argument("--baseline", action="store_true", help="sample the content-only path")
    p.add_argument("--lambda", dest="lam", type=float, help="mixing coefficient override")
    p.add_argument("-n", type=int, default=1)

    p = sub.add_parser("eval", parents=[common],
                       help="attribute shifts, alignment, toy-FID, sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-checkpoint")
    p.add_argument("--n", type=int, default=32)

    p = sub.add_parser("extract-plugin", parents=[common],
                       help="write the plug-and-play module")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plugin", help="output path (default <out>/vmix.plugin)")

    p = sub.add_parser("apply-plugin", parents=[common],
                       help="apply a plugin onto a pristine base")
    p.add_argument("--base", required=True)
    p.add_argument("--plugin", required=True)
    p.add_argument("--strip-lora", action="store_true")
    p.add_argument("--output")
    return parser


COMMANDS = {
    "init-aesemb": cmd_init_aesemb,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "extract-plugin": cmd_extract_plugin,
    "apply-plugin": cmd_apply_plugin,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
