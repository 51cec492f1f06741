"""Command-line interface.

Subcommands: prepare (map tiling), synth (synthetic corpus), train-vae,
train-flow, sample, eval, styles, config (resolved-config echo).  Exit
codes: 0 success, 2 configuration error, 3 data error, 4 numerical
error.  Flag precedence everywhere is CLI flag > config file >
built-in default.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from .checkpoint import load_tensors
from .config import (
    RunConfig,
    apply_overrides,
    config_to_dict,
    load_config,
    require,
)
from .data import (
    AlignedMapPair,
    grid_sample,
    load_image,
    normalize_thermal,
    read_manifest,
    save_png,
    synth_generate,
    validate_manifest,
    write_manifest,
)
from .errors import ConfigError, DataError, ThermoflowError
from .interpolant import SamplerConfig, get_schedule
from .metrics import evaluate, get_extractor
from .style import StyleBank
from .train import load_flow, load_vae, sample_thermal, train_flow, train_vae


def _resolved_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    dotted = {
        "seed": getattr(args, "seed", None),
        "schedule": getattr(args, "schedule", None),
        "sampler.steps": getattr(args, "steps", None),
        "sampler.integrator": getattr(args, "integrator", None),
        "sampler.cfg_scale": getattr(args, "cfg_scale", None),
        "flow_training.steps": getattr(args, "train_steps", None),
        "flow_training.batch_size": getattr(args, "batch_size", None),
        "flow_training.lr": getattr(args, "lr", None),
        "vae_training.steps": getattr(args, "train_steps", None),
        "vae_training.batch_size": getattr(args, "batch_size", None),
        "vae_training.lr": getattr(args, "lr", None),
        "data.train_manifest": getattr(args, "manifest", None),
        "checkpoints.thermal_vae": getattr(args, "thermal_vae", None),
        "checkpoints.rgb_vae": getattr(args, "rgb_vae", None),
        "checkpoints.flow": getattr(args, "flow", None),
    }
    return apply_overrides(cfg, dotted)


def cmd_config(args) -> int:
    cfg = _resolved_config(args)
    print(json.dumps({"schema_version": SCHEMA_VERSION, "config": config_to_dict(cfg)},
                     indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    pairs = synth_generate(args.style, args.count, args.size, args.seed, split=args.split)
    records = []
    for i, pair in enumerate(pairs):
        stem = f"{args.style}_{args.split}_{args.seed:04d}_{i:05d}"
        rgb_rel = f"images/{stem}_rgb.png"
        th_rel = f"images/{stem}_thermal.png"
        save_png(pair.rgb, out_dir / rgb_rel)
        save_png(pair.thermal, out_dir / th_rel)
        records.append({"rgb_path": rgb_rel, "thermal_path": th_rel,
                        "style_id": pair.style_id, "split": pair.split,
                        "source": pair.source})
    write_manifest(out_dir / "manifest.jsonl", records, append=True)
    print(f"wrote {len(records)} {args.style}/{args.split} pairs under {out_dir}")
    return 0


def cmd_prepare(args) -> int:
    rgb_map = load_image(args.rgb_map)
    thermal_map = load_image(args.thermal_map)
    invalid = None
    if args.invalid_mask:
        invalid = load_image(args.invalid_mask).astype(bool)
    if args.normalize != "none":
        thermal_map = normalize_thermal(thermal_map, method=args.normalize,
                                        p_lo=args.p_lo, p_hi=args.p_hi,
                                        invalid_mask=invalid)
    maps = AlignedMapPair(rgb_map=rgb_map, thermal_map=thermal_map,
                          meters_per_pixel=args.meters_per_pixel, invalid_mask=invalid)
    source = args.source or Path(args.thermal_map).stem
    pairs = grid_sample(maps, args.stride_m, args.crop_px, style_id=args.style_id,
                        split=args.split, source=source,
                        max_invalid_fraction=args.max_invalid_fraction)
    out_dir = Path(args.out_dir)
    records = []
    for i, pair in enumerate(pairs):
        stem = f"{source}_{args.split}_{i:06d}"
        rgb_rel = f"images/{stem}_rgb.png"
        th_rel = f"images/{stem}_thermal.png"
        save_png(pair.rgb, out_dir / rgb_rel)
        save_png(pair.thermal, out_dir / th_rel)
        records.append({"rgb_path": rgb_rel, "thermal_path": th_rel,
                        "style_id": pair.style_id, "split": pair.split, "source": source})
    write_manifest(out_dir / "manifest.jsonl", records, append=True)
    print(f"sampled {len(records)} crops from {args.thermal_map} into {out_dir}")
    return 0


def _manifest_for_training(cfg: RunConfig) -> Path:
    manifest = require(cfg.data.train_manifest, "training manifest (data.train_manifest)")
    manifest = Path(manifest)
    validate_manifest(manifest)
    return manifest


def cmd_train_vae(args) -> int:
    cfg = _resolved_config(args)
    manifest = _manifest_for_training(cfg)
    out = train_vae(cfg, manifest, args.target, args.out)
    print(f"trained {args.target} autoencoder for {cfg.vae_training.steps} steps -> {out}")
    return 0


def cmd_train_flow(args) -> int:
    cfg = _resolved_config(args)
    manifest = _manifest_for_training(cfg)
    records = read_manifest(manifest)
    unknown = sorted({r["style_id"] for r in records} - set(cfg.styles))
    if unknown:
        raise ConfigError(f"manifest styles {unknown} not in configured styles {list(cfg.styles)}")
    thermal_vae = Path(require(cfg.checkpoints.thermal_vae, "thermal VAE checkpoint"))
    rgb_vae = Path(require(cfg.checkpoints.rgb_vae, "RGB VAE checkpoint"))
    for p in (thermal_vae, rgb_vae):
        if not p.exists():
            raise ConfigError(f"referenced checkpoint does not exist: {p}")
    out_dir = Path(args.out_dir)
    out = train_flow(cfg, manifest, thermal_vae, rgb_vae, out_dir / "flow.tfck")
    print(f"trained flow model for {cfg.flow_training.steps} steps -> {out}")
    return 0


def _collect_rgb_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DataError(f"no .png inputs found in directory {path}")
        return files
    if not path.exists():
        raise DataError(f"RGB input not found: {path}")
    return [path]


def cmd_sample(args) -> int:
    cfg = _resolved_config(args)
    flow_path = Path(require(cfg.checkpoints.flow, "flow checkpoint"))
    thermal_vae = Path(require(cfg.checkpoints.thermal_vae, "thermal VAE checkpoint"))
    rgb_vae = Path(require(cfg.checkpoints.rgb_vae, "RGB VAE checkpoint"))
    model, meta = load_flow(flow_path)
    t_ae, _ = load_vae(thermal_vae)
    r_ae, _ = load_vae(rgb_vae)
    if args.schedule:
        meta = dict(meta, schedule=args.schedule)
    get_schedule(meta["schedule"])
    sampler = SamplerConfig(
        steps=args.steps if args.steps is not None else meta["sampler"]["steps"],
        integrator=args.integrator or meta["sampler"]["integrator"],
        cfg_scale=args.cfg_scale if args.cfg_scale is not None else meta["sampler"]["cfg_scale"],
    )
    inputs = _collect_rgb_inputs(Path(args.rgb))
    images = [load_image(p) for p in inputs]
    for img in images:
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"sample inputs must be RGB images, got shape {img.shape}")
    thermals = sample_thermal(model, meta, t_ae, r_ae, images, args.style,
                              sampler, args.seed if args.seed is not None else 0)
    out_dir = Path(args.out_dir)
    for src, thermal in zip(inputs, thermals):
        out = out_dir / f"{src.stem}_{args.style}_thermal.png"
        save_png(thermal, out)
    print(f"sampled {len(thermals)} thermal images (style={args.style}, "
          f"steps={sampler.steps}, integrator={sampler.integrator}, "
          f"cfg_scale={sampler.cfg_scale}) -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    gen_dir = Path(args.generated_dir)
    ref_dir = Path(args.reference_dir)
    if not gen_dir.is_dir() or not ref_dir.is_dir():
        raise DataError(f"eval needs two directories, got {gen_dir} and {ref_dir}")
    names = sorted(p.name for p in gen_dir.glob("*.png"))
    if not names:
        raise DataError(f"no generated .png files in {gen_dir}")
    pairs = []
    for name in names:
        ref = ref_dir / name
        if not ref.exists():
            raise DataError(f"reference image missing for {name}: {ref}")
        pairs.append((load_image(gen_dir / name), load_image(ref)))
    report = evaluate(pairs, get_extractor(args.extractor))
    if math.isinf(report["psnr_db"]):
        report["psnr_db"] = "inf"
    payload = json.dumps(report, indent=2, sort_keys=True)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def cmd_styles(args) -> int:
    arrays, meta = load_tensors(args.checkpoint)
    if meta.get("kind") != "flow":
        raise DataError(f"{args.checkpoint} is not a flow checkpoint")
    bank = StyleBank.from_state(arrays, meta["style"])
    print(f"style embedding dim D = {bank.dim}")
    print(f"dropout_prob = {bank.dropout_prob}")
    print("registered styles:")
    for sid in bank.ids:
        print(f"  {sid}")
    print("  (plus the unconditional slot)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermoflow",
        description="Flow-matching RGB-to-thermal translation: data prep, training, "
                    "sampling, evaluation.",
    )
    parser.add_argument("--version", action="version",
                        version=f"thermoflow {__version__} (config schema {SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, sampler=True, training=False):
        p.add_argument("--config", help="JSON config file (strict keys)")
        p.add_argument("--seed", type=int, default=None)
        if sampler:
            p.add_argument("--steps", type=int, default=None, help="sampler steps")
            p.add_argument("--integrator", choices=["euler", "heun"], default=None)
            p.add_argument("--cfg-scale", type=float, default=None, dest="cfg_scale")
            p.add_argument("--schedule", default=None, help="interpolant schedule name")
        if training:
            p.add_argument("--train-steps", type=int, default=None, dest="train_steps")
            p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
            p.add_argument("--lr", type=float, default=None)
            p.add_argument("--manifest", default=None, help="training manifest JSONL")

    p = sub.add_parser("config", help="echo the fully resolved configuration")
    add_config_flags(p, sampler=True, training=True)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("synth", help="generate the synthetic two-style corpus")
    p.add_argument("--style", required=True, choices=["synthA", "synthB"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="tile aligned RGB/thermal maps into crops")
    p.add_argument("--rgb-map", required=True, dest="rgb_map")
    p.add_argument("--thermal-map", required=True, dest="thermal_map")
    p.add_argument("--meters-per-pixel", type=float, required=True, dest="meters_per_pixel")
    p.add_argument("--stride-m", type=float, default=35.0, dest="stride_m")
    p.add_argument("--crop-px", type=int, default=512, dest="crop_px")
    p.add_argument("--normalize", choices=["percentile", "minmax", "none"],
                   default="percentile")
    p.add_argument("--p-lo", type=float, default=1.0, dest="p_lo")
    p.add_argument("--p-hi", type=float, default=99.0, dest="p_hi")
    p.add_argument("--invalid-mask", default=None, dest="invalid_mask")
    p.add_argument("--max-invalid-fraction", type=float, default=0.01,
                   dest="max_invalid_fraction")
    p.add_argument("--style-id", required=True, dest="style_id")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--source", default=None)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-vae", help="train the thermal or RGB autoencoder")
    add_config_flags(p, sampler=False, training=True)
    p.add_argument("--target", required=True, choices=["thermal", "rgb"])
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-flow", help="train the velocity model on frozen latents")
    add_config_flags(p, sampler=True, training=True)
    p.add_argument("--thermal-vae", default=None, dest="thermal_vae")
    p.add_argument("--rgb-vae", default=None, dest="rgb_vae")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("sample", help="translate RGB images to thermal")
    add_config_flags(p, sampler=True, training=False)
    p.add_argument("--flow", default=None, help="flow checkpoint")
    p.add_argument("--thermal-vae", default=None, dest="thermal_vae")
    p.add_argument("--rgb-vae", default=None, dest="rgb_vae")
    p.add_argument("--rgb", required=True, help="input RGB png or directory of pngs")
    p.add_argument("--style", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM/Frechet report over paired directories")
    p.add_argument("--generated-dir", required=True, dest="generated_dir")
    p.add_argument("--reference-dir", required=True, dest="reference_dir")
    p.add_argument("--extractor", default="gray8x8")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("styles", help="list style embeddings in a flow checkpoint")
    p.add_argument("action", nargs="?", default="list", choices=["list"])
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_styles)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ThermoflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return getattr(e, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
