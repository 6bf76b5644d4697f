"""Command-line entry point: dataset synthesis, training, rendering, eval.

Exit codes: 0 success, 2 bad arguments or config conflicts, 3 data
validation failure, 4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
import torch

from . import dataio, synth
from .optim import NumericalAbort, TrainSettings, train
from .photometric import psnr, ssim_metric
from .render import RenderSettings, render
from .scene import background_depth_for, bounding_sphere
from .semantics import classify


class ConfigConflict(ValueError):
    pass


_SECTION_FIELDS = None


def _config_registry():
    """Flat config-key registry mapping names to TrainSettings sections."""
    global _SECTION_FIELDS
    if _SECTION_FIELDS is None:
        registry = {}
        base = TrainSettings()
        for section in ("optimizer", "grouping", "depth", "photometric", "control"):
            obj = getattr(base, section)
            for f in dataclasses.fields(obj):
                registry[f.name] = (section, type(getattr(obj, f.name)))
        for f in dataclasses.fields(base):
            if f.name in ("optimizer", "grouping", "depth", "photometric", "control"):
                continue
            registry[f.name] = (None, type(getattr(base, f.name)))
        _SECTION_FIELDS = registry
    return _SECTION_FIELDS


def _parse_value(text: str, kind: type):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigConflict(f"cannot parse boolean from {text!r}")
    return kind(text)


def load_config_overrides(path: str) -> dict:
    """Parse a key-value config file; duplicate or unknown keys are errors."""
    registry = _config_registry()
    overrides = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigConflict(f"config line {lineno}: expected 'key value'")
            key, value = parts
            if key not in registry:
                raise ConfigConflict(f"config line {lineno}: unknown key {key!r}")
            if key in overrides:
                raise ConfigConflict(f"config line {lineno}: duplicate key {key!r}")
            section, kind = registry[key]
            overrides[key] = (section, _parse_value(value, kind))
    return overrides


def apply_overrides(settings: TrainSettings, overrides: dict) -> TrainSettings:
    by_section: dict = {}
    top = {}
    for key, (section, value) in overrides.items():
        if section is None:
            top[key] = value
        else:
            by_section.setdefault(section, {})[key] = value
    for section, kv in by_section.items():
        settings = dataclasses.replace(
            settings, **{section: dataclasses.replace(getattr(settings, section), **kv)}
        )
    if top:
        settings = dataclasses.replace(settings, **top)
    return settings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsplat",
                                     description="targeted splat reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ground-truth dataset")
    p.add_argument("--spec", required=True, help="scene spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--elevation", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noisy-depth", action="store_true",
                   help="corrupt training depth priors (seeded)")

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    p.add_argument("--data", required=True, help="dataset dir or manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-depth-reg", action="store_true")
    p.add_argument("--no-semantic", action="store_true")
    p.add_argument("--config", default=None, help="key-value override file")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("render", help="render checkpoint views to PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True,
                   help="dataset manifest path or ring:count,radius,elevation"
                        "[,width,height,fov]")
    p.add_argument("--out", required=True)
    p.add_argument("--channel", default="color",
                   choices=["color", "id", "depth-soft", "depth-hard", "alpha"])
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="holdout", choices=["holdout", "train"])
    p.add_argument("--threads", type=int, default=None)
    return parser


def cmd_synth(args) -> int:
    spec = synth.parse_scene_spec(args.spec)
    cloud, labels = synth.make_scene(spec, args.seed)
    ring = synth.RingSpec(count=args.views, radius=args.radius,
                          elevation_deg=args.elevation)
    path = synth.render_dataset(cloud, labels, spec, ring, args.out,
                                seed=args.seed, noisy_depth=args.noisy_depth)
    print(path)
    return 0


def cmd_train(args) -> int:
    settings = TrainSettings()
    if args.config:
        overrides = load_config_overrides(args.config)
        if args.iters is not None and "total_iterations" in overrides:
            raise ConfigConflict(
                "total_iterations set both by --iters and the config file")
        settings = apply_overrides(settings, overrides)
    if args.iters is not None:
        settings = dataclasses.replace(
            settings,
            optimizer=dataclasses.replace(settings.optimizer,
                                          total_iterations=args.iters),
        )
    if args.no_depth_reg:
        settings = dataclasses.replace(settings, use_depth_reg=False)
    if args.no_semantic:
        settings = dataclasses.replace(settings, use_semantics=False)
    data = dataio.load_dataset(args.data,
                               mask_dilation_px=settings.control.mask_dilation_px)
    result = train(data, settings, seed=args.seed, out_dir=args.out,
                   threads=args.threads)
    print(os.path.join(args.out, "checkpoint.tsgs"))
    print(f"iterations {result.iterations} gaussians {len(result.cloud)}")
    return 0


def _cameras_for(args_camera: str, cloud):
    if args_camera.startswith("ring:"):
        fields = args_camera[len("ring:"):].split(",")
        if len(fields) not in (3, 5, 6):
            raise ConfigConflict(
                "ring spec is ring:count,radius,elevation[,width,height[,fov]]")
        count, radius, elev = int(fields[0]), float(fields[1]), float(fields[2])
        width = int(fields[3]) if len(fields) > 3 else 64
        height = int(fields[4]) if len(fields) > 4 else 64
        fov = float(fields[5]) if len(fields) > 5 else 55.0
        center, _ = bounding_sphere(cloud.centers.numpy())
        return synth.camera_ring(count, radius, elev, center, width, height, fov)
    manifest = dataio.parse_manifest(args_camera)
    return [rec.camera for rec in manifest.views]


_PALETTE = np.array(
    [[0, 0, 0], [230, 80, 60], [70, 140, 230], [90, 200, 90], [230, 200, 60],
     [180, 90, 210], [90, 210, 210], [240, 140, 60], [150, 150, 150]],
    dtype=np.uint8,
)


def cmd_render(args) -> int:
    cloud, head, _ = dataio.load_checkpoint(args.checkpoint)
    cameras = _cameras_for(args.camera, cloud)
    os.makedirs(args.out, exist_ok=True)
    settings = RenderSettings(background_depth=background_depth_for(cameras))
    import torch as _torch
    for i, cam in enumerate(cameras):
        with _torch.no_grad():
            out = render(cloud, cam, settings)
        name = f"{i:03d}"
        if args.channel == "color":
            dataio.write_image_rgb(
                os.path.join(args.out, f"{name}_color.png"),
                np.clip(out.color.numpy(), 0.0, 1.0))
        elif args.channel == "alpha":
            dataio.write_gray(os.path.join(args.out, f"{name}_alpha.png"),
                              out.accum_alpha.numpy())
        elif args.channel in ("depth-soft", "depth-hard"):
            depth = (out.soft_depth if args.channel == "depth-soft"
                     else out.hard_depth).numpy()
            lo, hi = float(depth.min()), float(depth.max())
            span = (hi - lo) if hi > lo else 1.0
            tag = args.channel.replace("-", "_")
            dataio.write_gray(os.path.join(args.out, f"{name}_{tag}.png"),
                              (depth - lo) / span)
            with open(os.path.join(args.out, f"{name}_{tag}_scale.txt"), "w") as fh:
                fh.write(f"min {lo!r}\nmax {hi!r}\n")
        elif args.channel == "id":
            feats = out.id_feature
            probs = classify(feats, head).numpy()
            ids = np.argmax(probs, axis=2)
            palette = _PALETTE[ids % len(_PALETTE)]
            from PIL import Image
            Image.fromarray(palette, mode="RGB").save(
                os.path.join(args.out, f"{name}_id_argmax.png"))
            flat = feats.numpy().reshape(-1, feats.shape[-1])
            centered = flat - flat.mean(axis=0, keepdims=True)
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            proj = (centered @ vt[:3].T).reshape(feats.shape[0], feats.shape[1], 3)
            lo = proj.min(axis=(0, 1), keepdims=True)
            hi = proj.max(axis=(0, 1), keepdims=True)
            vis = (proj - lo) / np.maximum(hi - lo, 1e-9)
            srgb = np.round(vis * 255).astype(np.uint8)
            Image.fromarray(srgb, mode="RGB").save(
                os.path.join(args.out, f"{name}_id_pca.png"))
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    cloud, _, _ = dataio.load_checkpoint(args.checkpoint)
    data = dataio.load_dataset(args.data)
    indices = data.holdout_indices if args.split == "holdout" else data.train_indices
    if not indices:
        raise dataio.DataError(f"dataset has no {args.split} views")
    cameras = [cam for cam, _ in data.views]
    settings = RenderSettings(background_depth=background_depth_for(cameras),
                              need_hard=False, need_frozen_soft=False)
    psnrs, ssims = [], []
    for i in indices:
        cam, view = data.views[i]
        with torch.no_grad():
            out = render(cloud, cam, settings)
        img = np.clip(out.color.numpy(), 0.0, 1.0)
        p = psnr(img, view.image)
        s = ssim_metric(img, view.image)
        psnrs.append(p)
        ssims.append(s)
        print(f"view {i:03d} psnr {p:.6f} ssim {s:.6f}")
    print(f"mean psnr {np.mean(psnrs):.6f} ssim {np.mean(ssims):.6f}")
    print("lpips n/a")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is not None:
        torch.set_num_threads(args.threads)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "render":
            return cmd_render(args)
        if args.command == "eval":
            return cmd_eval(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        if isinstance(exc, dataio.DataError):
            for problem in exc.problems:
                print(f"error: {problem}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
