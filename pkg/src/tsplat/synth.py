"""Synthetic ground-truth scenes: known Gaussian blobs rendered to a full
on-disk dataset (images, exact ID masks, exact depth maps, camera ring).

Because the generating model is itself a Gaussian cloud, these datasets
give the end-to-end training pipeline an oracle: ground-truth geometry,
semantics, and appearance are all known exactly. Per-Gaussian class labels
are recorded for evaluation but never written into the dataset.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .dataio import (DatasetManifest, ViewRecord, write_image_rgb, write_manifest,
                     write_mask, write_pfm)
from .render import RenderSettings, render
from .scene import Camera, GaussianCloud, background_depth_for

SH0 = 0.28209479177387814


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    center: tuple[float, float, float]
    extent: float  # blob radius, world units
    count: int
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    width: int = 64
    height: int = 64
    fov_deg: float = 55.0

    def instance_count(self) -> int:
        return max(o.class_id for o in self.objects)


def parse_scene_spec(path: str) -> SceneSpec:
    """Scene spec text format: optional ``width/height/fov`` lines plus one
    ``object <class> <cx> <cy> <cz> <extent> <count> <r> <g> <b>`` per blob."""
    width, height, fov = 64, 64, 55.0
    objects: list[ObjectSpec] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "width":
                width = int(parts[1])
            elif parts[0] == "height":
                height = int(parts[1])
            elif parts[0] == "fov":
                fov = float(parts[1])
            elif parts[0] == "object":
                if len(parts) != 10:
                    raise ValueError(f"object line needs 9 fields: {line!r}")
                objects.append(ObjectSpec(
                    class_id=int(parts[1]),
                    center=(float(parts[2]), float(parts[3]), float(parts[4])),
                    extent=float(parts[5]),
                    count=int(parts[6]),
                    color=(float(parts[7]), float(parts[8]), float(parts[9])),
                ))
            else:
                raise ValueError(f"unknown scene record {parts[0]!r}")
    if not objects:
        raise ValueError("scene spec declares no objects")
    ids = sorted({o.class_id for o in objects})
    if ids[0] < 1:
        raise ValueError("object class IDs start at 1 (0 is background)")
    return SceneSpec(objects=tuple(objects), width=width, height=height, fov_deg=fov)


def make_scene(spec: SceneSpec, seed: int) -> tuple[GaussianCloud, np.ndarray]:
    """Build the ground-truth cloud and its per-Gaussian class labels.

    Each object is a seeded isotropic-ish blob; identity codes carry a
    one-hot of the class so identity compositing reproduces exact object
    weights per pixel (used for mask rendering, withheld from training).
    """
    rng = np.random.default_rng(seed)
    centers, log_scales, quats, logits, colors, codes, labels = [], [], [], [], [], [], []
    for obj in spec.objects:
        n = obj.count
        centers.append(rng.normal(obj.center, obj.extent / 2.5, size=(n, 3)))
        base_sigma = obj.extent * 1.6 / max(n, 2) ** (1 / 3)
        log_scales.append(np.log(base_sigma * rng.uniform(0.7, 1.5, size=(n, 3))))
        q = rng.normal(size=(n, 4))
        quats.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        logits.append(np.full(n, 2.0))  # opacity ~0.88: solid-looking blobs
        rgb = np.clip(np.array(obj.color) + rng.normal(0, 0.04, size=(n, 3)), 0.02, 0.98)
        colors.append((rgb - 0.5)[:, None, :] / SH0)
        onehot = np.zeros((n, 16))
        if obj.class_id >= 16:
            raise ValueError("synthetic scenes support class IDs below 16")
        onehot[:, obj.class_id] = 1.0
        codes.append(onehot)
        labels.append(np.full(n, obj.class_id, dtype=np.int64))
    cloud = GaussianCloud(
        centers=torch.from_numpy(np.concatenate(centers)),
        log_scales=torch.from_numpy(np.concatenate(log_scales)),
        rotations=torch.from_numpy(np.concatenate(quats)),
        opacity_logits=torch.from_numpy(np.concatenate(logits)),
        colors=torch.from_numpy(np.concatenate(colors)),
        identity_codes=torch.from_numpy(np.concatenate(codes)),
    )
    return cloud, np.concatenate(labels)


def camera_ring(count: int, radius: float, elevation_deg: float, lookat,
                width: int, height: int, fov_deg: float = 55.0) -> list[Camera]:
    """Evenly spaced cameras on a circle, all aimed at ``lookat``."""
    target = np.asarray(lookat, dtype=np.float64)
    elev = np.deg2rad(elevation_deg)
    fx = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    cams = []
    for i in range(count):
        angle = 2 * np.pi * i / count
        pos = target + radius * np.array(
            [np.cos(angle) * np.cos(elev), np.sin(angle) * np.cos(elev), np.sin(elev)]
        )
        forward = target - pos
        forward /= np.linalg.norm(forward)
        up_hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up_hint)
        if np.linalg.norm(right) < 1e-8:
            up_hint = np.array([0.0, 1.0, 0.0])
            right = np.cross(forward, up_hint)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])  # world -> camera rows
        translation = -rotation @ pos
        cams.append(Camera(
            fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            rotation=rotation, translation=translation,
            width=width, height=height,
        ))
    return cams


@dataclass(frozen=True)
class RingSpec:
    count: int = 12
    radius: float = 4.0
    elevation_deg: float = 20.0


def render_ground_truth(cloud: GaussianCloud, camera: Camera,
                        settings: RenderSettings):
    """One view's exact buffers: linear color, integer ID mask, soft depth.

    The ID mask is the argmax contributing object by compositing weight
    (identity codes are one-hot, so the composited feature is exactly the
    per-object weight sum); background wherever accumulated alpha < 0.5.
    """
    with torch.no_grad():
        out = render(cloud, camera, settings)
        color = torch.clamp(out.color, 0.0, 1.0).numpy()
        weights = out.id_feature.numpy()  # object k weight at channel k
        alpha = out.accum_alpha.numpy()
        ids = np.argmax(weights[:, :, 1:16], axis=2) + 1
        ids = np.where(alpha >= 0.5, ids, 0).astype(np.int32)
        depth = out.soft_depth.numpy()
    return color, ids, depth


def render_dataset(cloud: GaussianCloud, labels: np.ndarray, spec: SceneSpec,
                   ring: RingSpec, out_dir: str, seed: int,
                   noisy_depth: bool = False) -> str:
    """Render a camera ring and write the complete dataset.

    Views alternate train/holdout around the ring. With ``noisy_depth`` the
    *training* depth maps get seeded multiplicative noise plus one global
    scale-and-shift, emulating a relative monocular estimator; holdout
    depths stay exact so they can serve as evaluation ground truth.
    """
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "masks", "depth"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    target = np.mean([o.center for o in spec.objects], axis=0)
    cams = camera_ring(ring.count, ring.radius, ring.elevation_deg, target,
                       spec.width, spec.height, spec.fov_deg)
    settings = RenderSettings(background_depth=background_depth_for(cams),
                              need_hard=False, need_frozen_soft=False)
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.6, 1.6)
    shift = rng.uniform(0.05, 0.3) * ring.radius
    records = []
    for i, cam in enumerate(cams):
        color, ids, depth = render_ground_truth(cloud, cam, settings)
        role = "train" if i % 2 == 0 else "holdout"
        if noisy_depth and role == "train":
            noise = np.exp(rng.normal(0.0, 0.03, size=depth.shape))
            depth = scale * (depth * noise) + shift
        name = f"{i:03d}"
        rel = {
            "image": f"images/{name}.png",
            "mask": f"masks/{name}.png",
            "depth": f"depth/{name}.pfm",
        }
        write_image_rgb(os.path.join(out_dir, rel["image"]), color)
        write_mask(os.path.join(out_dir, rel["mask"]), ids)
        write_pfm(os.path.join(out_dir, rel["depth"]), depth)
        records.append(ViewRecord(role, rel["image"], rel["mask"], rel["depth"], cam))
    manifest = DatasetManifest(root=out_dir, instance_count=spec.instance_count(),
                               views=records)
    path = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest, path)
    return path
