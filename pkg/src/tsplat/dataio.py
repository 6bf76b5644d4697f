"""Dataset layout, image/depth codecs, and the checkpoint container.

On-disk formats:

* manifest: plain text, one ``key value`` header line plus one ``view``
  record per view (role, file paths, then the camera as 20 numbers).
* images: 8-bit sRGB PNG, decoded to linear RGB in [0, 1].
* masks: 8-bit single-channel PNG, pixel value = instance ID (0 background).
* depth: PFM, float32, negative scale = little endian, bottom-up rows.
* checkpoints: magic ``TSGS``, little-endian header and float32 arrays.

Cross-view ID consistency is an input contract (IDs must mean the same
instance in every view); the loader validates only range and coverage.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .control import ControlConfig, build_floating_mask
from .scene import Camera, ClassHead, GaussianCloud, ViewBundle

CHECKPOINT_MAGIC = b"TSGS"
CHECKPOINT_VERSION = 1


class DataError(Exception):
    """Structured load failure; collects every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# color transfer

def srgb_to_linear(srgb: np.ndarray) -> np.ndarray:
    s = np.asarray(srgb, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(linear: np.ndarray) -> np.ndarray:
    l = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(l <= 0.0031308, l * 12.92, 1.055 * l ** (1 / 2.4) - 0.055)


def read_image_rgb(path: str) -> np.ndarray:
    """PNG -> linear RGB float64 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def write_image_rgb(path: str, linear: np.ndarray) -> None:
    srgb = np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)
    Image.fromarray(srgb, mode="RGB").save(path)


def read_mask(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.int32)


def write_mask(path: str, ids: np.ndarray) -> None:
    arr = np.asarray(ids)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("mask IDs must fit in one byte")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def write_gray(path: str, values01: np.ndarray) -> None:
    arr = np.round(np.clip(values01, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# PFM depth maps

def write_pfm(path: str, data: np.ndarray) -> None:
    """Single-channel float32 PFM, little endian, bottom-up row order."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("write_pfm expects a single-channel map")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(arr).tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header not in (b"Pf", b"PF"):
            raise DataError(f"{path}: not a PFM file")
        if header == b"PF":
            raise DataError(f"{path}: color PFM not supported")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimensions")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        endian = "<" if scale < 0 else ">"
        payload = fh.read(width * height * 4)
        if len(payload) != width * height * 4:
            raise DataError(f"{path}: truncated PFM payload")
        arr = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width)
    return np.flipud(arr).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest

@dataclass
class ViewRecord:
    role: str  # "train" or "holdout"
    image: str
    mask: str
    depth: str
    camera: Camera


@dataclass
class DatasetManifest:
    root: str
    instance_count: int
    views: list[ViewRecord]

    def split_indices(self) -> tuple[list[int], list[int]]:
        train = [i for i, v in enumerate(self.views) if v.role == "train"]
        hold = [i for i, v in enumerate(self.views) if v.role == "holdout"]
        return train, hold


def manifest_path_for(path: str) -> str:
    return os.path.join(path, "manifest.txt") if os.path.isdir(path) else path


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    lines = [f"instance_count {manifest.instance_count}"]
    for v in manifest.views:
        cam = v.camera
        nums = [cam.fx, cam.fy, cam.cx, cam.cy]
        nums += [float(x) for x in cam.rotation.reshape(-1)]
        nums += [float(x) for x in cam.translation]
        fields = [v.role, v.image, v.mask, v.depth]
        fields += [repr(float(x)) for x in nums]
        fields += [str(cam.width), str(cam.height)]
        lines.append("view " + " ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_manifest(path: str) -> DatasetManifest:
    path = manifest_path_for(path)
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    instance_count = None
    views: list[ViewRecord] = []
    problems: list[str] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "instance_count":
                instance_count = int(parts[1])
            elif parts[0] == "view":
                if len(parts) != 1 + 4 + 16 + 2:
                    problems.append(f"line {lineno}: view record needs 22 fields, "
                                    f"got {len(parts) - 1}")
                    continue
                role, image, mask, depth = parts[1:5]
                if role not in ("train", "holdout"):
                    problems.append(f"line {lineno}: unknown role {role!r}")
                    continue
                nums = [float(x) for x in parts[5:21]]
                width, height = int(parts[21]), int(parts[22])
                try:
                    cam = Camera(
                        fx=nums[0], fy=nums[1], cx=nums[2], cy=nums[3],
                        rotation=np.array(nums[4:13]).reshape(3, 3),
                        translation=np.array(nums[13:16]),
                        width=width, height=height,
                    )
                except ValueError as exc:
                    problems.append(f"line {lineno}: {exc}")
                    continue
                views.append(ViewRecord(role, image, mask, depth, cam))
            else:
                problems.append(f"line {lineno}: unknown record {parts[0]!r}")
    if instance_count is None:
        problems.append("manifest is missing instance_count")
    if not views:
        problems.append("manifest declares no views")
    if problems:
        raise DataError(problems)
    return DatasetManifest(root=os.path.dirname(os.path.abspath(path)),
                           instance_count=instance_count, views=views)


# ---------------------------------------------------------------------------
# dataset loading

@dataclass
class LoadedDataset:
    views: list[tuple[Camera, ViewBundle]]
    instance_count: int
    train_indices: list[int]
    holdout_indices: list[int]
    manifest: DatasetManifest


def load_dataset(path: str, mask_dilation_px: int | None = None) -> LoadedDataset:
    """Read a manifest and every buffer it references, validating the lot.

    Every malformed input becomes a ``DataError`` naming the view; nothing
    partial escapes. Floating masks are built here (dilated target regions)
    so downstream code never recomputes them.
    """
    manifest = parse_manifest(path)
    control = ControlConfig() if mask_dilation_px is None else \
        ControlConfig(mask_dilation_px=mask_dilation_px)
    problems: list[str] = []
    views: list[tuple[Camera, ViewBundle]] = []
    for rec in manifest.views:
        name = os.path.basename(rec.image)
        paths = {
            "image": os.path.join(manifest.root, rec.image),
            "mask": os.path.join(manifest.root, rec.mask),
            "depth": os.path.join(manifest.root, rec.depth),
        }
        missing = [k for k, p in paths.items() if not os.path.exists(p)]
        if missing:
            problems.append(f"view {name}: missing {', '.join(missing)} file")
            continue
        try:
            image = read_image_rgb(paths["image"])
            id_mask = read_mask(paths["mask"])
            depth = read_pfm(paths["depth"]).astype(np.float64)
        except DataError as exc:
            problems.extend(f"view {name}: {p}" for p in exc.problems)
            continue
        except Exception as exc:  # codec failures become structured errors
            problems.append(f"view {name}: {exc}")
            continue
        h, w = rec.camera.height, rec.camera.width
        shapes_ok = True
        for label, arr, want in (
            ("image", image, (h, w, 3)), ("mask", id_mask, (h, w)),
            ("depth", depth, (h, w)),
        ):
            if arr.shape != want:
                problems.append(
                    f"view {name}: {label} shape {arr.shape} does not match camera {want}")
                shapes_ok = False
        if not shapes_ok:
            continue
        if id_mask.max(initial=0) > manifest.instance_count:
            problems.append(
                f"view {name}: mask contains ID {int(id_mask.max())} "
                f"> instance_count {manifest.instance_count}")
            continue
        floating = build_floating_mask(id_mask, control)
        bad_depth = floating & ~((depth > 0) & np.isfinite(depth))
        if bad_depth.any():
            problems.append(
                f"view {name}: non-positive or non-finite depth inside the floating mask")
            continue
        views.append((rec.camera, ViewBundle(
            image=image, id_mask=id_mask, prior_depth=depth, floating_mask=floating)))
    if problems:
        raise DataError(problems)
    train_idx, hold_idx = manifest.split_indices()
    return LoadedDataset(views=views, instance_count=manifest.instance_count,
                         train_indices=train_idx, holdout_indices=hold_idx,
                         manifest=manifest)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(cloud: GaussianCloud, head: ClassHead, iteration: int,
                    path: str) -> None:
    """Binary container, written atomically (temp file + rename).

    Layout: magic, version u32, N u32, C u32, SH basis size u32, then
    float32 little-endian arrays in declared order (centers, log_scales,
    rotations, opacity_logits, colors, identity_codes, head weight, head
    bias), then the iteration as u64.
    """
    n = len(cloud)
    basis = cloud.colors.shape[1]
    c = head.num_instances
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, n, c, basis))
        for tensor in list(cloud.params().values()) + [head.weight, head.bias]:
            fh.write(tensor.detach().numpy().astype("<f4").tobytes())
        fh.write(struct.pack("<Q", int(iteration)))
    os.replace(tmp, path)


def load_checkpoint(path: str, dtype: torch.dtype = torch.float64):
    """Inverse of :func:`save_checkpoint`; returns (cloud, head, iteration)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}")
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, n, c, basis = struct.unpack("<IIII", blob[4:20])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    counts = {
        "centers": n * 3, "log_scales": n * 3, "rotations": n * 4,
        "opacity_logits": n, "colors": n * basis * 3, "identity_codes": n * 16,
        "head_weight": 16 * (c + 1), "head_bias": c + 1,
    }
    need = 20 + 4 * sum(counts.values()) + 8
    if len(blob) != need:
        raise DataError(f"{path}: truncated or oversized checkpoint "
                        f"({len(blob)} bytes, expected {need})")
    offset = 20
    arrays = {}
    for name, count in counts.items():
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
    iteration = struct.unpack("<Q", blob[offset:offset + 8])[0]
    to_t = lambda a, shape: torch.from_numpy(a.reshape(shape).astype(np.float64)).to(dtype)
    cloud = GaussianCloud(
        centers=to_t(arrays["centers"], (n, 3)),
        log_scales=to_t(arrays["log_scales"], (n, 3)),
        rotations=to_t(arrays["rotations"], (n, 4)),
        opacity_logits=to_t(arrays["opacity_logits"], (n,)),
        colors=to_t(arrays["colors"], (n, basis, 3)),
        identity_codes=to_t(arrays["identity_codes"], (n, 16)),
    )
    head = ClassHead(
        weight=to_t(arrays["head_weight"], (16, c + 1)),
        bias=to_t(arrays["head_bias"], (c + 1,)),
    )
    return cloud, head, int(iteration)
