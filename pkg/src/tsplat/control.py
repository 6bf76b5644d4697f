"""Semantic-driven density control: ROI gating, clone/split densification,
pruning, and floating-mask construction.

Structural edits return an index mapping (new row -> source row, -1 for
freshly created rows) so the optimizer can carry its moment vectors across
them: survivors keep their moments, new Gaussians start cold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .render import quaternion_to_matrix
from .scene import ClassHead, GaussianCloud, GradientSet
from .semantics import gaussian_class


@dataclass(frozen=True)
class ControlConfig:
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 7500
    grad_threshold: float = 2e-4  # screen-space positional gradient norm
    split_scale_threshold: float = 0.01  # fraction of scene extent
    roi_prob_threshold: float = 0.6
    semantic_prune_from: int = 1500
    opacity_prune_eps: float = 0.005
    mask_dilation_px: int = 12
    max_radius_frac: float = 0.2  # of max(width, height), prune beyond
    split_scale_divisor: float = 1.6
    clone_offset_frac: float = 0.1  # of the parent's mean stddev

    def __post_init__(self):
        if not self.densify_from < self.densify_until:
            raise ValueError("densify_from must be < densify_until")
        if not 0.0 < self.roi_prob_threshold < 1.0:
            raise ValueError("roi_prob_threshold must be in (0, 1)")


@dataclass
class DensifyState:
    """Running densification statistics, one slot per Gaussian."""

    grad2d_sum: np.ndarray
    grad3d_sum: np.ndarray  # summed center gradients; clone offset direction
    seen_count: np.ndarray
    max_radius_px: np.ndarray

    @staticmethod
    def zeros(n: int) -> "DensifyState":
        return DensifyState(
            grad2d_sum=np.zeros(n),
            grad3d_sum=np.zeros((n, 3)),
            seen_count=np.zeros(n, dtype=np.int64),
            max_radius_px=np.zeros(n),
        )

    def accum_grad2d(self) -> np.ndarray:
        """Running mean of screen-space gradient norms over views seen."""
        return self.grad2d_sum / np.maximum(self.seen_count, 1)

    def remap(self, mapping: np.ndarray) -> "DensifyState":
        out = DensifyState.zeros(len(mapping))
        old = mapping >= 0
        src = mapping[old]
        out.grad2d_sum[old] = self.grad2d_sum[src]
        out.grad3d_sum[old] = self.grad3d_sum[src]
        out.seen_count[old] = self.seen_count[src]
        out.max_radius_px[old] = self.max_radius_px[src]
        return out


def roi_membership(cloud: GaussianCloud, head: ClassHead,
                   config: ControlConfig) -> np.ndarray:
    """True where a Gaussian classifies as a non-background instance with
    probability at or above the ROI threshold."""
    cls, prob = gaussian_class(cloud, head)
    return (cls > 0) & (prob >= config.roi_prob_threshold)


def accumulate(state: DensifyState, grads: GradientSet, roi: np.ndarray) -> None:
    """Fold one view's gradient statistics into the running state.

    Positional gradients are accumulated only for ROI members; the
    footprint-radius maximum tracks every visible Gaussian because the
    oversize prune rule is not semantic.
    """
    visible = grads.visible.numpy()
    sel = roi & visible
    state.grad2d_sum[sel] += grads.grad2d_norm.numpy()[sel]
    state.grad3d_sum[sel] += grads.d_centers.detach().numpy()[sel]
    state.seen_count[sel] += 1
    state.max_radius_px[visible] = np.maximum(
        state.max_radius_px[visible], grads.radius_px.numpy()[visible]
    )


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    mapping: np.ndarray  # new row -> old row, -1 for created rows
    state: DensifyState
    n_cloned: int = 0
    n_split: int = 0


def densify(cloud: GaussianCloud, state: DensifyState, roi: np.ndarray,
            config: ControlConfig, scene_extent: float, seed) -> DensifyResult:
    """Clone small high-gradient ROI Gaussians, split large ones.

    Clones are offset a fraction of the parent's size along the descent
    direction of its accumulated center gradient; splits sample two
    children from the parent's own distribution (seeded), shrink their
    scales and drop the parent. All other attributes, identity codes
    included, are copied. Statistics reset afterwards.
    """
    n = len(cloud)
    accum = state.accum_grad2d()
    eligible = roi & (accum > config.grad_threshold) & (state.seen_count > 0)
    with torch.no_grad():
        max_scale = cloud.scales().max(dim=1).values.numpy()
    small = max_scale < config.split_scale_threshold * scene_extent
    clone_mask = eligible & small
    split_mask = eligible & ~small

    keep = ~split_mask
    keep_idx = np.nonzero(keep)[0]
    parts = [cloud.select(keep_idx)]
    mapping = [keep_idx]

    n_cloned = int(clone_mask.sum())
    if n_cloned:
        idx = np.nonzero(clone_mask)[0]
        copy = cloud.select(idx)
        g = state.grad3d_sum[idx]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norm > 1e-12, g / np.maximum(norm, 1e-12), 0.0)
        step = config.clone_offset_frac * np.exp(
            cloud.log_scales.detach().numpy()[idx]
        ).mean(axis=1, keepdims=True)
        offset = torch.from_numpy(-direction * step).to(cloud.dtype)
        copy = GaussianCloud(
            centers=copy.centers + offset,
            log_scales=copy.log_scales,
            rotations=copy.rotations,
            opacity_logits=copy.opacity_logits,
            colors=copy.colors,
            identity_codes=copy.identity_codes,
        )
        parts.append(copy)
        mapping.append(np.full(n_cloned, -1, dtype=np.int64))

    n_split = int(split_mask.sum())
    if n_split:
        rng = np.random.default_rng(seed)
        idx = np.nonzero(split_mask)[0]
        parent = cloud.select(np.repeat(idx, 2))
        with torch.no_grad():
            stds = torch.exp(parent.log_scales)
            rots = quaternion_to_matrix(parent.rotations)
            noise = torch.from_numpy(
                rng.normal(size=(2 * n_split, 3))
            ).to(cloud.dtype)
            centers = parent.centers + (rots @ (stds * noise).unsqueeze(-1)).squeeze(-1)
        child = GaussianCloud(
            centers=centers,
            log_scales=parent.log_scales - float(np.log(config.split_scale_divisor)),
            rotations=parent.rotations,
            opacity_logits=parent.opacity_logits,
            colors=parent.colors,
            identity_codes=parent.identity_codes,
        )
        parts.append(child)
        mapping.append(np.full(2 * n_split, -1, dtype=np.int64))

    new_cloud = parts[0]
    for extra in parts[1:]:
        new_cloud = new_cloud.cat(extra)
    mapping_arr = np.concatenate(mapping)
    return DensifyResult(
        cloud=new_cloud, mapping=mapping_arr,
        state=DensifyState.zeros(len(new_cloud)),
        n_cloned=n_cloned, n_split=n_split,
    )


@dataclass
class PruneResult:
    cloud: GaussianCloud
    mapping: np.ndarray  # survivor row -> old row
    state: DensifyState
    removed_low_opacity: int = 0
    removed_oversized: int = 0
    removed_semantic: int = 0
    survivor_roi: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    semantic_active: bool = False


def prune(cloud: GaussianCloud, head: ClassHead, state: DensifyState,
          config: ControlConfig, iteration: int, image_extent_px: float,
          semantic: bool = True) -> PruneResult:
    """Drop Gaussians that are nearly transparent, oversized on screen, or
    (after the warmup iteration) no longer classified into the ROI."""
    with torch.no_grad():
        opa = cloud.opacities().numpy()
    low = opa < config.opacity_prune_eps
    big = state.max_radius_px > config.max_radius_frac * image_extent_px
    roi = roi_membership(cloud, head, config)
    semantic_active = semantic and iteration >= config.semantic_prune_from
    out_of_roi = ~roi if semantic_active else np.zeros(len(cloud), dtype=bool)
    remove = low | big | out_of_roi
    survivors = np.nonzero(~remove)[0]
    return PruneResult(
        cloud=cloud.select(survivors),
        mapping=survivors,
        state=state.remap(survivors),
        removed_low_opacity=int(low.sum()),
        removed_oversized=int((big & ~low).sum()),
        removed_semantic=int((out_of_roi & ~low & ~big).sum()),
        survivor_roi=roi[survivors],
        semantic_active=semantic_active,
    )


def build_floating_mask(id_mask: np.ndarray, config: ControlConfig) -> np.ndarray:
    """Euclidean-disc dilation of the union of all target IDs.

    A pixel participates in the photometric and depth losses when it lies
    within ``mask_dilation_px`` of any target pixel.
    """
    target = np.asarray(id_mask) > 0
    if not target.any():
        return np.zeros_like(target, dtype=bool)
    dist = ndimage.distance_transform_edt(~target)
    return dist <= config.mask_dilation_px
