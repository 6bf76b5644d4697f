"""Total loss assembly, moment-based parameter updates, and the train loop.

One iteration is: render the sampled view once (all channels come from that
single composite), evaluate color + grouping + depth terms, backpropagate
the weighted total in one pass (the depth freeze contracts are baked into
the renderer's channels), update parameters with per-attribute Adam moments,
and on interval boundaries run densification and pruning with the optimizer
state remapped through the returned index mappings.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import dataio
from .control import (ControlConfig, DensifyState, accumulate, build_floating_mask,
                      densify, prune, roi_membership)
from .depth import DepthRegConfig, multi_scale_depth_loss
from .photometric import PhotometricConfig, color_loss, psnr
from .render import RenderOutput, RenderSettings, render
from .scene import (PARAM_FIELDS, Camera, ClassHead, GaussianCloud, GradientSet,
                    ViewBundle, background_depth_for, camera_extent, init_class_head,
                    init_random_cloud)
from .semantics import GroupingConfig, grouping_loss


class NumericalAbort(RuntimeError):
    """Raised when a loss term turns non-finite; training stops with a
    diagnostic checkpoint rather than limping on."""


@dataclass(frozen=True)
class OptimizerConfig:
    lr_centers: float = 1.6e-4
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity_logits: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_identity_codes: float = 2.5e-3
    lr_class_head: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lambda_color: float = 1.0  # diagnostic knob; 1.0 is the trained objective
    lambda_id: float = 1.0
    lambda_d: float = 0.1
    total_iterations: int = 10000
    center_lr_final_mult: float = 0.01  # exponential decay target over the run

    def __post_init__(self):
        for name in ("lr_centers", "lr_log_scales", "lr_rotations",
                     "lr_opacity_logits", "lr_colors", "lr_identity_codes",
                     "lr_class_head"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must be in (0, 1)")

    def lr_for(self, name: str, iteration: int) -> float:
        base = {
            "centers": self.lr_centers,
            "log_scales": self.lr_log_scales,
            "rotations": self.lr_rotations,
            "opacity_logits": self.lr_opacity_logits,
            "colors": self.lr_colors,
            "identity_codes": self.lr_identity_codes,
            "head_weight": self.lr_class_head,
            "head_bias": self.lr_class_head,
        }[name]
        if name == "centers":
            frac = min(max(iteration / max(self.total_iterations, 1), 0.0), 1.0)
            base = base * self.center_lr_final_mult ** frac
        return base


@dataclass
class AdamState:
    """First/second moment tensors per parameter plus a shared step count."""

    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step_count: int = 0

    @staticmethod
    def init(cloud: GaussianCloud, head: ClassHead) -> "AdamState":
        params = dict(cloud.params())
        params["head_weight"] = head.weight
        params["head_bias"] = head.bias
        return AdamState(
            m={k: torch.zeros_like(t) for k, t in params.items()},
            v={k: torch.zeros_like(t) for k, t in params.items()},
        )

    def remap(self, mapping: np.ndarray) -> None:
        """Carry cloud-parameter moments across a structural edit: survivors
        keep their rows, new Gaussians start at zero."""
        idx = torch.from_numpy(mapping)
        old = idx >= 0
        src = idx[old]
        for name in PARAM_FIELDS:
            for store in (self.m, self.v):
                t = store[name]
                fresh = torch.zeros((len(mapping),) + tuple(t.shape[1:]), dtype=t.dtype)
                fresh[old] = t[src]
                store[name] = fresh


@dataclass
class LossValues:
    l_color: float = 0.0
    l_2d: float = 0.0
    l_3d: float = 0.0
    l_hard: float = 0.0
    l_soft: float = 0.0
    l_gl: float = 0.0
    total: float = 0.0

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in
                   (self.l_color, self.l_2d, self.l_3d, self.l_hard,
                    self.l_soft, self.l_gl, self.total))


@dataclass
class TorchView:
    """Per-view buffers converted to torch once, with the loss masks the
    current training mode dictates."""

    image: torch.Tensor
    id_mask: torch.Tensor
    prior_depth: torch.Tensor
    photo_mask: torch.Tensor
    depth_mask: torch.Tensor
    full_mask: torch.Tensor

    @staticmethod
    def from_bundle(view: ViewBundle, dtype: torch.dtype,
                    use_semantics: bool) -> "TorchView":
        floating = torch.from_numpy(np.ascontiguousarray(view.floating_mask))
        idm = torch.from_numpy(np.ascontiguousarray(view.id_mask)).to(torch.long)
        full = torch.ones_like(floating, dtype=torch.bool)
        if use_semantics:
            photo = floating.clone()
            depthm = floating & (idm > 0)
        else:
            photo = full.clone()
            depthm = full.clone()
        return TorchView(
            image=torch.from_numpy(np.ascontiguousarray(view.image)).to(dtype),
            id_mask=idm,
            prior_depth=torch.from_numpy(np.ascontiguousarray(view.prior_depth)).to(dtype),
            photo_mask=photo,
            depth_mask=depthm,
            full_mask=full,
        )


def total_loss(cloud: GaussianCloud, head: ClassHead, camera: Camera,
               view: TorchView, render_settings: RenderSettings,
               opt: OptimizerConfig, grouping: GroupingConfig,
               depth_cfg: DepthRegConfig, photo: PhotometricConfig,
               seed) -> tuple[LossValues, GradientSet, RenderOutput]:
    """Render one view and backpropagate the full training objective.

    Returns the per-term values, the assembled gradients (with screen-space
    positional statistics for densification), and the render output.
    """
    leaf_cloud = cloud.with_grad()
    leaf_head = head.with_grad()
    need_depth = opt.lambda_d != 0.0
    settings = replace(render_settings, need_hard=need_depth,
                       need_frozen_soft=need_depth)
    out = render(leaf_cloud, camera, settings)
    dtype = leaf_cloud.dtype
    zero = torch.zeros((), dtype=dtype)

    l_color = color_loss(out.color, view.image, view.photo_mask, photo) \
        if opt.lambda_color != 0.0 else zero
    if opt.lambda_id != 0.0:
        l_id, l2d, l3d = grouping_loss(out.id_feature, view.id_mask, view.full_mask,
                                       leaf_cloud, leaf_head, grouping, seed)
    else:
        l_id, l2d, l3d = zero, zero, zero
    if need_depth:
        l_depth, l_hard, l_soft, l_gl = multi_scale_depth_loss(
            out, view.prior_depth, view.depth_mask, depth_cfg)
    else:
        l_depth, l_hard, l_soft, l_gl = zero, zero, zero, zero

    total = opt.lambda_color * l_color + opt.lambda_id * l_id + opt.lambda_d * l_depth

    values = LossValues(
        l_color=float(l_color), l_2d=float(l2d), l_3d=float(l3d),
        l_hard=float(l_hard), l_soft=float(l_soft), l_gl=float(l_gl),
        total=float(total),
    )

    gset = _collect_gradients(total, leaf_cloud, leaf_head, out)
    return values, gset, out


def _collect_gradients(total: torch.Tensor, leaf_cloud: GaussianCloud,
                       leaf_head: ClassHead, out: RenderOutput) -> GradientSet:
    proj = out.backward_state
    leaves = list(leaf_cloud.params().values()) + [leaf_head.weight, leaf_head.bias]
    inputs = leaves + ([proj.mean2d] if len(proj) else [])
    if total.requires_grad:
        grads = torch.autograd.grad(total, inputs, allow_unused=True)
    else:
        grads = [None] * len(inputs)
    named = dict(zip(PARAM_FIELDS, grads[:6]))
    gset = GradientSet(
        d_centers=_or_zeros(named["centers"], leaf_cloud.centers),
        d_log_scales=_or_zeros(named["log_scales"], leaf_cloud.log_scales),
        d_rotations=_or_zeros(named["rotations"], leaf_cloud.rotations),
        d_opacity_logits=_or_zeros(named["opacity_logits"], leaf_cloud.opacity_logits),
        d_colors=_or_zeros(named["colors"], leaf_cloud.colors),
        d_identity_codes=_or_zeros(named["identity_codes"], leaf_cloud.identity_codes),
        d_head_weight=_or_zeros(grads[6], leaf_head.weight),
        d_head_bias=_or_zeros(grads[7], leaf_head.bias),
        grad2d_norm=torch.zeros(len(leaf_cloud), dtype=leaf_cloud.dtype),
        visible=torch.zeros(len(leaf_cloud), dtype=torch.bool),
        radius_px=torch.zeros(len(leaf_cloud), dtype=leaf_cloud.dtype),
    )
    if len(proj):
        gset.visible[proj.source_index] = True
        gset.radius_px[proj.source_index] = proj.radius_px
        if grads[-1] is not None:
            norms = torch.linalg.norm(grads[-1], dim=1)
            gset.grad2d_norm.index_put_((proj.source_index,), norms)
    return gset


def _or_zeros(grad, like: torch.Tensor) -> torch.Tensor:
    return grad if grad is not None else torch.zeros_like(like)


def step(cloud: GaussianCloud, head: ClassHead, grads: GradientSet,
         state: AdamState, iteration: int, config: OptimizerConfig) -> None:
    """One in-place Adam update over every parameter group.

    Quaternions are renormalized afterwards, but only rows whose update was
    nonzero, so frozen rotations stay bit-identical.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    params = dict(cloud.params())
    params["head_weight"] = head.weight
    params["head_bias"] = head.bias
    grad_map = dict(grads.cloud_grads())
    grad_map["head_weight"] = grads.d_head_weight
    grad_map["head_bias"] = grads.d_head_bias
    with torch.no_grad():
        for name, param in params.items():
            g = grad_map[name]
            if g.shape != param.shape:  # head grads may be absent placeholders
                g = torch.zeros_like(param)
            m = state.m[name]
            v = state.v[name]
            m.mul_(config.beta1).add_(g, alpha=1.0 - config.beta1)
            v.mul_(config.beta2).addcmul_(g, g, value=1.0 - config.beta2)
            lr = config.lr_for(name, iteration)
            update = -(lr / bc1) * m / (torch.sqrt(v / bc2) + config.eps)
            param.add_(update)
            if name == "rotations":
                changed = update.abs().sum(dim=1) > 0
                if bool(changed.any()):
                    rows = param[changed]
                    param[changed] = rows / torch.linalg.norm(rows, dim=1, keepdim=True)


@dataclass
class TrainSettings:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    depth: DepthRegConfig = field(default_factory=DepthRegConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    init_points: int = 10000
    sh_degree: int = 0
    use_semantics: bool = True
    use_depth_reg: bool = True
    holdout_interval: int = 500
    checkpoint_interval: int = 1000
    init_box_frac: float = 0.45  # init cube half-extent vs camera extent
    dtype: str = "float64"

    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


@dataclass
class PruneEvent:
    iteration: int
    result_removed: tuple[int, int, int]
    survivor_roi: np.ndarray
    survivor_opacity: np.ndarray
    survivor_radius: np.ndarray
    semantic_active: bool


@dataclass
class TrainResult:
    cloud: GaussianCloud
    head: ClassHead
    metrics: list[dict]
    loss_render_calls: int
    prune_events: list[PruneEvent]
    iterations: int


def train(data: "dataio.LoadedDataset", settings: TrainSettings, seed: int,
          out_dir: str | None = None, threads: int | None = None,
          on_prune=None) -> TrainResult:
    """Optimize a fresh random cloud against the dataset's training views.

    Deterministic for a fixed seed and thread count. Writes an ndjson
    metrics log plus periodic and final checkpoints when ``out_dir`` is
    given. Aborts with a diagnostic checkpoint on any non-finite loss.
    """
    if threads is not None:
        torch.set_num_threads(threads)
    if not data.views:
        raise ValueError("dataset contains no views")
    if not data.train_indices:
        raise ValueError("dataset has no training views")

    dtype = settings.torch_dtype()
    opt = replace(settings.optimizer,
                  lambda_id=settings.optimizer.lambda_id if settings.use_semantics else 0.0,
                  lambda_d=settings.optimizer.lambda_d if settings.use_depth_reg else 0.0)
    control_cfg = settings.control
    cameras = [cam for cam, _ in data.views]
    extent = camera_extent(cameras)
    bg_depth = background_depth_for(cameras)
    rset = RenderSettings(background_depth=bg_depth)
    image_extent = max(max(cam.width, cam.height) for cam in cameras)

    centroid = np.mean([cam.center() for cam in cameras], axis=0)
    half = settings.init_box_frac * extent
    cloud = init_random_cloud(settings.init_points,
                              (centroid - half, centroid + half),
                              seed=seed, sh_degree=settings.sh_degree, dtype=dtype)
    head = init_class_head(data.instance_count, seed=seed + 1, dtype=dtype)
    adam = AdamState.init(cloud, head)
    dense = DensifyState.zeros(len(cloud))

    torch_views = {
        i: TorchView.from_bundle(data.views[i][1], dtype, settings.use_semantics)
        for i in range(len(data.views))
    }

    rng = np.random.default_rng(seed)
    order: list[int] = []
    metrics: list[dict] = []
    prune_events: list[PruneEvent] = []
    loss_render_calls = 0
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "metrics.ndjson"), "w")

    total_iters = opt.total_iterations
    try:
        for it in range(1, total_iters + 1):
            if not order:
                order = [int(i) for i in rng.permutation(data.train_indices)]
            view_idx = order.pop(0)
            camera, _ = data.views[view_idx]
            tview = torch_views[view_idx]

            values, gset, _ = total_loss(
                cloud, head, camera, tview, rset, opt,
                settings.grouping, settings.depth, settings.photometric,
                seed=[seed, it],
            )
            loss_render_calls += 1
            if not values.finite():
                if out_dir is not None:
                    dataio.save_checkpoint(
                        cloud, head, it, os.path.join(out_dir, f"abort_{it:06d}.tsgs"))
                raise NumericalAbort(f"non-finite loss at iteration {it}: {values}")

            if settings.use_semantics:
                roi = roi_membership(cloud, head, control_cfg)
            else:
                roi = np.ones(len(cloud), dtype=bool)
            accumulate(dense, gset, roi)
            step(cloud, head, gset, adam, it, opt)

            boundary = (control_cfg.densify_from <= it
                        <= min(control_cfg.densify_until, total_iters)
                        and it % control_cfg.densify_interval == 0)
            if boundary:
                if settings.use_semantics:
                    roi = roi_membership(cloud, head, control_cfg)
                else:
                    roi = np.ones(len(cloud), dtype=bool)
                dres = densify(cloud, dense, roi, control_cfg, extent, seed=[seed, it, 1])
                cloud, dense = dres.cloud, dres.state
                adam.remap(dres.mapping)
                pres = prune(cloud, head, dense, control_cfg, it, image_extent,
                             semantic=settings.use_semantics)
                event = PruneEvent(
                    iteration=it,
                    result_removed=(pres.removed_low_opacity, pres.removed_oversized,
                                    pres.removed_semantic),
                    survivor_roi=pres.survivor_roi,
                    survivor_opacity=pres.cloud.opacities().detach().numpy(),
                    survivor_radius=pres.state.max_radius_px.copy(),
                    semantic_active=pres.semantic_active,
                )
                prune_events.append(event)
                if on_prune is not None:
                    on_prune(event)
                cloud, dense = pres.cloud, pres.state
                adam.remap(pres.mapping)

            row = {
                "iter": it, "l_color": values.l_color, "l_2d": values.l_2d,
                "l_3d": values.l_3d, "l_hard": values.l_hard,
                "l_soft": values.l_soft, "l_gl": values.l_gl,
                "total": values.total, "n_gaussians": len(cloud),
            }
            if settings.holdout_interval and it % settings.holdout_interval == 0 \
                    and data.holdout_indices:
                row["psnr_holdout"] = holdout_psnr(cloud, data, rset)
            metrics.append(row)
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")
            if out_dir is not None and settings.checkpoint_interval \
                    and it % settings.checkpoint_interval == 0 and it != total_iters:
                dataio.save_checkpoint(
                    cloud, head, it, os.path.join(out_dir, f"ckpt_{it:06d}.tsgs"))
    finally:
        if log_file is not None:
            log_file.close()

    _round_to_float32(cloud, head)
    if out_dir is not None:
        dataio.save_checkpoint(cloud, head, total_iters,
                               os.path.join(out_dir, "checkpoint.tsgs"))
    return TrainResult(cloud=cloud, head=head, metrics=metrics,
                       loss_render_calls=loss_render_calls,
                       prune_events=prune_events, iterations=total_iters)


def holdout_psnr(cloud: GaussianCloud, data: "dataio.LoadedDataset",
                 rset: RenderSettings) -> float:
    """Mean PSNR of clamped color renders over the holdout views."""
    vals = []
    eval_settings = replace(rset, need_hard=False, need_frozen_soft=False)
    with torch.no_grad():
        for i in data.holdout_indices:
            camera, view = data.views[i]
            out = render(cloud, camera, eval_settings)
            img = torch.clamp(out.color, 0.0, 1.0).numpy()
            vals.append(psnr(img, view.image))
    return float(np.mean(vals))


def _round_to_float32(cloud: GaussianCloud, head: ClassHead) -> None:
    """Snap parameters to float32-representable values so the float32
    checkpoint reproduces in-memory renders exactly."""
    with torch.no_grad():
        for t in list(cloud.params().values()) + [head.weight, head.bias]:
            t.copy_(t.to(torch.float32).to(t.dtype))
