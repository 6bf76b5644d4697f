"""Multi-scale depth regularization against a relative depth prior.

Two families of terms:

* soft/hard losses: masked squared error between a rendered depth map and
  the prior after a per-view least-squares scale-and-shift alignment of the
  prior.  The hard map steers Gaussian centers only and the soft map steers
  opacities only; those freeze contracts are enforced by the renderer's
  ``hard_depth`` / ``soft_depth_frozen`` channels, which these losses
  consume.
* global-local loss: squared error between patch-mean-normalized maps,
  divided either by the global masked standard deviation or per-patch
  standard deviations.  Both normalizations are invariant to a positive
  scale and shift of the prior, which is what lets a relative monocular
  prior supervise metric splat depth without alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .render import RenderOutput

STD_FLOOR = 1e-6  # prevents division blow-up on flat patches
VAR_FLOOR = STD_FLOOR ** 2


@dataclass(frozen=True)
class DepthRegConfig:
    lambda_sh: float = 1.0
    lambda_gl: float = 1.0
    gamma: float = 0.1  # local-term weight inside the global-local loss
    patch_size: int = 8
    hard_override_omega: float = 0.95
    align_prior: bool = True
    gl_uses_soft: bool = True  # False compares the hard map instead

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if not 0.0 < self.hard_override_omega <= 1.0:
            raise ValueError("hard_override_omega must be in (0, 1]")
        if self.lambda_sh < 0 or self.lambda_gl < 0 or self.gamma < 0:
            raise ValueError("depth weights must be non-negative")


def align_scale_shift(prior: torch.Tensor, rendered: torch.Tensor,
                      mask: torch.Tensor) -> tuple[float, float]:
    """Least-squares (a, b) with a*prior + b closest to the rendered depth
    over the mask. Constants by design: the fit minimizes the same squared
    error the losses measure, so holding (a, b) fixed leaves the gradient
    of those losses exact (stationarity of the inner fit)."""
    with torch.no_grad():
        p = prior[mask]
        r = rendered[mask]
        n = p.numel()
        if n == 0:
            return 1.0, 0.0
        sp = p.sum()
        spp = (p * p).sum()
        det = n * spp - sp * sp
        if float(det) <= 1e-12 * max(float(spp), 1.0):
            return 1.0, float(r.mean() - p.mean())
        sr = r.sum()
        spr = (p * r).sum()
        a = (n * spr - sp * sr) / det
        b = (spp * sr - sp * spr) / det
        return float(a), float(b)


def _masked_mse(x: torch.Tensor, y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype)
    count = m.sum()
    if float(count) == 0.0:
        return torch.zeros((), dtype=x.dtype)
    return (((x - y) ** 2) * m).sum() / count


def _prior_target(rendered: torch.Tensor, prior: torch.Tensor, mask: torch.Tensor,
                  config: DepthRegConfig) -> torch.Tensor:
    if not config.align_prior:
        return prior
    a, b = align_scale_shift(prior, rendered.detach(), mask)
    return a * prior + b


def hard_depth_loss(render: RenderOutput, prior: torch.Tensor, target_mask: torch.Tensor,
                    config: DepthRegConfig = DepthRegConfig()) -> torch.Tensor:
    """Masked MSE between the hard depth map and the aligned prior.

    Backpropagating this scalar reaches Gaussian centers only: the hard
    channel overrides opacities and freezes shape contributions.
    """
    if render.hard_depth is None:
        raise ValueError("render was produced without the hard depth channel")
    target = _prior_target(render.hard_depth, prior, target_mask, config)
    return _masked_mse(render.hard_depth, target, target_mask)


def soft_depth_loss(render: RenderOutput, prior: torch.Tensor, target_mask: torch.Tensor,
                    config: DepthRegConfig = DepthRegConfig()) -> torch.Tensor:
    """Masked MSE between the soft depth map and the aligned prior.

    Consumes the geometry-frozen soft channel, so backpropagation reaches
    opacities only.
    """
    if render.soft_depth_frozen is None:
        raise ValueError("render was produced without the frozen soft channel")
    target = _prior_target(render.soft_depth_frozen, prior, target_mask, config)
    return _masked_mse(render.soft_depth_frozen, target, target_mask)


def soft_hard_loss(render: RenderOutput, prior: torch.Tensor, target_mask: torch.Tensor,
                   config: DepthRegConfig = DepthRegConfig()) -> torch.Tensor:
    """Sum of the hard and soft depth losses."""
    return (hard_depth_loss(render, prior, target_mask, config)
            + soft_depth_loss(render, prior, target_mask, config))


def _block_views(x: torch.Tensor, patch: int) -> torch.Tensor:
    """Pad to a patch multiple and reshape to (nh, nw, patch, patch) blocks."""
    h, w = x.shape
    ph = (-h) % patch
    pw = (-w) % patch
    if ph or pw:
        x = F.pad(x.unsqueeze(0).unsqueeze(0), (0, pw, 0, ph)).squeeze(0).squeeze(0)
    nh, nw = x.shape[0] // patch, x.shape[1] // patch
    return x.reshape(nh, patch, nw, patch).permute(0, 2, 1, 3)


def _patch_stats(depth: torch.Tensor, mask: torch.Tensor, patch: int):
    """Masked per-patch mean and variance, mapped back to pixel resolution.

    Edge patches are truncated by the padding mask, so statistics only ever
    see real pixels.
    """
    h, w = depth.shape
    m = mask.to(depth.dtype)
    db = _block_views(depth * m, patch)
    mb = _block_views(m, patch)
    count = mb.sum(dim=(-1, -2))
    safe = torch.clamp(count, min=1.0)
    mean = db.sum(dim=(-1, -2)) / safe
    d2 = _block_views((depth * depth) * m, patch)
    var = d2.sum(dim=(-1, -2)) / safe - mean * mean
    var = torch.clamp(var, min=0.0)
    up = lambda t: t.repeat_interleave(patch, 0).repeat_interleave(patch, 1)[:h, :w]
    return up(mean), up(var), up(count)


def normalize_local(depth: torch.Tensor, mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Per-patch zero-mean, unit-std map; masked pixels are excluded from
    the statistics and zeroed in the output. Population std with a floor of
    1e-6, so constant patches normalize to zero."""
    mean, var, _ = _patch_stats(depth, mask, patch_size)
    std = torch.sqrt(torch.clamp(var, min=VAR_FLOOR))
    out = (depth - mean) / std
    return out * mask.to(depth.dtype)


def normalize_global(depth: torch.Tensor, mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Per-patch mean removal divided by one global masked std."""
    mean, _, _ = _patch_stats(depth, mask, patch_size)
    m = mask.to(depth.dtype)
    count = torch.clamp(m.sum(), min=1.0)
    gmean = (depth * m).sum() / count
    gvar = ((depth - gmean) ** 2 * m).sum() / count
    gstd = torch.sqrt(torch.clamp(gvar, min=VAR_FLOOR))
    out = (depth - mean) / gstd
    return out * m


def global_local_loss(rendered: torch.Tensor, prior: torch.Tensor, mask: torch.Tensor,
                      config: DepthRegConfig = DepthRegConfig()) -> torch.Tensor:
    """Masked MSE of globally normalized maps plus gamma times the masked
    MSE of locally normalized maps; gradients flow through the rendered
    map's normalization statistics."""
    p = config.patch_size
    loss = _masked_mse(normalize_global(rendered, mask, p),
                       normalize_global(prior, mask, p), mask)
    if config.gamma != 0.0:
        loss = loss + config.gamma * _masked_mse(
            normalize_local(rendered, mask, p), normalize_local(prior, mask, p), mask
        )
    return loss


def multi_scale_depth_loss(render: RenderOutput, prior: torch.Tensor,
                           target_mask: torch.Tensor,
                           config: DepthRegConfig = DepthRegConfig()):
    """Full depth regularizer: lambda_sh * (hard + soft) + lambda_gl * GL.

    Returns (total, l_hard, l_soft, l_gl).
    """
    dtype = prior.dtype
    zero = torch.zeros((), dtype=dtype)
    l_hard = hard_depth_loss(render, prior, target_mask, config) \
        if config.lambda_sh != 0 else zero
    l_soft = soft_depth_loss(render, prior, target_mask, config) \
        if config.lambda_sh != 0 else zero
    if config.lambda_gl != 0:
        gl_map = render.soft_depth if config.gl_uses_soft else render.hard_depth
        l_gl = global_local_loss(gl_map, prior, target_mask, config)
    else:
        l_gl = zero
    total = config.lambda_sh * (l_hard + l_soft) + config.lambda_gl * l_gl
    return total, l_hard, l_soft, l_gl
