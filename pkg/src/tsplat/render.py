"""Differentiable tile-based Gaussian splat renderer.

The forward pass projects every Gaussian to screen space (first-order
covariance transport plus a fixed low-pass dilation), bins footprints into
16x16 pixel tiles, and alpha-composites all channels front to back.  Three
compositing chains share one projection:

* live chain:    color, identity feature, soft depth, accumulated alpha;
                 gradients reach every Gaussian attribute.
* hard chain:    depth with each per-pixel opacity replaced by a fixed
                 override so the nearest splats dominate; scale/rotation
                 contributions are held constant, so gradients reach the
                 centers only.
* frozen soft:   numerically identical to the live soft depth but with all
                 geometry held constant, so gradients reach opacities only.

Everything is built from torch ops, so ``RenderOutput.backward`` is an
exact adjoint pass over the saved compositing graph.  The test suite keeps
an unoptimized per-pixel compositor as the independent oracle for this
module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scene import Camera, GaussianCloud, GradientSet

# Spherical-harmonic basis constants, degrees 0..3.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


@dataclass(frozen=True)
class RenderSettings:
    """Rasterization constants.

    ``background_depth`` should be ~1.1x the scene bounding-sphere diameter
    (see :func:`tsplat.scene.background_depth_for`); it fills pixels whose
    accumulated alpha stays below ``alpha_floor``.
    """

    near: float = 0.01
    dilation: float = 0.3  # px^2 low-pass added to every projected covariance
    alpha_clamp: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    min_transmittance: float = 1e-4
    hard_omega: float = 0.95  # opacity override for the hard depth chain
    cutoff_sigma: float = 3.5  # footprint radius in projected standard deviations
    tile_size: int = 16
    background_depth: float = 10.0
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_floor: float = 1e-3  # below this, depth falls back to background
    max_chunk_elements: int = 4_000_000
    need_hard: bool = True
    need_frozen_soft: bool = True


class ContractViolation(ValueError):
    """Raised when a renderer pre-condition is broken by the caller."""


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Batched unit-quaternion (w, x, y, z) to rotation matrix; normalizes
    its input so raw optimizer iterates stay valid."""
    qn = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = qn.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def evaluate_colors(coeffs: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate SH color blocks (M, B, 3) toward unit view directions (M, 3)."""
    basis = coeffs.shape[1]
    res = _SH_C0 * coeffs[:, 0]
    if basis > 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        res = res - _SH_C1 * y * coeffs[:, 1] + _SH_C1 * z * coeffs[:, 2] - _SH_C1 * x * coeffs[:, 3]
    if basis > 4:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        xx, yy, zz = x * x, y * y, z * z
        res = (
            res
            + _SH_C2[0] * (x * y) * coeffs[:, 4]
            + _SH_C2[1] * (y * z) * coeffs[:, 5]
            + _SH_C2[2] * (2.0 * zz - xx - yy) * coeffs[:, 6]
            + _SH_C2[3] * (x * z) * coeffs[:, 7]
            + _SH_C2[4] * (xx - yy) * coeffs[:, 8]
        )
    if basis > 9:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        xx, yy, zz = x * x, y * y, z * z
        res = (
            res
            + _SH_C3[0] * y * (3 * xx - yy) * coeffs[:, 9]
            + _SH_C3[1] * x * y * z * coeffs[:, 10]
            + _SH_C3[2] * y * (4 * zz - xx - yy) * coeffs[:, 11]
            + _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * coeffs[:, 12]
            + _SH_C3[4] * x * (4 * zz - xx - yy) * coeffs[:, 13]
            + _SH_C3[5] * z * (xx - yy) * coeffs[:, 14]
            + _SH_C3[6] * x * (xx - 3 * yy) * coeffs[:, 15]
        )
    return res + 0.5


@dataclass
class ProjectedGaussians:
    """Screen-space footprints for one view, depth-sorted ascending with
    ties broken by source index."""

    mean2d: torch.Tensor  # (M, 2) pixel coordinates
    cov2d: torch.Tensor  # (M, 2, 2) dilated screen covariance
    conic: torch.Tensor  # (M, 3) inverse covariance (a, b, c), live graph
    conic_hard: torch.Tensor  # (M, 3) same values, scale/rotation frozen
    view_depth: torch.Tensor  # (M,) camera-frame z
    eval_color: torch.Tensor  # (M, 3) SH evaluated for this view
    opacity: torch.Tensor  # (M,) sigmoid of opacity logits
    identity: torch.Tensor  # (M, 16)
    radius_px: torch.Tensor  # (M,) detached cutoff radius
    source_index: torch.Tensor  # (M,) long, row in the cloud
    width: int
    height: int
    cloud: GaussianCloud  # the rendered cloud; adjoint targets

    def __len__(self) -> int:
        return int(self.mean2d.shape[0])


def project(cloud: GaussianCloud, camera: Camera,
            settings: RenderSettings = RenderSettings()) -> ProjectedGaussians:
    """Transform a cloud into sorted screen-space footprints for one view.

    Culls Gaussians behind the near plane and those whose cutoff footprint
    misses the image rectangle entirely.
    """
    dtype = cloud.dtype
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    tvec = torch.as_tensor(camera.translation, dtype=dtype)

    cam_pts = cloud.centers @ rot.T + tvec
    in_front = cam_pts[:, 2] > settings.near
    sel = torch.nonzero(in_front).squeeze(1)
    if sel.numel() == 0:
        return _empty_projection(cloud, camera)

    pts = cam_pts[sel]
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy

    rot_g = quaternion_to_matrix(cloud.rotations[sel])
    scales = torch.exp(cloud.log_scales[sel])
    m = (rot.unsqueeze(0) @ rot_g) * scales.unsqueeze(1)
    cov_cam = m @ m.transpose(1, 2)

    zero = torch.zeros_like(z)
    jrow0 = torch.stack([camera.fx / z, zero, -camera.fx * x / (z * z)], dim=1)
    jrow1 = torch.stack([zero, camera.fy / z, -camera.fy * y / (z * z)], dim=1)
    jac = torch.stack([jrow0, jrow1], dim=1)  # (M, 2, 3)

    dil = settings.dilation * torch.eye(2, dtype=dtype)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2) + dil
    # Hard-depth chain: the 3D shape is frozen so only mean-dependent terms
    # carry gradient; the projective Jacobian stays live.
    cov2d_hard = jac @ cov_cam.detach() @ jac.transpose(1, 2) + dil

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    with torch.no_grad():
        mid = 0.5 * (a + c)
        eig_max = mid + torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
        radius = settings.cutoff_sigma * torch.sqrt(torch.clamp(eig_max, min=0.0))
        on_screen = (
            (u + radius >= 0.0)
            & (u - radius <= camera.width - 1.0)
            & (v + radius >= 0.0)
            & (v - radius <= camera.height - 1.0)
        )
    sel2 = torch.nonzero(on_screen).squeeze(1)
    if sel2.numel() == 0:
        return _empty_projection(cloud, camera)

    order = torch.argsort(z[sel2], stable=True)  # stable: ties keep source order
    take = sel2[order]
    source_index = sel[take]

    cam_center = torch.as_tensor(camera.center(), dtype=dtype)
    dirs = cloud.centers[source_index].detach() - cam_center
    dirs = dirs / torch.linalg.norm(dirs, dim=1, keepdim=True)

    return ProjectedGaussians(
        mean2d=torch.stack([u[take], v[take]], dim=1),
        cov2d=cov2d[take],
        conic=_invert_2x2(cov2d[take]),
        conic_hard=_invert_2x2(cov2d_hard[take]),
        view_depth=z[take],
        eval_color=evaluate_colors(cloud.colors[source_index], dirs),
        opacity=torch.sigmoid(cloud.opacity_logits[source_index]),
        identity=cloud.identity_codes[source_index],
        radius_px=radius[take].detach(),
        source_index=source_index,
        width=camera.width,
        height=camera.height,
        cloud=cloud,
    )


def _invert_2x2(cov: torch.Tensor) -> torch.Tensor:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=1)


def _empty_projection(cloud: GaussianCloud, camera: Camera) -> ProjectedGaussians:
    dtype = cloud.dtype
    e = lambda *shape: torch.zeros(shape, dtype=dtype)
    return ProjectedGaussians(
        mean2d=e(0, 2), cov2d=e(0, 2, 2), conic=e(0, 3), conic_hard=e(0, 3),
        view_depth=e(0), eval_color=e(0, 3), opacity=e(0), identity=e(0, 16),
        radius_px=e(0), source_index=torch.zeros(0, dtype=torch.long),
        width=camera.width, height=camera.height, cloud=cloud,
    )


@dataclass
class RenderOutput:
    """All composited channels for one view plus the saved adjoint state.

    ``soft_depth`` carries the full gradient graph; ``soft_depth_frozen``
    holds the same values with geometry treated as constant (opacity-only
    gradients) and ``hard_depth`` is frozen to center-only gradients by
    construction.
    """

    color: torch.Tensor  # (H, W, 3)
    id_feature: torch.Tensor  # (H, W, 16)
    soft_depth: torch.Tensor  # (H, W)
    hard_depth: torch.Tensor | None  # (H, W)
    accum_alpha: torch.Tensor  # (H, W)
    soft_depth_frozen: torch.Tensor | None  # (H, W)
    backward_state: "ProjectedGaussians"

    def channels(self) -> dict[str, torch.Tensor]:
        out = {
            "color": self.color,
            "id_feature": self.id_feature,
            "soft_depth": self.soft_depth,
            "accum_alpha": self.accum_alpha,
        }
        if self.hard_depth is not None:
            out["hard_depth"] = self.hard_depth
        if self.soft_depth_frozen is not None:
            out["soft_depth_frozen"] = self.soft_depth_frozen
        return out

    def backward(self, adjoints: dict, retain_graph: bool = False) -> GradientSet:
        """Exact gradients of ``sum(adjoint * channel)`` over the requested
        channels with respect to every Gaussian attribute.

        Adjoints on ``hard_depth`` reach centers only and adjoints on
        ``soft_depth_frozen`` reach opacities only (those freeze contracts
        are baked into the channels' graphs); all other channels propagate
        to every attribute.  Also fills the per-Gaussian screen-space
        positional gradient norms used by densification.
        """
        proj = self.backward_state
        available = self.channels()
        outputs, grads = [], []
        for name, adj in adjoints.items():
            if name not in available:
                raise ContractViolation(f"unknown or disabled channel {name!r}")
            channel = available[name]
            adj_t = torch.as_tensor(adj, dtype=channel.dtype).detach()
            if tuple(adj_t.shape) != tuple(channel.shape):
                raise ContractViolation(
                    f"adjoint for {name!r} has shape {tuple(adj_t.shape)}, "
                    f"expected {tuple(channel.shape)}"
                )
            outputs.append(channel)
            grads.append(adj_t)
        gset = _empty_gradset(proj.cloud)
        if len(proj):
            gset.visible[proj.source_index] = True
            gset.radius_px[proj.source_index] = proj.radius_px
        if not outputs or not len(proj):
            return gset
        leaves = proj.cloud.params()
        if not any(t.requires_grad for t in leaves.values()):
            raise ContractViolation(
                "cloud tensors do not require grad; render a cloud built with with_grad()"
            )
        inputs = list(leaves.values()) + [proj.mean2d]
        results = torch.autograd.grad(
            outputs, inputs, grad_outputs=grads,
            allow_unused=True, retain_graph=retain_graph,
        )
        for name, res in zip(leaves.keys(), results[:-1]):
            if res is not None:
                setattr(gset, "d_" + name, res)
        mean2d_grad = results[-1]
        if mean2d_grad is not None:
            norms = torch.linalg.norm(mean2d_grad, dim=1)
            gset.grad2d_norm.index_put_((proj.source_index,), norms)
        return gset


def _empty_gradset(cloud: GaussianCloud) -> GradientSet:
    z = lambda t: torch.zeros_like(t, requires_grad=False)
    n = len(cloud)
    return GradientSet(
        d_centers=z(cloud.centers), d_log_scales=z(cloud.log_scales),
        d_rotations=z(cloud.rotations), d_opacity_logits=z(cloud.opacity_logits),
        d_colors=z(cloud.colors), d_identity_codes=z(cloud.identity_codes),
        d_head_weight=torch.zeros(0, dtype=cloud.dtype),
        d_head_bias=torch.zeros(0, dtype=cloud.dtype),
        grad2d_norm=torch.zeros(n, dtype=cloud.dtype),
        visible=torch.zeros(n, dtype=torch.bool),
        radius_px=torch.zeros(n, dtype=cloud.dtype),
    )


def _assert_sorted(proj: ProjectedGaussians) -> None:
    if len(proj) < 2:
        return
    z = proj.view_depth.detach()
    idx = proj.source_index
    dz = z[1:] - z[:-1]
    ok = (dz > 0) | ((dz == 0) & (idx[1:] > idx[:-1]))
    if not bool(ok.all()):
        raise ContractViolation(
            "composite requires input sorted by view depth (ties by source index)"
        )


def _plan_tiles(proj: ProjectedGaussians, tile: int):
    """Per-tile footprint lists (numpy planning; lists keep global depth order)."""
    ntx = -(-proj.width // tile)
    u = proj.mean2d[:, 0].detach().numpy()
    v = proj.mean2d[:, 1].detach().numpy()
    r = proj.radius_px.numpy()
    nty = -(-proj.height // tile)
    tx0 = np.clip(np.floor((u - r) / tile).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor((u + r) / tile).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor((v - r) / tile).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor((v + r) / tile).astype(np.int64), 0, nty - 1)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    cnt = nx * ny
    total = int(cnt.sum())
    gauss = np.repeat(np.arange(len(u), dtype=np.int64), cnt)
    offs = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = tx0[gauss] + offs % nx[gauss]
    ty = ty0[gauss] + offs // nx[gauss]
    tile_id = ty * ntx + tx
    order = np.argsort(tile_id, kind="stable")  # stable keeps depth order per tile
    tiles, starts, counts = np.unique(tile_id[order], return_index=True, return_counts=True)
    return ntx, tiles, starts, counts, gauss[order]


class _ChainFunction(torch.autograd.Function):
    """Fused forward/backward for one compositing chain over a tile chunk.

    Shapes: pix (T, P), mu (T, K, 2), conic (T, K, 3), opacity (T, K),
    valid (T, K), values (T, K, C).  Returns the weighted channel sums
    (T, P, C), accumulated alpha (T, P), and the detached intermediates a
    dependent frozen chain can reuse.  The backward implements the exact
    adjoint of the front-to-back recurrence via suffix sums instead of a
    reverse scan.
    """

    @staticmethod
    def forward(ctx, px, py, mu, conic, opacity, valid, values,
                alpha_clamp, alpha_skip, min_transmittance):
        dx = px.unsqueeze(2) - mu[:, :, 0].unsqueeze(1)  # (T, P, K)
        dy = py.unsqueeze(2) - mu[:, :, 1].unsqueeze(1)
        quad = (
            conic[:, :, 0].unsqueeze(1) * dx * dx
            + 2.0 * conic[:, :, 1].unsqueeze(1) * dx * dy
            + conic[:, :, 2].unsqueeze(1) * dy * dy
        )
        gauss = torch.exp(-0.5 * quad)
        raw = opacity.unsqueeze(1) * gauss
        clamped = torch.clamp(raw, max=alpha_clamp)
        passed = (clamped >= alpha_skip) & valid.unsqueeze(1).to(torch.bool)
        alpha = clamped * passed
        dmask = passed & (raw < alpha_clamp)  # where d(alpha)/d(raw) = 1
        trans_incl = torch.cumprod(1.0 - alpha, dim=2)
        trans_excl = torch.cat(
            [torch.ones_like(trans_incl[:, :, :1]), trans_incl[:, :, :-1]], dim=2
        )
        include = trans_excl >= min_transmittance
        weight = alpha * trans_excl * include
        tfin = torch.prod(1.0 - alpha * include, dim=2)
        sums = torch.bmm(weight, values)
        accum = 1.0 - tfin
        ctx.save_for_backward(px, py, mu, conic, opacity, values,
                              alpha, trans_excl, gauss, tfin)
        ctx.include = include
        ctx.dmask = dmask
        return sums, accum, alpha, trans_excl, include, gauss, dmask, tfin

    @staticmethod
    def backward(ctx, g_sums, g_accum, *unused):
        px, py, mu, conic, opacity, values, alpha, trans_excl, gauss, tfin = \
            ctx.saved_tensors
        include = ctx.include
        dmask = ctx.dmask
        need_mu, need_conic, need_opacity, need_values = (
            ctx.needs_input_grad[2], ctx.needs_input_grad[3],
            ctx.needs_input_grad[4], ctx.needs_input_grad[6],
        )
        weight = alpha * trans_excl * include
        d_values = torch.bmm(weight.transpose(1, 2), g_sums) if need_values else None

        d_mu = d_conic = d_opacity = None
        if need_mu or need_conic or need_opacity:
            u = torch.bmm(g_sums, values.transpose(1, 2))  # (T, P, K)
            wu = weight * u
            suffix = wu.sum(dim=2, keepdim=True) - torch.cumsum(wu, dim=2)
            one_minus = 1.0 - alpha
            d_alpha = (
                include * trans_excl * u
                - suffix / one_minus
                + g_accum.unsqueeze(2) * include * tfin.unsqueeze(2) / one_minus
            )
            d_raw = d_alpha * dmask
            if need_opacity:
                d_opacity = (d_raw * gauss).sum(dim=1)
            if need_mu or need_conic:
                d_quad = d_raw * opacity.unsqueeze(1) * gauss * -0.5
                dx = px.unsqueeze(2) - mu[:, :, 0].unsqueeze(1)
                dy = py.unsqueeze(2) - mu[:, :, 1].unsqueeze(1)
                if need_conic:
                    d_conic = torch.stack([
                        (d_quad * dx * dx).sum(dim=1),
                        (d_quad * dx * dy).sum(dim=1) * 2.0,
                        (d_quad * dy * dy).sum(dim=1),
                    ], dim=2)
                if need_mu:
                    a = conic[:, :, 0].unsqueeze(1)
                    b = conic[:, :, 1].unsqueeze(1)
                    c = conic[:, :, 2].unsqueeze(1)
                    d_mu = torch.stack([
                        (-2.0 * d_quad * (a * dx + b * dy)).sum(dim=1),
                        (-2.0 * d_quad * (b * dx + c * dy)).sum(dim=1),
                    ], dim=2)
        return (None, None, d_mu, d_conic, d_opacity, None, d_values,
                None, None, None)


class _FrozenSoftFunction(torch.autograd.Function):
    """Opacity-only gradient chain that reuses the live chain's forward.

    Returns copies of the live soft z-sum and accumulated alpha but routes
    the backward exclusively to the opacity logits, with every geometric
    quantity treated as a constant.
    """

    @staticmethod
    def forward(ctx, opacity, zvals, z_sum, accum, alpha, trans_excl,
                include, gauss, dmask, tfin):
        ctx.save_for_backward(opacity, zvals, alpha, trans_excl, gauss, tfin)
        ctx.include = include
        ctx.dmask = dmask
        return z_sum.clone(), accum.clone()

    @staticmethod
    def backward(ctx, gz, g_accum):
        opacity, zvals, alpha, trans_excl, gauss, tfin = ctx.saved_tensors
        include = ctx.include
        dmask = ctx.dmask
        if not ctx.needs_input_grad[0]:
            return (None,) * 10
        u = gz.unsqueeze(2) * zvals.unsqueeze(1)  # (T, P, K)
        weight = alpha * trans_excl * include
        wu = weight * u
        suffix = wu.sum(dim=2, keepdim=True) - torch.cumsum(wu, dim=2)
        one_minus = 1.0 - alpha
        d_alpha = (
            include * trans_excl * u
            - suffix / one_minus
            + g_accum.unsqueeze(2) * include * tfin.unsqueeze(2) / one_minus
        )
        d_opacity = (d_alpha * dmask * gauss).sum(dim=1)
        return (d_opacity,) + (None,) * 9


def _composite_chunk(flat, proj, vals, settings, tiles, starts, counts,
                     gauss_sorted, chunk, ntx):
    tile = settings.tile_size
    w, h = proj.width, proj.height
    kmax = max(int(counts[t]) for t in chunk)
    tc = len(chunk)
    idx = np.zeros((tc, kmax), dtype=np.int64)
    kvalid = np.zeros((tc, kmax), dtype=bool)
    ox = np.empty(tc, dtype=np.int64)
    oy = np.empty(tc, dtype=np.int64)
    for j, t in enumerate(chunk):
        k = int(counts[t])
        s = int(starts[t])
        idx[j, :k] = gauss_sorted[s:s + k]
        kvalid[j, :k] = True
        ox[j] = (int(tiles[t]) % ntx) * tile
        oy[j] = (int(tiles[t]) // ntx) * tile

    dtype = proj.mean2d.dtype
    gidx = torch.from_numpy(idx.reshape(-1))
    mu = proj.mean2d[gidx].reshape(tc, kmax, 2)
    conic = proj.conic[gidx].reshape(tc, kmax, 3)
    opacity = proj.opacity[gidx].reshape(tc, kmax)
    zvals = proj.view_depth[gidx].reshape(tc, kmax)
    gvals = vals[gidx].reshape(tc, kmax, -1)
    valid = torch.from_numpy(kvalid).reshape(tc, kmax)

    grid = np.arange(tile * tile, dtype=np.int64)
    px = torch.from_numpy(ox[:, None] + (grid % tile)[None, :]).to(dtype)  # (tc, P)
    py = torch.from_numpy(oy[:, None] + (grid // tile)[None, :]).to(dtype)

    thresholds = (settings.alpha_clamp, settings.alpha_skip,
                  settings.min_transmittance)
    sums, accum, alpha, trans_excl, include, gauss, dmask, tfin = \
        _ChainFunction.apply(px, py, mu, conic, opacity, valid, gvals, *thresholds)
    parts = [sums, accum.unsqueeze(-1)]

    if settings.need_hard:
        conic_h = proj.conic_hard[gidx].reshape(tc, kmax, 3)
        omega = torch.full_like(opacity.detach(), settings.hard_omega)
        h_sums, h_accum = _ChainFunction.apply(
            px, py, mu, conic_h, omega, valid, zvals.unsqueeze(-1), *thresholds
        )[:2]
        parts += [h_sums, h_accum.unsqueeze(-1)]

    if settings.need_frozen_soft:
        # same numbers as the live soft chain; gradients reach opacity only
        z_froz, a_froz = _FrozenSoftFunction.apply(
            opacity, zvals.detach(), sums[:, :, 19].detach(), accum.detach(),
            alpha, trans_excl, include, gauss, dmask, tfin,
        )
        parts += [z_froz.unsqueeze(-1), a_froz.unsqueeze(-1)]

    block = torch.cat(parts, dim=-1)  # (tc, P, nch)
    pvalid = (px < w) & (py < h)
    flat_ids = (py * w + px).to(torch.long)[pvalid]
    return flat.index_put((flat_ids,), block[pvalid])


def composite(proj: ProjectedGaussians,
              settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Front-to-back alpha compositing of a depth-sorted footprint list.

    Per pixel, a footprint's influence is ``sigmoid(opacity_logit) *
    exp(-0.5 d^T cov2d^-1 d)`` clamped to ``alpha_clamp`` and skipped below
    ``alpha_skip``; accumulation stops once transmittance drops under
    ``min_transmittance``.  Soft and hard depth are normalized by their own
    accumulated alpha wherever it exceeds ``alpha_floor`` and fall back to
    the background depth elsewhere.
    """
    _assert_sorted(proj)
    h, w = proj.height, proj.width
    dtype = proj.mean2d.dtype
    bg_color = torch.tensor(settings.background_color, dtype=dtype)

    nch = 21 + (2 if settings.need_hard else 0) + (2 if settings.need_frozen_soft else 0)
    flat = torch.zeros(h * w, nch, dtype=dtype)

    if len(proj):
        ntx, tiles, starts, counts, gauss_sorted = _plan_tiles(proj, settings.tile_size)
        vals = torch.cat(
            [proj.eval_color, proj.identity, proj.view_depth.unsqueeze(1)], dim=1
        )  # (M, 20)
        by_size = np.argsort(counts, kind="stable")
        pix = settings.tile_size ** 2
        chunk: list[int] = []
        kmax = 0
        for t in by_size.tolist():
            knew = max(kmax, int(counts[t]))
            if chunk and (len(chunk) + 1) * pix * knew > settings.max_chunk_elements:
                flat = _composite_chunk(flat, proj, vals, settings, tiles, starts,
                                        counts, gauss_sorted, chunk, ntx)
                chunk, kmax = [], 0
            chunk.append(t)
            kmax = max(kmax, int(counts[t]))
        if chunk:
            flat = _composite_chunk(flat, proj, vals, settings, tiles, starts,
                                    counts, gauss_sorted, chunk, ntx)

    img = flat.reshape(h, w, nch)
    color_sum, id_sum = img[..., 0:3], img[..., 3:19]
    z_soft, a_soft = img[..., 19], img[..., 20]
    col = 21
    hard_depth = soft_frozen = None
    if settings.need_hard:
        hard_depth = _normalize_depth(img[..., col], img[..., col + 1], settings)
        col += 2
    if settings.need_frozen_soft:
        soft_frozen = _normalize_depth(img[..., col], img[..., col + 1], settings)

    color = color_sum + (1.0 - a_soft).unsqueeze(-1) * bg_color
    soft_depth = _normalize_depth(z_soft, a_soft, settings)
    return RenderOutput(
        color=color, id_feature=id_sum, soft_depth=soft_depth,
        hard_depth=hard_depth, accum_alpha=a_soft, soft_depth_frozen=soft_frozen,
        backward_state=proj,
    )


def _normalize_depth(z_sum: torch.Tensor, alpha: torch.Tensor,
                     settings: RenderSettings) -> torch.Tensor:
    covered = alpha > settings.alpha_floor
    denom = torch.where(covered, alpha, torch.ones_like(alpha))
    bg = torch.full_like(z_sum, settings.background_depth)
    return torch.where(covered, z_sum / denom, bg)


def render(cloud: GaussianCloud, camera: Camera,
           settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Project then composite one view; the entry point callers use."""
    return composite(project(cloud, camera, settings), settings)
