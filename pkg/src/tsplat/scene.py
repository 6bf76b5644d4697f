"""Core scene containers shared by the renderer, losses and trainer.

Learnable state lives in torch tensors (CPU, float64 by default) so the
renderer and every loss can differentiate through it; camera records and
image buffers stay numpy at the IO boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

IDENTITY_DIM = 16
DTYPE = torch.float64

PARAM_FIELDS = (
    "centers",
    "log_scales",
    "rotations",
    "opacity_logits",
    "colors",
    "identity_codes",
)

VALID_SH_BASIS = (1, 4, 9, 16)


@dataclass
class GaussianCloud:
    """Optimizable splat scene, one row per Gaussian.

    centers        (N, 3) world-space positions
    log_scales     (N, 3) log of the per-axis standard deviation
    rotations      (N, 4) unit quaternions, (w, x, y, z) order
    opacity_logits (N,)   opacity = sigmoid(logit), in (0, 1) by construction
    colors         (N, B, 3) spherical-harmonic coefficients, B = (degree+1)^2
    identity_codes (N, 16) learnable instance-identity vectors
    """

    centers: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    identity_codes: torch.Tensor

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def sh_degree(self) -> int:
        return int(round(self.colors.shape[1] ** 0.5)) - 1

    @property
    def dtype(self) -> torch.dtype:
        return self.centers.dtype

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def detached(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach() for k, v in self.params().items()})

    def clone(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().clone() for k, v in self.params().items()})

    def with_grad(self) -> "GaussianCloud":
        """Detached leaf copy with requires_grad set, for one autograd pass."""
        return GaussianCloud(
            **{k: v.detach().clone().requires_grad_(True) for k, v in self.params().items()}
        )

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().to(dtype) for k, v in self.params().items()})

    def select(self, index) -> "GaussianCloud":
        """Row subset (boolean mask or integer index array)."""
        idx = torch.as_tensor(np.asarray(index))
        return GaussianCloud(**{k: v[idx] for k, v in self.params().items()})

    def cat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{k: torch.cat([v, getattr(other, k)], dim=0) for k, v in self.params().items()}
        )


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus pixel intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera, row-major
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("camera transform has wrong shape")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        ortho_err = float(np.abs(self.rotation @ self.rotation.T - np.eye(3)).max())
        det_err = abs(float(np.linalg.det(self.rotation)) - 1.0)
        if ortho_err > 1e-6 or det_err > 1e-6:
            raise ValueError(
                f"camera rotation must be orthonormal with det +1 "
                f"(orthogonality error {ortho_err:.2e}, det error {det_err:.2e})"
            )
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must fall inside the image")

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ViewBundle:
    """Per-view training buffers; all share the camera's height x width."""

    image: np.ndarray  # (H, W, 3) linear RGB in [0, 1]
    id_mask: np.ndarray  # (H, W) int; 0 = background, 1..C = instance
    prior_depth: np.ndarray  # (H, W) positive relative depth
    floating_mask: np.ndarray  # (H, W) bool; True = pixel participates in losses


@dataclass
class ClassHead:
    """Linear-plus-softmax classifier from identity features to instances.

    Column 0 of the output is the reserved background class.
    """

    weight: torch.Tensor  # (IDENTITY_DIM, C + 1)
    bias: torch.Tensor  # (C + 1,)

    @property
    def num_instances(self) -> int:
        return int(self.bias.shape[0]) - 1

    def params(self) -> dict[str, torch.Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def clone(self) -> "ClassHead":
        return ClassHead(self.weight.detach().clone(), self.bias.detach().clone())

    def detached(self) -> "ClassHead":
        return ClassHead(self.weight.detach(), self.bias.detach())

    def with_grad(self) -> "ClassHead":
        return ClassHead(
            self.weight.detach().clone().requires_grad_(True),
            self.bias.detach().clone().requires_grad_(True),
        )

    def to(self, dtype: torch.dtype) -> "ClassHead":
        return ClassHead(self.weight.detach().to(dtype), self.bias.detach().to(dtype))


def init_class_head(instance_count: int, seed: int, std: float = 0.01,
                    dtype: torch.dtype = DTYPE) -> ClassHead:
    """Seeded small-noise head over `instance_count` instances plus background."""
    if instance_count < 1:
        raise ValueError("instance_count must be >= 1")
    rng = np.random.default_rng(seed)
    weight = rng.normal(0.0, std, size=(IDENTITY_DIM, instance_count + 1))
    bias = np.zeros(instance_count + 1)
    return ClassHead(
        torch.from_numpy(weight).to(dtype), torch.from_numpy(bias).to(dtype)
    )


@dataclass
class GradientSet:
    """Gradients from one backward pass plus the screen-space statistics
    that densification feeds on."""

    d_centers: torch.Tensor
    d_log_scales: torch.Tensor
    d_rotations: torch.Tensor
    d_opacity_logits: torch.Tensor
    d_colors: torch.Tensor
    d_identity_codes: torch.Tensor
    d_head_weight: torch.Tensor
    d_head_bias: torch.Tensor
    grad2d_norm: torch.Tensor  # (N,) ||dL/d mean2d|| per Gaussian, 0 when culled
    visible: torch.Tensor  # (N,) bool, Gaussian survived projection culling
    radius_px: torch.Tensor  # (N,) projected footprint radius, 0 when culled

    @staticmethod
    def zeros(cloud: GaussianCloud, head: ClassHead) -> "GradientSet":
        z = lambda t: torch.zeros_like(t)
        n = len(cloud)
        return GradientSet(
            d_centers=z(cloud.centers),
            d_log_scales=z(cloud.log_scales),
            d_rotations=z(cloud.rotations),
            d_opacity_logits=z(cloud.opacity_logits),
            d_colors=z(cloud.colors),
            d_identity_codes=z(cloud.identity_codes),
            d_head_weight=z(head.weight),
            d_head_bias=z(head.bias),
            grad2d_norm=torch.zeros(n, dtype=cloud.dtype),
            visible=torch.zeros(n, dtype=torch.bool),
            radius_px=torch.zeros(n, dtype=cloud.dtype),
        )

    def cloud_grads(self) -> dict[str, torch.Tensor]:
        return {
            "centers": self.d_centers,
            "log_scales": self.d_log_scales,
            "rotations": self.d_rotations,
            "opacity_logits": self.d_opacity_logits,
            "colors": self.d_colors,
            "identity_codes": self.d_identity_codes,
        }


def validate_scene(cloud: GaussianCloud) -> list[str]:
    """Check every cloud invariant; returns one message per violation.

    Reporting only: never raises, never mutates. An empty list means valid.
    """
    problems: list[str] = []
    n = len(cloud)
    expected = {
        "centers": (n, 3),
        "log_scales": (n, 3),
        "rotations": (n, 4),
        "opacity_logits": (n,),
        "identity_codes": (n, IDENTITY_DIM),
    }
    for name, shape in expected.items():
        tensor = getattr(cloud, name)
        if tuple(tensor.shape) != shape:
            problems.append(f"{name} has shape {tuple(tensor.shape)}, expected {shape}")
    if cloud.colors.ndim != 3 or cloud.colors.shape[0] != n or cloud.colors.shape[2] != 3:
        problems.append(f"colors has shape {tuple(cloud.colors.shape)}, expected ({n}, B, 3)")
    elif cloud.colors.shape[1] not in VALID_SH_BASIS:
        problems.append(
            f"colors basis size {cloud.colors.shape[1]} is not a degree 0..3 block"
        )
    for name, tensor in cloud.params().items():
        if tensor.numel() and not bool(torch.isfinite(tensor).all()):
            bad = int(torch.nonzero(~torch.isfinite(tensor).reshape(n, -1).all(dim=1))[0])
            problems.append(f"{name} contains a non-finite value at index {bad}")
    if tuple(cloud.rotations.shape) == (n, 4) and n:
        norms = torch.linalg.norm(cloud.rotations, dim=1)
        off = torch.nonzero(torch.abs(norms - 1.0) > 1e-6).squeeze(1)
        for i in off.tolist():
            problems.append(f"rotation {i} has norm {float(norms[i]):.6g}, expected 1")
    return problems


def init_random_cloud(count: int, bounds, seed: int, sh_degree: int = 0,
                      dtype: torch.dtype = DTYPE) -> GaussianCloud:
    """Seeded uniform cloud inside an axis-aligned box.

    The per-axis standard deviation of each Gaussian starts at the mean
    distance to its 3 nearest neighbours (so coverage scales with density),
    opacity starts at 0.1, and identity codes at tiny Gaussian noise so a
    fresh scene is translucent and semantically uncommitted.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
        raise ValueError("bounds must be a non-degenerate axis-aligned box")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(lo, hi, size=(count, 3))
    if count == 1:
        sigma = np.full(1, 0.1 * float(np.linalg.norm(hi - lo)))
    else:
        k = min(3, count - 1)
        dist, _ = cKDTree(centers).query(centers, k=k + 1)
        sigma = dist[:, 1:].mean(axis=1)
    codes = rng.normal(0.0, 0.01, size=(count, IDENTITY_DIM))
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    colors = np.zeros((count, (sh_degree + 1) ** 2, 3))
    opacity_logit = float(np.log(0.1) - np.log(0.9))
    return GaussianCloud(
        centers=torch.from_numpy(centers).to(dtype),
        log_scales=torch.from_numpy(np.repeat(np.log(sigma)[:, None], 3, axis=1)).to(dtype),
        rotations=torch.from_numpy(quats).to(dtype),
        opacity_logits=torch.full((count,), opacity_logit, dtype=dtype),
        colors=torch.from_numpy(colors).to(dtype),
        identity_codes=torch.from_numpy(codes).to(dtype),
    )


def bounding_sphere(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid-anchored enclosing sphere of a point set: (center, radius)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("cannot bound an empty point set")
    center = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    return center, radius


def camera_extent(cameras) -> float:
    """Radius of the camera-center bounding sphere; the scene scale unit
    used for densification thresholds and the background depth constant."""
    centers = np.stack([cam.center() for cam in cameras])
    _, radius = bounding_sphere(centers)
    return max(radius, 1e-6)


def background_depth_for(cameras) -> float:
    """Depth constant written into pixels no splat covers: 1.1 x the
    diameter of the camera bounding sphere."""
    return 1.1 * 2.0 * camera_extent(cameras)
