"""Instance classification of identity features and the grouping loss.

The grouping loss is a 2D cross-entropy on rendered identity features plus
a 3D regularizer that pulls the classified distributions of neighbouring
Gaussians together (forward KL from each sampled Gaussian to its K nearest
neighbours by center distance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .scene import ClassHead, GaussianCloud

PROB_FLOOR = 1e-12  # inside logs, guards saturated softmax


@dataclass(frozen=True)
class GroupingConfig:
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    knn_k: int = 5
    sample_m: int = 1000

    def __post_init__(self):
        if self.lambda_2d < 0 or self.lambda_3d < 0:
            raise ValueError("grouping weights must be non-negative")
        if self.knn_k < 1 or self.sample_m < 1:
            raise ValueError("knn_k and sample_m must be >= 1")


def classify(features: torch.Tensor, head: ClassHead) -> torch.Tensor:
    """Softmax class probabilities for identity features of shape (..., 16)."""
    logits = features @ head.weight + head.bias
    return torch.softmax(logits, dim=-1)


def loss_2d(id_feature: torch.Tensor, id_mask, pixel_mask, head: ClassHead) -> torch.Tensor:
    """Mean cross-entropy between classified identity features and the mask
    over pixels where ``pixel_mask`` is true; 0 when no pixel qualifies.

    Which mask to pass is the caller's policy: the trainer supervises the
    identity channel on the full frame so background pixels teach the
    background class.
    """
    labels = torch.as_tensor(np.asarray(id_mask), dtype=torch.long)
    sel = torch.as_tensor(np.asarray(pixel_mask), dtype=torch.bool)
    if id_feature.shape[:2] != labels.shape or labels.shape != sel.shape:
        raise ValueError("id_feature, id_mask and pixel_mask shapes disagree")
    if not bool(sel.any()):
        return torch.zeros((), dtype=id_feature.dtype)
    feats = id_feature[sel]
    logits = feats @ head.weight + head.bias
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(1, labels[sel].unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()


def knn_indices(centers: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """K nearest neighbours of each query row among ``centers``, excluding
    the query itself, distance ties broken by lower index."""
    tree = cKDTree(centers)
    dist, idx = tree.query(centers[queries], k=k + 1)
    out = np.empty((len(queries), k), dtype=np.int64)
    for row, q in enumerate(queries):
        neigh = [(d, i) for d, i in zip(dist[row], idx[row]) if i != q]
        neigh.sort()
        out[row] = [i for _, i in neigh[:k]]
    return out


def loss_3d(cloud: GaussianCloud, head: ClassHead, config: GroupingConfig,
            seed) -> torch.Tensor:
    """Spatial-consistency regularizer on identity codes.

    Samples ``sample_m`` Gaussians uniformly without replacement (seeded),
    finds each one's K nearest neighbours by center distance, and averages
    the forward KL divergence from the sample's classified distribution to
    each neighbour's over all sample-neighbour pairs. Gradients flow to the
    identity codes only; the classifier head is treated as a constant here.
    """
    n = len(cloud)
    if n <= config.knn_k:
        raise ValueError(f"loss_3d needs more than knn_k={config.knn_k} Gaussians, got {n}")
    rng = np.random.default_rng(seed)
    m = min(config.sample_m, n)
    samples = rng.choice(n, size=m, replace=False)
    centers = cloud.centers.detach().numpy()
    neighbours = knn_indices(centers, samples, config.knn_k)

    head_const = head.detached()
    p = classify(cloud.identity_codes[torch.from_numpy(samples)], head_const)
    q = classify(cloud.identity_codes[torch.from_numpy(neighbours)], head_const)
    log_p = torch.log(torch.clamp(p, min=PROB_FLOOR)).unsqueeze(1)
    log_q = torch.log(torch.clamp(q, min=PROB_FLOOR))
    kl = (p.unsqueeze(1) * (log_p - log_q)).sum(dim=-1)  # (m, K)
    return kl.mean()


def grouping_loss(id_feature: torch.Tensor, id_mask, pixel_mask, cloud: GaussianCloud,
                  head: ClassHead, config: GroupingConfig, seed):
    """Weighted sum of the 2D identity loss and the 3D regularizer.

    Returns (total, l2d, l3d); a zero weight skips the corresponding term
    entirely, so ``lambda_3d = 0`` never touches the spatial index.
    """
    dtype = id_feature.dtype
    l2d = loss_2d(id_feature, id_mask, pixel_mask, head) if config.lambda_2d != 0 \
        else torch.zeros((), dtype=dtype)
    l3d = loss_3d(cloud, head, config, seed) if config.lambda_3d != 0 \
        else torch.zeros((), dtype=dtype)
    return config.lambda_2d * l2d + config.lambda_3d * l3d, l2d, l3d


def gaussian_class(cloud: GaussianCloud, head: ClassHead) -> tuple[np.ndarray, np.ndarray]:
    """Per-Gaussian (argmax class, max probability); ties pick the lowest
    class index. Pure readout used for ROI membership."""
    with torch.no_grad():
        probs = classify(cloud.identity_codes, head).numpy()
    if probs.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    cls = np.argmax(probs, axis=1)
    return cls, probs[np.arange(len(cls)), cls]
