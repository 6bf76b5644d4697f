"""Color reconstruction loss (L1 + D-SSIM) and image quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class PhotometricConfig:
    lambda_dssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must be in [0, 1]")


_window_cache: dict = {}


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    key = (size, sigma, dtype)
    if key not in _window_cache:
        coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
        g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
        g = g / g.sum()
        win = torch.outer(g, g)
        _window_cache[key] = win.expand(3, 1, size, size).contiguous()
    return _window_cache[key]


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
         dynamic_range: float = 1.0) -> torch.Tensor:
    """Structural similarity between two (H, W, 3) images.

    Gaussian-weighted local statistics with zero-padded same-size windows,
    averaged over the full frame. Differentiable in both inputs.
    """
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError("ssim expects two images of identical (H, W, 3) shape")
    win = _gaussian_window(window, sigma, a.dtype)
    pad = window // 2
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    mu_x = F.conv2d(x, win, padding=pad, groups=3)
    mu_y = F.conv2d(y, win, padding=pad, groups=3)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sig_x = F.conv2d(x * x, win, padding=pad, groups=3) - mu_xx
    sig_y = F.conv2d(y * y, win, padding=pad, groups=3) - mu_yy
    sig_xy = F.conv2d(x * y, win, padding=pad, groups=3) - mu_xy
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    ssim_map = ((2 * mu_xy + c1) * (2 * sig_xy + c2)) / (
        (mu_xx + mu_yy + c1) * (sig_x + sig_y + c2)
    )
    return ssim_map.mean()


def color_loss(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
               config: PhotometricConfig = PhotometricConfig()) -> torch.Tensor:
    """Masked mean absolute error plus structural dissimilarity.

    The L1 term averages over masked pixels only; the D-SSIM term zeroes
    masked-out pixels in both images before windowing so the structural
    comparison respects the same mask.
    """
    if rendered.shape != target.shape:
        raise ValueError("rendered and target images must share a shape")
    m = mask.to(rendered.dtype)
    count = m.sum()
    if float(count) == 0.0:
        return torch.zeros((), dtype=rendered.dtype)
    l1 = (torch.abs(rendered - target) * m.unsqueeze(-1)).sum() / (3.0 * count)
    if config.lambda_dssim == 0.0:
        return l1
    mm = m.unsqueeze(-1)
    s = ssim(rendered * mm, target * mm, config.ssim_window, config.ssim_sigma,
             config.dynamic_range)
    return l1 + config.lambda_dssim * (1.0 - s) / 2.0


def psnr(a, b, dynamic_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-zero MSE."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * np.log10(dynamic_range ** 2 / mse)


def ssim_metric(a, b, dynamic_range: float = 1.0) -> float:
    """SSIM as a plain float on numpy inputs, full-frame mean."""
    ta = torch.as_tensor(np.asarray(a, dtype=np.float64))
    tb = torch.as_tensor(np.asarray(b, dtype=np.float64))
    return float(ssim(ta, tb, dynamic_range=dynamic_range))
