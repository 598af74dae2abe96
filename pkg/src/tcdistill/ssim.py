"""Structural similarity between gray images.

Window statistics are Gaussian-weighted and only fully valid window
positions contribute; no padding is applied at the borders.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagery import GrayImage

__all__ = ["SsimParams", "compute_ssim"]


@dataclass(frozen=True)
class SsimParams:
    """Parameters of the similarity measure.

    window must be odd and >= 3; stability constants are C1 = (k1 * L)^2 and
    C2 = (k2 * L)^2 where L is the dynamic range.
    """

    window: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.gaussian_sigma <= 0.0:
            raise ValueError(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if self.k1 <= 0.0 or self.k2 <= 0.0:
            raise ValueError("k1 and k2 must be > 0")
        if self.dynamic_range <= 0.0:
            raise ValueError(f"dynamic_range must be > 0, got {self.dynamic_range}")


def gaussian_window(window: int, sigma: float) -> np.ndarray:
    """Normalized (window, window) Gaussian weight kernel."""
    half = (window - 1) / 2.0
    offsets = np.arange(window, dtype=np.float64) - half
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Weighted sums over every fully contained window ("valid" positions).
    view = sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", view, kernel, optimize=True)


def compute_ssim(a: GrayImage, b: GrayImage, params: SsimParams = SsimParams()) -> float:
    """Mean structural similarity over all valid window positions.

    Symmetric in its arguments; compute_ssim(x, x) is exactly 1 up to
    1e-9. Raises ValueError when the images differ in size or are smaller
    than the window.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    if a.height < params.window or a.width < params.window:
        raise ValueError(f"{a.width}x{a.height} image smaller than {params.window}-pixel window")

    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    kernel = gaussian_window(params.window, params.gaussian_sigma)

    x = a.data
    y = b.data
    mu_x = _windowed(x, kernel)
    mu_y = _windowed(y, kernel)
    var_x = _windowed(x * x, kernel) - mu_x * mu_x
    var_y = _windowed(y * y, kernel) - mu_y * mu_y
    cov = _windowed(x * y, kernel) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
