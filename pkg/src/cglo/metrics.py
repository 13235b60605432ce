"""Image quality metrics and median / half-IQR summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``; identical images give ``inf``."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise InvalidArgument(f"shape mismatch {x.shape} vs {ref.shape}")
    if data_range <= 0:
        raise InvalidArgument("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_mean(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(img, w.shape)
    return np.einsum("ijkl,kl->ij", patches, w)


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian (sigma 1.5) windows."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape or x.ndim != 2:
        raise InvalidArgument(f"need two equal 2-D images, got {x.shape} and {ref.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise InvalidArgument(f"image {x.shape} is smaller than the {SSIM_WINDOW}px window")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mx, my = _local_mean(x, w), _local_mean(ref, w)
    sxx = _local_mean(x * x, w) - mx * mx
    syy = _local_mean(ref * ref, w) - my * my
    sxy = _local_mean(x * ref, w) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(s.mean())


@dataclass
class MetricSummary:
    median: float
    half_iqr: float
    n: int
    per_item: list[float]

    def format(self, digits: int = 2) -> str:
        return f"{self.median:.{digits}f} ± {self.half_iqr:.{digits}f}"

    def to_dict(self) -> dict:
        return {"median": self.median, "half_iqr": self.half_iqr, "n": self.n}


def summarize(values) -> MetricSummary:
    """Median and half inter-quartile range (linear-interpolation quantiles).

    Infinite entries (exact matches under PSNR) are dropped with a warning.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise InvalidArgument("cannot summarize an empty list")
    finite = [v for v in vals if math.isfinite(v)]
    if len(finite) != len(vals):
        warnings.warn(f"dropping {len(vals) - len(finite)} non-finite values from summary",
                      RuntimeWarning, stacklevel=2)
    if not finite:
        raise InvalidArgument("no finite values to summarize")
    a = np.asarray(finite)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return MetricSummary(float(med), float(q3 - q1) / 2.0, len(finite), finite)
