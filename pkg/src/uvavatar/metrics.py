"""Image similarity metrics: L1, SSIM, MS-SSIM, DSSIM and a feature-matching distance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])
# the published five-scale weights sum to 1.0001; they are rescaled to sum to one
_RAW_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_WEIGHTS = tuple(w / sum(_RAW_WEIGHTS) for w in _RAW_WEIGHTS)


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    weights: tuple[float, ...] = MS_WEIGHTS

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window size must be odd and positive")
        if self.sigma <= 0 or self.data_range <= 0:
            raise ValueError("sigma and data range must be positive")
        if not self.weights or abs(sum(self.weights) - 1.0) > 1e-6:
            raise ValueError("scale weights must sum to 1")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def kernel(self) -> np.ndarray:
        x = np.arange(self.window) - self.window // 2
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


def to_gray(img) -> np.ndarray:
    """Float image; colour inputs are reduced to luminance. uint8 is mapped to [0, 1]."""
    a = np.asarray(img)
    scale = 255.0 if a.dtype == np.uint8 else 1.0
    a = a.astype(np.float64) / scale
    if a.ndim == 3:
        if a.shape[2] != 3:
            raise ValueError("colour images must have 3 channels")
        a = a @ LUMA
    elif a.ndim != 2:
        raise ValueError("images must be (H, W) or (H, W, 3)")
    return a


def l1(y, y_hat, mask=None) -> float:
    """Mean absolute difference over the masked (or all) entries."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    diff = np.abs(y - y_hat)
    if mask is None:
        return float(diff.mean())
    mask = np.asarray(mask, bool)
    if mask.shape != y.shape[:2]:
        raise ValueError("mask shape does not match the images")
    if not mask.any():
        raise ValueError("mask selects no texels")
    return float(diff[mask].mean())


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-D kernel."""
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def _ssim_maps(x: np.ndarray, y: np.ndarray, p: SsimParams):
    if min(x.shape) < p.window:
        raise ValueError(f"image {x.shape} smaller than the {p.window}-pixel window")
    g = p.kernel()
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    lum = (2 * mx * my + p.c1) / (mx * mx + my * my + p.c1)
    cs = (2 * sxy + p.c2) / (sxx + syy + p.c2)
    return lum, cs


def _pair(x, y):
    x, y = to_gray(x), to_gray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def ssim(x, y, params: SsimParams | None = None) -> float:
    p = params or SsimParams()
    x, y = _pair(x, y)
    lum, cs = _ssim_maps(x, y, p)
    return float((lum * cs).mean())


def downsample(img: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; an odd trailing row/column is dropped."""
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    a = img[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def msssim(x, y, params: SsimParams | None = None) -> float:
    """Multiscale SSIM; negative per-scale terms are clamped to 0 before exponentiation."""
    p = params or SsimParams()
    x, y = _pair(x, y)
    scales = len(p.weights)
    need = p.window * 2 ** (scales - 1)
    if min(x.shape) < need:
        raise ValueError(f"{scales}-scale MS-SSIM needs images of at least {need} pixels; "
                         "pass SsimParams with fewer weights for smaller inputs")
    out = 1.0
    for j, w in enumerate(p.weights):
        lum, cs = _ssim_maps(x, y, p)
        term = (lum * cs).mean() if j == scales - 1 else cs.mean()
        out *= max(float(term), 0.0) ** w
        if j < scales - 1:
            x, y = downsample(x), downsample(y)
    return float(out)


def dssim(x, y, params: SsimParams | None = None) -> float:
    return (1.0 - msssim(x, y, params)) / 2.0


FeatureExtractor = Callable[[np.ndarray], Sequence[np.ndarray]]


def pyramid_features(img, levels: int = 4) -> list[np.ndarray]:
    """Default extractor: a mean-pooling pyramid of the image itself."""
    a = np.asarray(img)
    a = a.astype(np.float64) / (255.0 if a.dtype == np.uint8 else 1.0)
    feats = [a]
    for _ in range(levels - 1):
        feats.append(downsample(feats[-1]))
    return feats


def perceptual_distance(x, y, extractor: FeatureExtractor = pyramid_features) -> float:
    """Mean over layers of the mean absolute feature difference."""
    fx, fy = list(extractor(x)), list(extractor(y))
    if not fx or len(fx) != len(fy):
        raise ValueError("extractor must return the same non-zero number of layers for both images")
    total = 0.0
    for a, b in zip(fx, fy):
        if a.shape != b.shape:
            raise ValueError(f"layer shape mismatch: {a.shape} vs {b.shape}")
        total += np.abs(a - b).mean()
    return float(total / len(fx))


def report(x, y, mask=None, params: SsimParams | None = None) -> dict[str, float]:
    """All metrics for one image pair (colour values compared in [0, 1])."""
    fx, fy = pyramid_features(x, 1)[0], pyramid_features(y, 1)[0]
    out = {"l1": l1(fx, fy, mask), "ssim": ssim(x, y, params), "perceptual": perceptual_distance(x, y)}
    try:
        out["msssim"] = msssim(x, y, params)
        out["dssim"] = (1.0 - out["msssim"]) / 2.0
    except ValueError:
        out["msssim"] = out["dssim"] = float("nan")
    return out
