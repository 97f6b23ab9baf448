"""Image-quality and verification-protocol metrics.

All image metrics operate on the storage-domain uint8 scale (dynamic
range 255); callers working with normalized tensors should denormalize
first so the structural scores match what gets written to disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d
from scipy.stats import rankdata

from .errors import MalformedInputError, ShapeMismatchError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _as_luma(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    raise MalformedInputError(f"expected HxW or HxWx3 image, got shape {arr.shape}")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: str = "gaussian",
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 255.0,
) -> float:
    """Structural similarity between two images on the 0..255 scale.

    `window="gaussian"` averages the local index over all fully valid
    window positions (no padding) with weighted first/second moments;
    `window="global"` uses a single window spanning the whole image
    with uniform weights. Color inputs are reduced to luma first.
    """
    ya, yb = _as_luma(a), _as_luma(b)
    if ya.shape != yb.shape:
        raise ShapeMismatchError(f"image shapes differ: {ya.shape} vs {yb.shape}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    if window == "global":
        mu1, mu2 = ya.mean(), yb.mean()
        v1, v2 = ya.var(), yb.var()
        cov = ((ya - mu1) * (yb - mu2)).mean()
        num = (2 * mu1 * mu2 + c1) * (2 * cov + c2)
        den = (mu1**2 + mu2**2 + c1) * (v1 + v2 + c2)
        return float(num / den)

    if window != "gaussian":
        raise MalformedInputError(f"unknown window mode: {window!r}")
    if min(ya.shape) < window_size:
        raise MalformedInputError(
            f"image {ya.shape} smaller than {window_size}x{window_size} window"
        )
    win = _gaussian_window(window_size, sigma)
    mu1 = correlate2d(ya, win, mode="valid")
    mu2 = correlate2d(yb, win, mode="valid")
    e11 = correlate2d(ya * ya, win, mode="valid")
    e22 = correlate2d(yb * yb, win, mode="valid")
    e12 = correlate2d(ya * yb, win, mode="valid")
    v1 = e11 - mu1**2
    v2 = e22 - mu2**2
    cov = e12 - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * cov + c2)
    den = (mu1**2 + mu2**2 + c1) * (v1 + v2 + c2)
    return float((num / den).mean())


def mse_psnr(a: np.ndarray, b: np.ndarray) -> tuple[float, float | None]:
    """Mean squared error and PSNR in dB on the 0..255 scale.

    PSNR is None for identical images (infinite by convention).
    """
    aa = np.asarray(a, dtype=np.float64)
    bb = np.asarray(b, dtype=np.float64)
    if aa.shape != bb.shape:
        raise ShapeMismatchError(f"image shapes differ: {aa.shape} vs {bb.shape}")
    mse = float(((aa - bb) ** 2).mean())
    if mse == 0.0:
        return 0.0, None
    return mse, 10.0 * math.log10(255.0**2 / mse)


def success_rate_obfuscation(scores: np.ndarray, tau: float) -> float:
    """Fraction of genuine comparisons pushed below the match threshold."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise MalformedInputError("empty score array")
    return float((s < tau).sum() / s.size)


def success_rate_impersonation(
    fold_scores: list[np.ndarray], tau: float
) -> tuple[float, float, list[float]]:
    """Per-fold fraction of scores at/above threshold; mean and population std.

    Returns (mean, std, per_fold_rates).
    """
    if not fold_scores:
        raise MalformedInputError("no folds given")
    rates = []
    for s in fold_scores:
        s = np.asarray(s, dtype=np.float64)
        if s.size == 0:
            raise MalformedInputError("empty fold in impersonation scores")
        rates.append(float((s >= tau).sum() / s.size))
    arr = np.array(rates)
    return float(arr.mean()), float(arr.std()), rates


@dataclass
class SaliencyStats:
    map: np.ndarray          # bool HxW
    fraction: float          # overall salient fraction
    bands: dict[str, float]  # salient fraction per horizontal third


def mask_saliency(mask: np.ndarray, threshold: float = 0.40) -> SaliencyStats:
    """Binary map of strongly perturbed pixels plus facial-band statistics.

    `mask` is HxWx3 (or HxW) in the normalized [-1, 1] domain; a pixel is
    salient when any channel exceeds `threshold` in magnitude. Bands are
    horizontal thirds of the image (eyes/brows land in the top-to-middle
    bands for upright faces, mouth/chin in the bottom one).
    """
    arr = np.abs(np.asarray(mask, dtype=np.float64))
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    elif arr.ndim != 2:
        raise MalformedInputError(f"expected HxW or HxWx3 mask, got shape {arr.shape}")
    sal = arr > threshold
    h = sal.shape[0]
    third = h // 3
    bands = {
        "top": float(sal[:third].mean()),
        "middle": float(sal[third : 2 * third].mean()),
        "bottom": float(sal[2 * third :].mean()),
    }
    return SaliencyStats(map=sal, fraction=float(sal.mean()), bands=bands)


def roc_auc(genuine: np.ndarray, impostor: np.ndarray) -> float:
    """Verification AUC via the rank statistic; ties get half credit."""
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    if g.size == 0 or i.size == 0:
        raise MalformedInputError("need at least one genuine and one impostor score")
    ranks = rankdata(np.concatenate([g, i]))
    u = ranks[: g.size].sum() - g.size * (g.size + 1) / 2
    return float(u / (g.size * i.size))
