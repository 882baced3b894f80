"""Image, depth and ranking metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata
from skimage.metrics import structural_similarity


def psnr(pred, target, peak: float = 1.0, cap: float = 99.0) -> float:
    """``10 log10(peak^2 / MSE)``, capped so identical images give ``cap``."""
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(peak ** 2 / mse))


def ssim(pred, target) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, range 1."""
    return float(structural_similarity(np.asarray(pred, np.float64), np.asarray(target, np.float64),
                                       channel_axis=-1, data_range=1.0, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False))


def rmse(pred, target, valid=None) -> float:
    """Root mean squared error over ``valid`` entries (finite positive targets by default)."""
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if valid is None:
        valid = np.isfinite(target) & (target > 0)
    if not np.any(valid):
        return float("nan")
    return float(np.sqrt(np.mean((pred[valid] - target[valid]) ** 2)))


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count half)."""
    scores = np.asarray(scores, np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
