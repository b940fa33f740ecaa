"""Gaussian divergence and BIC sequence comparison.

Both follow the distance convention used everywhere in the package: larger
means "more likely two different speakers".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import FeatureSequence

VARIANCE_FLOOR = 1e-6
COVARIANCE_RIDGE = 1e-6


@dataclass
class GaussianStats:
    count: int
    mean: np.ndarray
    diag_var: np.ndarray
    full_cov: np.ndarray | None = None


def _frames(x) -> np.ndarray:
    frames = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"expected a T x F matrix, got shape {frames.shape}")
    return frames


def gaussian_stats(x, mode: str = "diag") -> GaussianStats:
    """Mean and (co)variance with 1/T normalization; diagonal variances floored at 1e-6."""
    if mode not in ("diag", "full"):
        raise ValueError(f"mode must be 'diag' or 'full', got {mode!r}")
    frames = _frames(x)
    count = frames.shape[0]
    if count < 2:
        raise ValueError(f"need at least 2 frames, got {count}")
    mean = frames.mean(axis=0)
    centered = frames - mean
    diag_var = np.maximum((centered ** 2).mean(axis=0), VARIANCE_FLOOR)
    full_cov = centered.T @ centered / count if mode == "full" else None
    return GaussianStats(count, mean, diag_var, full_cov)


def gaussian_divergence(a: GaussianStats, b: GaussianStats) -> float:
    """``sum_i (mu_a - mu_b)^2 / (sigma_a sigma_b)`` over diagonal standard deviations."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    return float(np.sum((a.mean - b.mean) ** 2 / np.sqrt(a.diag_var * b.diag_var)))


def bic_penalty(dim: int, count):
    """Free-parameter count of a full Gaussian times ``log(count) / 2``."""
    return 0.5 * (dim + 0.5 * dim * (dim + 1)) * np.log(count)


def _logdet(cov: np.ndarray) -> np.ndarray:
    dim = cov.shape[-1]
    sign, value = np.linalg.slogdet(cov + COVARIANCE_RIDGE * np.eye(dim))
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("covariance is not positive definite after regularization")
    return value


def bic_from_moments(n_x, mean_x, cov_x, n_y, mean_y, cov_y, penalty_weight: float = 1.0):
    """Vectorized delta-BIC from per-segment counts, means and 1/T covariances.

    Inputs may carry leading batch axes.  The pooled covariance is rebuilt
    from the moments, which keeps the score exactly symmetric in (x, y).
    """
    n_x = np.asarray(n_x, dtype=np.float64)
    n_y = np.asarray(n_y, dtype=np.float64)
    n = n_x + n_y
    diff = mean_x - mean_y
    outer = diff[..., :, None] * diff[..., None, :]
    w = (n_x * n_y / (n * n))[..., None, None]
    pooled = (n_x[..., None, None] * cov_x + n_y[..., None, None] * cov_y) / n[..., None, None] + w * outer
    data = 0.5 * n * _logdet(pooled) - (0.5 * n_x * _logdet(cov_x) + 0.5 * n_y * _logdet(cov_y))
    return data - penalty_weight * bic_penalty(mean_x.shape[-1], n)


def bic_distance(x, y, penalty_weight: float = 1.0) -> float:
    """Delta-BIC between modelling ``x`` and ``y`` with one full-covariance Gaussian or two.

    ``n/2 log|S_xy| - n_x/2 log|S_x| - n_y/2 log|S_y| - lambda P`` with
    ``P = (F + F(F+1)/2)/2 log n``; every covariance gets a 1e-6 ridge.
    """
    fx, fy = _frames(x), _frames(y)
    if fx.shape[1] != fy.shape[1]:
        raise ValueError("dimension mismatch")
    if min(len(fx), len(fy)) < fx.shape[1] + 1:
        raise ValueError(f"BIC needs at least F + 1 = {fx.shape[1] + 1} frames per segment")
    a, b = gaussian_stats(fx, "full"), gaussian_stats(fy, "full")
    return float(bic_from_moments(a.count, a.mean, a.full_cov, b.count, b.mean, b.full_cov, penalty_weight))
