"""Gaussian kernels and one-dimensional kernel density estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class KernelSpec:
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"kernel width must be positive, got {self.sigma}")


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma


def gaussian_kernel(x, y, sigma: float) -> float:
    """exp(-||x - y||^2 / (2 sigma^2))."""
    sigma = _check_sigma(sigma)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"vector lengths differ: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def cross_kernel(A, B, sigma: float) -> np.ndarray:
    sigma = _check_sigma(sigma)
    return np.exp(-sq_distances(A, B) / (2.0 * sigma * sigma))


def kernel_matrix(X, sigma: float) -> np.ndarray:
    """Symmetric Gaussian Gram matrix with an exact unit diagonal."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("kernel_matrix needs at least one row")
    K = cross_kernel(X, X, sigma)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K


def median_distance(X) -> float:
    """Median pairwise Euclidean distance over distinct pairs (0 if fewer than two rows)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    return float(np.median(np.sqrt(sq_distances(X, X)[iu])))


def kde_pdf(samples, bandwidth: float, eval_points) -> np.ndarray:
    """Gaussian kernel density estimate evaluated at ``eval_points``."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("kde_pdf needs at least one sample")
    h = _check_sigma(bandwidth)
    t = np.asarray(eval_points, dtype=np.float64).ravel()
    z = (t[:, None] - s[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (s.size * h * _SQRT_2PI)


def silverman_bandwidth(samples) -> float:
    """Silverman's rule of thumb: 0.9 min(std, IQR/1.34) n^(-1/5)."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("silverman_bandwidth needs at least two samples")
    if s.min() == s.max():
        raise ValueError("samples have zero spread; bandwidth undefined")
    std = s.std(ddof=1)
    q75, q25 = np.percentile(s, [75, 25])
    iqr = (q75 - q25) / 1.34
    spread = min(std, iqr) if iqr > 0 else std
    if not spread > 0:
        raise ValueError("samples have zero spread; bandwidth undefined")
    return float(0.9 * spread * s.size ** (-0.2))
