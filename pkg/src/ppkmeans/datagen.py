"""Synthetic dataset generation and evaluation helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticSpec:
    n: int
    d: int
    k_true: int
    cluster_std: float = 0.05
    sparsity: float = 0.0        # fraction of entries forced to zero
    outliers: int = 0            # extra uniform points labeled -1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity in [0, 1)")
        if self.n < self.k_true:
            raise ValueError("n >= k_true required")


def gen_dataset(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs in [0,1]^d with forced zeros and optional outliers.

    Returns (X, labels); injected outliers carry label -1 and are appended
    after the n blob points.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(0.15, 0.85, size=(spec.k_true, spec.d))
    labels = rng.integers(0, spec.k_true, size=spec.n)
    x = centers[labels] + rng.normal(0.0, spec.cluster_std,
                                     size=(spec.n, spec.d))
    x = np.clip(x, 0.0, 1.0)
    if spec.outliers:
        extra = rng.uniform(0.0, 1.0, size=(spec.outliers, spec.d))
        x = np.vstack([x, extra])
        labels = np.concatenate([labels, -np.ones(spec.outliers, dtype=np.int64)])
    if spec.sparsity > 0:
        zero_mask = rng.uniform(size=x.shape) < spec.sparsity
        x[zero_mask] = 0.0
    return x, labels.astype(np.int64)


def split_vertical(x: np.ndarray, d_a: int) -> tuple[np.ndarray, np.ndarray]:
    return x[:, :d_a].copy(), x[:, d_a:].copy()


def split_horizontal(x: np.ndarray, n_a: int) -> tuple[np.ndarray, np.ndarray]:
    return x[:n_a, :].copy(), x[n_a:, :].copy()


def jaccard(r: set, r_star: set) -> float:
    """|R intersect R*| / |R union R*|; two empty sets count as identical."""
    r, r_star = set(r), set(r_star)
    union = r | r_star
    if not union:
        return 1.0
    return len(r & r_star) / len(union)


def extract_outliers(x: np.ndarray, centroids: np.ndarray,
                     assignments: np.ndarray, q: float = 0.05) -> set:
    """Points whose distance to their centroid is above the 1-q quantile."""
    diffs = x - centroids[assignments]
    dist = np.sqrt((diffs * diffs).sum(axis=1))
    cut = np.quantile(dist, 1.0 - q)
    return set(np.flatnonzero(dist > cut).tolist())


def agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of samples assigned identically."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("assignment vectors of different length")
    return float((a == b).mean())
