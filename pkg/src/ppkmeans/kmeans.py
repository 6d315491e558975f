"""Job configuration and the plaintext Lloyd oracle.

The oracle mirrors the secure path operation for operation: reduced
distances, first-minimum tie rule, and the phantom-member update
(numerator += previous centroid, denominator += 1 for every cluster, which
keeps cluster sizes secret in the secure path and whose fixed point is the
ordinary per-cluster mean).  Keeping the rules identical is what makes
per-iteration assignment agreement a meaningful test.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ring import DEFAULT_CONFIG, FixedPointConfig

INIT_MODES = ("random", "local-kmeans", "explicit")


@dataclass(frozen=True)
class PartitionSpec:
    """How the joint n x d matrix is split between the two parties."""

    mode: str
    n: int
    d: int
    n_a: int
    n_b: int
    d_a: int
    d_b: int

    def __post_init__(self):
        if self.mode == "vertical":
            ok = self.n == self.n_a == self.n_b and self.d == self.d_a + self.d_b
        elif self.mode == "horizontal":
            ok = self.n == self.n_a + self.n_b and self.d == self.d_a == self.d_b
        else:
            raise ValueError("mode must be 'vertical' or 'horizontal'")
        if not ok:
            raise ValueError(f"inconsistent partition shapes for {self.mode}")

    @classmethod
    def vertical(cls, n: int, d_a: int, d_b: int) -> "PartitionSpec":
        return cls("vertical", n, d_a + d_b, n, n, d_a, d_b)

    @classmethod
    def horizontal(cls, n_a: int, n_b: int, d: int) -> "PartitionSpec":
        return cls("horizontal", n_a + n_b, d, n_a, n_b, d, d)

    def local_shape(self, role: str) -> tuple[int, int]:
        if self.mode == "vertical":
            return (self.n, self.d_a if role == "A" else self.d_b)
        return (self.n_a if role == "A" else self.n_b, self.d)


def default_reciprocal_iters(n: int) -> int:
    return math.ceil(math.log2(max(n, 2))) + 6


@dataclass
class KMeansConfig:
    k: int
    max_iters: int
    partition: PartitionSpec
    epsilon: float = 0.0
    init: str = "random"
    sparse: bool = False
    fixed_point: FixedPointConfig = field(default_factory=lambda: DEFAULT_CONFIG)
    reciprocal_iters: int | None = None
    seed: bytes = b"\x00" * 16
    open_results: bool = False
    explicit_centroids: np.ndarray | None = None
    normalize: bool = True
    he_key_bits: int = 2048

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k >= 2")
        if self.epsilon < 0:
            raise ValueError("epsilon >= 0")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.init == "explicit":
            if self.explicit_centroids is None:
                raise ValueError("explicit init needs explicit_centroids")
            self.explicit_centroids = np.asarray(self.explicit_centroids,
                                                 dtype=np.float64)
            if self.explicit_centroids.shape != (self.k, self.partition.d):
                raise ValueError("explicit_centroids must be k x d")
        if self.reciprocal_iters is None:
            self.reciprocal_iters = default_reciprocal_iters(self.partition.n)
        if len(self.seed) != 16:
            raise ValueError("seed must be 16 bytes")

    def digest(self, store_session: bytes) -> bytes:
        """Hash of every field both parties must agree on."""
        p = self.partition
        blob = {
            "k": self.k, "max_iters": self.max_iters, "epsilon": self.epsilon,
            "init": self.init, "sparse": self.sparse,
            "partition": [p.mode, p.n, p.d, p.n_a, p.n_b, p.d_a, p.d_b],
            "fixed_point": [self.fixed_point.total_bits, self.fixed_point.frac_bits],
            "theta": self.reciprocal_iters,
            "seed": self.seed.hex(),
            "open_results": self.open_results,
            "normalize": self.normalize,
            "he_key_bits": self.he_key_bits,
            "session": store_session.hex(),
        }
        if self.explicit_centroids is not None:
            blob["explicit"] = hashlib.sha256(
                np.ascontiguousarray(self.explicit_centroids).tobytes()).hexdigest()
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).digest()


def normalize_minmax(x: np.ndarray) -> np.ndarray:
    """Per-feature min-max scaling to [0, 1]; constant features map to 0."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    out = np.zeros_like(x)
    live = span > 0
    out[:, live] = (x[:, live] - lo[live]) / span[live]
    return out


@dataclass
class PlainKMeansResult:
    centroids: np.ndarray
    assignments: list          # per-iteration label arrays
    iters_run: int
    stopped_early: bool


def reduced_distance_matrix(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """|mu_j|^2 - 2 x . mu_j: the argmin-equivalent reduced form."""
    return (mu * mu).sum(axis=1)[None, :] - 2.0 * (x @ mu.T)


def plaintext_kmeans(x: np.ndarray, k: int, init_centroids: np.ndarray,
                     max_iters: int, epsilon: float = 0.0) -> PlainKMeansResult:
    """Reference Lloyd iteration; the oracle for the secure protocol.

    Ties pick the first (lowest-index) minimum.  Every cluster's update is
    blended with the previous centroid (phantom member), so empty clusters
    keep their centroid instead of dividing by zero.  Stops when the total
    squared centroid displacement is strictly below epsilon.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError("need n >= k")
    mu = np.array(init_centroids, dtype=np.float64, copy=True)
    assignments = []
    stopped = False
    iters_run = 0
    for _ in range(max_iters):
        labels = np.argmin(reduced_distance_matrix(x, mu), axis=1)
        assignments.append(labels)
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0
        num = onehot.T @ x + mu
        den = onehot.sum(axis=0) + 1.0
        mu_new = num / den[:, None]
        disp = float(((mu_new - mu) ** 2).sum())
        mu = mu_new
        iters_run += 1
        if disp < epsilon:
            stopped = True
            break
    return PlainKMeansResult(mu, assignments, iters_run, stopped)
