"""Fixed-seed synthetic benchmark: an l2-normalized Gaussian mixture.

Each component has its own random low-rank covariance, so neighborhoods live
on differently oriented local subspaces, and component scales span a wide
range so the local density is far from uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vecio import brute_force_knn, l2_normalize


@dataclass
class MixtureModel:
    centers: np.ndarray  # (n_clusters, d)
    bases: np.ndarray  # (n_clusters, intrinsic_dim, d)
    weights: np.ndarray
    noise: float

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k, m, d = self.bases.shape
        comp = rng.choice(k, size=n, p=self.weights)
        coef = rng.standard_normal((n, m))
        x = self.centers[comp] + np.einsum("nm,nmd->nd", coef, self.bases[comp])
        x += self.noise * rng.standard_normal((n, d))
        return l2_normalize(x).astype(np.float32)


def mixture_model(d: int = 32, n_clusters: int = 24, intrinsic_dim: int = 6,
                  scale_range=(0.02, 1.0), center_norm: float = 3.0, noise: float = 0.02,
                  seed: int = 0) -> MixtureModel:
    """Random mixture whose component scales are log-uniform over ``scale_range``.

    The 50x range of scales makes local density very uneven, which is what
    the uniformity statistics measure.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, d)) / np.sqrt(d) * center_norm
    lo, hi = scale_range
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), (n_clusters, 1, 1)))
    bases = rng.standard_normal((n_clusters, intrinsic_dim, d)) / np.sqrt(d) * scales
    weights = rng.dirichlet(np.full(n_clusters, 2.0))
    return MixtureModel(centers, bases, weights, noise)


@dataclass
class Benchmark:
    train: np.ndarray
    base: np.ndarray
    queries: np.ndarray
    gt: np.ndarray


def make_benchmark(seed: int = 0, n_train: int = 2000, n_base: int = 20000, n_query: int = 500,
                   d: int = 32, gt_k: int = 100, **mixture) -> Benchmark:
    """Disjoint train / base / query draws from one mixture, plus exact ground truth."""
    model = mixture_model(d=d, seed=seed, **mixture)
    rng = np.random.default_rng(seed + 1_000_003)
    train = model.sample(n_train, rng)
    base = model.sample(n_base, rng)
    queries = model.sample(n_query, rng)
    gt = brute_force_knn(base, queries, min(gt_k, n_base))
    return Benchmark(train, base, queries, gt)
