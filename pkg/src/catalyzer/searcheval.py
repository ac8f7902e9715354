"""Exhaustive compressed-domain search and evaluation statistics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .binarycodes import hamming_search
from .lattice import LatticeCodebook
from .vecio import brute_force_knn, topk_smallest

__all__ = [
    "EvalReport",
    "UniformityStats",
    "EpsilonCurve",
    "lattice_scan",
    "scan_search",
    "recall_at_k",
    "evaluate",
    "uniformity_overlap",
    "epsilon_curve",
    "results_at_recall",
    "angular_histogram",
]


@dataclass
class EvalReport:
    recalls: dict  # k -> recall 1@k
    params: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def rows(self):
        """``(metric, k, value)`` rows.  Timings are left out so reports of the
        same artifacts are byte-identical."""
        return [("recall1@", k, v) for k, v in sorted(self.recalls.items())]

    def to_tsv(self) -> str:
        lines = ["metric\tk_or_eps\tvalue"]
        lines += [f"{m}\t{k}\t{v:.6f}" for m, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("timings")
        d["recalls"] = {str(k): v for k, v in d["recalls"].items()}
        return json.dumps(d, sort_keys=True, indent=1)


@dataclass
class UniformityStats:
    probability: float
    nn1: np.ndarray  # distance of each point to its nearest neighbor
    nnk: np.ndarray  # ... and to its k_far-th neighbor
    k_far: int
    pairs: int

    def histograms(self, bins: int = 50):
        hi = float(max(self.nn1.max(), self.nnk.max()))
        edges = np.linspace(0.0, hi, bins + 1)
        return edges, np.histogram(self.nn1, edges)[0], np.histogram(self.nnk, edges)[0]


@dataclass
class EpsilonCurve:
    eps: np.ndarray
    mean_results: np.ndarray
    recall: np.ndarray

    def rows(self):
        return list(zip(self.eps.tolist(), self.mean_results.tolist(), self.recall.tolist()))


def lattice_scan(query_features, points, r: float, k: int, block: int = 256) -> np.ndarray:
    """Top-k ids under ``2 - 2 <q, z> / r`` against decoded lattice points."""
    q = np.asarray(query_features, dtype=np.float64)
    z = np.asarray(points, dtype=np.float64)
    out = np.empty((len(q), k), dtype=np.int64)
    for s in range(0, len(q), block):
        dist = 2.0 - 2.0 * (q[s:s + block] @ z.T) / r
        out[s:s + block] = topk_smallest(dist, k)
    return out


def scan_search(query_features, codes, k: int, codebook: LatticeCodebook | None = None) -> np.ndarray:
    """Exhaustive search of ``codes``.

    With a codebook the codes are lattice codes compared asymmetrically with
    the unquantized queries; without one they are packed binary codes and the
    queries must be packed binary codes too.
    """
    n = len(codes)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if codebook is None:
        return hamming_search(query_features, codes, k)
    q = np.asarray(query_features)
    if q.shape[1] != codebook.d:
        raise ValueError(f"queries have dimension {q.shape[1]}, codes are {codebook.d}-dimensional")
    return lattice_scan(q, codebook.decode(codes), codebook.r, k)


def recall_at_k(results, gt, k: int) -> float:
    """Fraction of queries whose true nearest neighbor is in their top k."""
    results = np.asarray(results)[:, :k]
    truth = np.asarray(gt)[:, :1]
    return float((results == truth).any(axis=1).mean())


def evaluate(results, gt, ks=(1, 10, 100), params=None, timings=None) -> EvalReport:
    ks = [k for k in ks if k <= np.asarray(results).shape[1]]
    return EvalReport({k: recall_at_k(results, gt, k) for k in ks}, dict(params or {}), dict(timings or {}))


def uniformity_overlap(features, k_far: int = 100, pairs: int = 100_000, seed: int = 0) -> UniformityStats:
    """Monte-Carlo estimate of P[d(x, NN_1(x)) > d(y, NN_k_far(y))] over random
    ordered pairs x != y, with exact neighbor distances inside ``features``."""
    x = np.asarray(features)
    n = len(x)
    if n <= k_far:
        raise ValueError(f"need more than k_far={k_far} points, got {n}")
    _, dist = brute_force_knn(x, x, k_far, exclude_self=True, return_distances=True)
    nn1, nnk = dist[:, 0], dist[:, k_far - 1]
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, pairs)
    j = (i + rng.integers(1, n, pairs)) % n
    p = float((nn1[i] > nnk[j]).mean())
    return UniformityStats(p, nn1, nnk, k_far, pairs)


def epsilon_curve(base, queries, gt, thresholds, block: int = 256) -> EpsilonCurve:
    """Range-search statistics per threshold: mean number of base vectors
    within ``eps`` of a query, and the fraction of queries whose true nearest
    neighbor (``gt[:, 0]``) is within ``eps``."""
    eps = np.asarray(thresholds, dtype=np.float64)
    if np.any(eps <= 0) or np.any(np.diff(eps) <= 0):
        raise ValueError("thresholds must be positive and strictly ascending")
    b = np.asarray(base, dtype=np.float64)
    norms = (b * b).sum(axis=1)
    q_all = np.asarray(queries, dtype=np.float64)
    true_nn = np.asarray(gt)[:, 0]
    sq_eps = eps ** 2
    counts = np.zeros(len(eps))
    hits = np.zeros(len(eps))
    for s in range(0, len(q_all), block):
        q = q_all[s:s + block]
        d = np.maximum((q * q).sum(axis=1)[:, None] + norms[None, :] - 2.0 * q @ b.T, 0.0)
        nn_d = d[np.arange(len(q)), true_nn[s:s + block]]
        hits += (nn_d[None, :] <= sq_eps[:, None]).sum(axis=1)
        d.sort(axis=1)
        for row in d:
            counts += np.searchsorted(row, sq_eps, side="right")
    nq = len(q_all)
    return EpsilonCurve(eps, counts / nq, hits / nq)


def results_at_recall(base, queries, gt, target: float = 0.8) -> tuple[float, float]:
    """Smallest threshold whose range search finds the true nearest neighbor
    for at least ``target`` of the queries, and the mean result count there."""
    q = np.asarray(queries, dtype=np.float64)
    b = np.asarray(base, dtype=np.float64)
    true_nn = np.asarray(gt)[:, 0]
    nn_d = np.sqrt(((q - b[true_nn]) ** 2).sum(axis=1))
    idx = max(math.ceil(target * len(q)) - 1, 0)
    # small relative slack so the defining query survives rounding differences
    eps = float(np.sort(nn_d)[idx]) * (1 + 1e-9) + 1e-12
    return eps, float(epsilon_curve(b, q, gt, [eps]).mean_results[0])


def angular_histogram(features, n_planes: int = 2, n_bins: int = 64, seed: int = 0) -> np.ndarray:
    """Angle histograms of the features projected on random 2-D planes.

    Returns ``(n_planes, n_bins)`` counts over ``[-pi, pi)``.
    """
    if n_bins < 4:
        raise ValueError("n_bins must be >= 4")
    y = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    edges = np.linspace(-np.pi, np.pi, n_bins + 1)
    out = np.zeros((n_planes, n_bins), dtype=np.int64)
    for p in range(n_planes):
        plane, _ = np.linalg.qr(rng.standard_normal((y.shape[1], 2)))
        uv = y @ plane
        theta = np.arctan2(uv[:, 1], uv[:, 0])
        out[p] = np.bincount(np.clip(np.searchsorted(edges, theta, side="right") - 1, 0, n_bins - 1),
                             minlength=n_bins)
    return out
