"""Uniformity regularizer, triplet rank loss and their weighted sum.

All functions return the loss value together with its analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KoLeoValue", "TripletValue", "CombinedValue", "koleo", "triplet", "combined"]

RHO_FLOOR = 1e-8


@dataclass
class KoLeoValue:
    loss: float
    grad: np.ndarray
    nn_index: np.ndarray  # nearest other row of each row
    rho: np.ndarray  # distance to it, clamped below at RHO_FLOOR


@dataclass
class TripletValue:
    loss: float  # mean over triplets
    per_triplet: np.ndarray
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray


@dataclass
class CombinedValue:
    loss: float
    rank: float
    koleo: float
    grad: np.ndarray


def koleo(y) -> KoLeoValue:
    """Kozachenko-Leonenko style regularizer ``-mean(log rho_i)`` where
    ``rho_i`` is the distance from row ``i`` to its nearest other row.

    Exact O(n^2) neighbor search over the batch.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows to find nearest neighbors, got {n}")
    sq = (y * y).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (y @ y.T)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    diff = y - y[nn]
    # recomputed from differences: the expanded form loses precision for close rows
    dist = np.sqrt((diff * diff).sum(axis=1))
    rho = np.maximum(dist, RHO_FLOOR)
    loss = -np.log(rho).mean()

    live = dist > RHO_FLOOR
    coef = np.zeros(n)
    coef[live] = 1.0 / (n * dist[live] ** 2)
    g_own = -coef[:, None] * diff
    grad = g_own.copy()
    np.add.at(grad, nn, -g_own)
    return KoLeoValue(float(loss), grad, nn, rho)


def triplet(anchor, positive, negative) -> TripletValue:
    """Margin-free triplet loss ``max(0, |a - p| - |a - n|)`` averaged over rows.

    The gradient is zero wherever the hinge is not strictly active.
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    dp_vec, dn_vec = a - p, a - n
    dp = np.sqrt((dp_vec * dp_vec).sum(axis=-1))
    dn = np.sqrt((dn_vec * dn_vec).sum(axis=-1))
    margin = dp - dn
    per = np.maximum(margin, 0.0)
    m = per.size
    active = (margin > 0) / m

    with np.errstate(invalid="ignore", divide="ignore"):
        up = np.where(dp[..., None] > 0, dp_vec / dp[..., None], 0.0)
        un = np.where(dn[..., None] > 0, dn_vec / dn[..., None], 0.0)
    w = np.asarray(active)[..., None]
    ga = w * (up - un)
    return TripletValue(float(per.mean()), per, ga, -w * up, w * un)


def combined(y, triplets, lam: float, koleo_rows=None) -> CombinedValue:
    """``mean triplet loss + lam * koleo`` on a batch ``y``.

    ``triplets`` is ``(anchor_idx, positive_idx, negative_idx)``, row indices
    into ``y``; the regularizer runs on ``y[koleo_rows]`` (all rows by default).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    y = np.asarray(y, dtype=np.float64)
    ia, ip, ineg = (np.asarray(t) for t in triplets)
    t = triplet(y[ia], y[ip], y[ineg])
    grad = np.zeros_like(y)
    np.add.at(grad, ia, t.grad_anchor)
    np.add.at(grad, ip, t.grad_positive)
    np.add.at(grad, ineg, t.grad_negative)
    rows = np.arange(len(y)) if koleo_rows is None else np.asarray(koleo_rows)
    k = koleo(y[rows])
    if lam:
        np.add.at(grad, rows, lam * k.grad)
    return CombinedValue(t.loss + lam * k.loss, t.loss, k.loss, grad)
