"""Benchmark vector files (.fvecs / .ivecs / .bvecs) and exact k-NN.

Each record is a little-endian int32 dimension followed by that many
float32 (fvecs), int32 (ivecs) or uint8 (bvecs) values.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "NormalizationError",
    "read_vecs",
    "write_vecs",
    "format_from_path",
    "brute_force_knn",
    "topk_smallest",
    "l2_normalize",
]

_DTYPES = {
    "fvecs": np.dtype("<f4"),
    "ivecs": np.dtype("<i4"),
    "bvecs": np.dtype("u1"),
}


class FormatError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


def format_from_path(path) -> str:
    ext = Path(path).suffix.lstrip(".")
    if ext not in _DTYPES:
        raise FormatError(f"cannot infer vector format from extension of {path}")
    return ext


def _locate_error(buf: bytes, itemsize: int, path) -> None:
    """Walk the records one by one and raise at the first bad one."""
    offset = 0
    first_d = None
    while offset < len(buf):
        if offset + 4 > len(buf):
            raise FormatError(f"{path}: truncated record header at byte offset {offset}")
        d = int.from_bytes(buf[offset:offset + 4], "little", signed=True)
        if d <= 0:
            raise FormatError(f"{path}: invalid dimension {d} at byte offset {offset}")
        if first_d is None:
            first_d = d
        elif d != first_d:
            raise FormatError(f"{path}: record at byte offset {offset} declares d={d}, expected d={first_d}")
        end = offset + 4 + d * itemsize
        if end > len(buf):
            raise FormatError(f"{path}: truncated record at byte offset {offset}")
        offset = end


def read_vecs(path, fmt: str | None = None) -> np.ndarray:
    """Read all records of a vector file.

    Returns float32 for fvecs/bvecs (bytes widened exactly, no scaling) and
    int32 for ivecs.  An empty file gives a ``(0, 0)`` array.
    """
    fmt = fmt or format_from_path(path)
    dtype = _DTYPES[fmt]
    with open(path, "rb") as f:
        buf = f.read()
    if not buf:
        return np.zeros((0, 0), dtype=np.int32 if fmt == "ivecs" else np.float32)
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated record header at byte offset 0")
    d = int.from_bytes(buf[:4], "little", signed=True)
    if d <= 0:
        raise FormatError(f"{path}: invalid dimension {d} at byte offset 0")
    recsize = 4 + d * dtype.itemsize
    if len(buf) % recsize:
        _locate_error(buf, dtype.itemsize, path)
    n = len(buf) // recsize
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, recsize)
    dims = raw[:, :4].copy().view("<i4").ravel()
    if np.any(dims != d):
        _locate_error(buf, dtype.itemsize, path)
    data = raw[:, 4:].copy().view(dtype).reshape(n, d)
    if fmt == "ivecs":
        return data.astype(np.int32)
    return data.astype(np.float32)


def write_vecs(path, data, fmt: str | None = None) -> None:
    fmt = fmt or format_from_path(path)
    dtype = _DTYPES[fmt]
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {data.shape}")
    n, d = data.shape
    out = np.empty((n, 4 + d * dtype.itemsize), dtype=np.uint8)
    out[:, :4] = np.full((n, 1), d, dtype="<i4").view(np.uint8)
    out[:, 4:] = np.ascontiguousarray(data, dtype=dtype).view(np.uint8).reshape(n, -1)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(out.tobytes())
    os.replace(tmp, path)


def topk_smallest(dist: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries of each row, ordered by
    value then by index.  NaN ranks last."""
    if np.issubdtype(dist.dtype, np.floating) and np.isnan(dist).any():
        dist = np.where(np.isnan(dist), np.inf, dist)
    n = dist.shape[1]
    if k >= n:
        return np.argsort(dist, axis=1, kind="stable")[:, :k]
    out = np.empty((dist.shape[0], k), dtype=np.int64)
    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(dist, part, axis=1).max(axis=1)
    for i, row in enumerate(dist):
        # everything tied with the k-th value competes on index
        cand = np.flatnonzero(row <= kth[i])
        order = np.lexsort((cand, row[cand]))
        out[i] = cand[order[:k]]
    return out


def _sq_dists(base64, base_norms, q):
    q = q.astype(np.float64)
    d = (q * q).sum(axis=1)[:, None] + base_norms[None, :] - 2.0 * q @ base64.T
    np.maximum(d, 0.0, out=d)
    return d


def brute_force_knn(base, queries, k: int, exclude_self: bool = False,
                    return_distances: bool = False, block: int = 256):
    """Exact Euclidean k-NN of each query row in ``base``.

    Ties go to the lower base index.  With ``exclude_self`` the queries are
    the base itself and row ``i`` never returns ``i`` (duplicates of ``i``
    are still eligible).
    """
    base = np.asarray(base)
    queries = np.asarray(queries)
    if base.ndim != 2 or queries.ndim != 2 or base.shape[1] != queries.shape[1]:
        raise ValueError(f"dimension mismatch: base {base.shape}, queries {queries.shape}")
    n = base.shape[0] - (1 if exclude_self else 0)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    base64 = base.astype(np.float64)
    norms = (base64 * base64).sum(axis=1)
    ids = np.empty((len(queries), k), dtype=np.int64)
    dists = np.empty((len(queries), k), dtype=np.float64)
    for start in range(0, len(queries), block):
        d = _sq_dists(base64, norms, queries[start:start + block])
        if exclude_self:
            rows = np.arange(d.shape[0])
            d[rows, start + rows] = np.inf
        idx = topk_smallest(d, k)
        ids[start:start + block] = idx
        dists[start:start + block] = np.sqrt(np.take_along_axis(d, idx, axis=1))
    if return_distances:
        return ids, dists
    return ids


def l2_normalize(x) -> np.ndarray:
    x = np.asarray(x)
    norms = np.linalg.norm(x.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NormalizationError(f"row {zero[0]} has zero norm and no direction")
    return (x / norms[:, None]).astype(x.dtype if x.dtype.kind == "f" else np.float32)
