"""Sign binarization, random-projection LSH, Hamming search and the PCA baseline."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .vecio import l2_normalize, topk_smallest

__all__ = [
    "ProjectionBasis",
    "identity_basis",
    "lsh_basis",
    "pca_fit",
    "binarize",
    "unpack_codes",
    "hamming_distances",
    "hamming_search",
    "write_codes",
    "read_codes",
]

CODE_MAGIC = b"SPBIN1"


@dataclass
class ProjectionBasis:
    """``m x d`` projection with an optional centering vector.

    ``kind`` is one of ``identity``, ``lsh`` or ``pca``.
    """

    matrix: np.ndarray
    kind: str
    mean: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ValueError(f"basis expects dimension {self.d}, got {x.shape[-1]}")
        if self.mean is not None:
            x = x - self.mean
        return x @ self.matrix.T

    def transform(self, x) -> np.ndarray:
        """Projection followed by l2-normalization (unit rows)."""
        return l2_normalize(self.project(x)).astype(np.float32)


def identity_basis(d: int) -> ProjectionBasis:
    return ProjectionBasis(np.eye(d), "identity")


def lsh_basis(d: int, m: int, seed: int = 0) -> ProjectionBasis:
    """``m`` isotropic Gaussian directions in dimension ``d``."""
    rng = np.random.default_rng(seed)
    return ProjectionBasis(rng.standard_normal((m, d)), "lsh")


def pca_fit(train, d_out: int) -> ProjectionBasis:
    """Top ``d_out`` principal directions of ``train`` (rows orthonormal,
    eigenvalues descending)."""
    x = np.asarray(train, dtype=np.float64)
    n, d = x.shape
    if n <= d_out or d_out > d:
        raise ValueError(f"need more than {d_out} training vectors of dimension >= {d_out}, got {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    evals, evecs = np.linalg.eigh(xc.T @ xc / n)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank = int((evals > max(evals[0], 0) * 1e-10).sum())
    if rank < d_out:
        raise ValueError(f"training data has rank {rank}, cannot keep {d_out} directions")
    basis = evecs[:, :d_out].T
    # deterministic sign: largest-magnitude coordinate positive
    flip = np.sign(basis[np.arange(d_out), np.abs(basis).argmax(axis=1)])
    return ProjectionBasis(basis * flip[:, None], "pca", mean)


def binarize(x, basis: ProjectionBasis | None = None) -> np.ndarray:
    """Packed sign codes: bit ``i`` is set iff projected coordinate ``i`` is >= 0.

    Rows are ``ceil(m / 64)`` uint64 words, bit ``i`` at position ``i % 64``
    of word ``i // 64``.
    """
    x = np.atleast_2d(np.asarray(x))
    p = x if basis is None else basis.project(x)
    bits = (p >= 0).astype(np.uint8)
    n, m = bits.shape
    n_words = (m + 63) // 64
    padded = np.zeros((n, n_words * 64), dtype=np.uint8)
    padded[:, :m] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").astype(np.uint64)


def unpack_codes(codes, m: int) -> np.ndarray:
    codes = np.ascontiguousarray(codes, dtype="<u8")
    return np.unpackbits(codes.view(np.uint8), axis=1, bitorder="little")[:, :m]


def hamming_distances(queries, base) -> np.ndarray:
    q = np.asarray(queries, dtype=np.uint64)
    b = np.asarray(base, dtype=np.uint64)
    out = np.zeros((len(q), len(b)), dtype=np.int32)
    for w in range(q.shape[1]):
        out += np.bitwise_count(q[:, w, None] ^ b[None, :, w]).astype(np.int32)
    return out


def hamming_search(queries, base, k: int, block: int = 256) -> np.ndarray:
    """Exact top-k base ids by Hamming distance, ties to the lower id."""
    queries = np.asarray(queries)
    base = np.asarray(base)
    if queries.shape[1] != base.shape[1]:
        raise ValueError("query and base codes have different lengths")
    if not 1 <= k <= len(base):
        raise ValueError(f"k={k} must be in [1, {len(base)}]")
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), block):
        out[s:s + block] = topk_smallest(hamming_distances(queries[s:s + block], base), k)
    return out


def write_codes(path, codes, m: int) -> None:
    codes = np.ascontiguousarray(codes, dtype="<u8")
    if codes.ndim != 2 or codes.shape[1] != (m + 63) // 64:
        raise ValueError(f"codes of shape {codes.shape} do not hold {m}-bit rows")
    with open(path, "wb") as f:
        f.write(CODE_MAGIC + struct.pack("<IQ", m, len(codes)))
        f.write(codes.tobytes())


def read_codes(path):
    """Read a binary code file; returns ``(codes, m)``."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] == CODE_MAGIC[:5] and buf[5:6] != CODE_MAGIC[5:]:
        raise ValueError(f"{path}: unsupported binary code file version {buf[5:6]!r}")
    if buf[:6] != CODE_MAGIC:
        raise ValueError(f"{path}: not a binary code file (magic {buf[:6]!r})")
    if len(buf) < 18:
        raise ValueError(f"{path}: truncated header")
    m, n = struct.unpack("<IQ", buf[6:18])
    words = (m + 63) // 64
    if len(buf) - 18 != n * words * 8:
        raise ValueError(f"{path}: payload size does not match {n} rows of {m} bits")
    return np.frombuffer(buf, dtype="<u8", offset=18).reshape(n, words).astype(np.uint64), m
