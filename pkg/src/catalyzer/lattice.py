"""Spherical lattice quantizer on the integer points of a sphere.

The codebook is the set of integer vectors ``z`` in ``Z^d`` with
``sum(z_i**2) == r2``.  Every such point is a signed permutation of an
*atom*, a non-increasing vector of non-negative integers.  Codes are laid out
atom by atom (atoms in lexicographically decreasing order); inside an atom's
range a code is ``perm_rank << nnz | sign_bits``.
"""

from __future__ import annotations

import bisect
import math
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Atom",
    "LatticeCodebook",
    "enumerate_atoms",
    "multiset_permutations",
    "perm_rank",
    "perm_unrank",
    "count_points",
    "asymmetric_distance",
    "write_codes",
    "read_codes",
]

CODE_MAGIC = b"SPLAT1"


def multiset_permutations(values) -> int:
    """Number of distinct arrangements of the multiset ``values``."""
    n = math.factorial(len(values))
    for m in Counter(values).values():
        n //= math.factorial(m)
    return n


@dataclass(frozen=True)
class Atom:
    values: tuple
    n_perms: int = field(init=False)
    nnz: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_perms", multiset_permutations(self.values))
        object.__setattr__(self, "nnz", sum(1 for v in self.values if v))

    @property
    def block_size(self) -> int:
        return self.n_perms << self.nnz


def enumerate_atoms(d: int, r2: int) -> list[tuple]:
    """All non-increasing non-negative integer d-tuples with squared sum r2.

    Returned in lexicographically decreasing order.  An empty list means r2
    is not a sum of d squares.
    """
    if d < 1 or r2 < 1:
        raise ValueError(f"need d >= 1 and r2 >= 1, got d={d}, r2={r2}")
    out = []
    prefix = []

    def rec(pos, remaining, cap):
        if pos == d:
            if remaining == 0:
                out.append(tuple(prefix))
            return
        slots = d - pos
        for v in range(min(cap, math.isqrt(remaining)), -1, -1):
            # the remaining slots hold values <= v
            if v * v * slots < remaining:
                break
            prefix.append(v)
            rec(pos + 1, remaining - v * v, v)
            prefix.pop()

    rec(0, r2, math.isqrt(r2))
    return out


def _value_counts(atom) -> dict:
    return dict(Counter(atom))


def perm_rank(atom, arrangement) -> int:
    """Lexicographic rank of ``arrangement`` among the distinct arrangements
    of ``atom``, larger values ordered first (the atom itself has rank 0)."""
    counts = _value_counts(atom)
    if _value_counts(arrangement) != counts:
        raise ValueError(f"{tuple(arrangement)} is not an arrangement of {tuple(atom)}")
    keys = sorted(counts, reverse=True)
    total = multiset_permutations(atom)
    rank = 0
    n = len(atom)
    for a in arrangement:
        for v in keys:
            if v == a:
                break
            if counts[v]:
                rank += total * counts[v] // n
        total = total * counts[a] // n
        counts[a] -= 1
        n -= 1
    return rank


def perm_unrank(atom, rank: int) -> tuple:
    """Inverse of :func:`perm_rank`."""
    counts = _value_counts(atom)
    keys = sorted(counts, reverse=True)
    total = multiset_permutations(atom)
    if not 0 <= rank < total:
        raise ValueError(f"rank {rank} out of range for atom {tuple(atom)} ({total} arrangements)")
    out = []
    n = len(atom)
    for _ in range(len(atom)):
        for v in keys:
            if not counts[v]:
                continue
            block = total * counts[v] // n
            if rank < block:
                out.append(v)
                total = block
                counts[v] -= 1
                break
            rank -= block
        n -= 1
    return tuple(out)


class LatticeCodebook:
    """Codebook for the sphere of squared radius ``r2`` in ``Z^d``.

    Immutable after construction.
    """

    def __init__(self, d: int, r2: int):
        atoms = enumerate_atoms(d, r2)
        if not atoms:
            raise ValueError(f"{r2} is not a sum of {d} squares: the lattice sphere is empty")
        self.d = d
        self.r2 = r2
        self.r = math.sqrt(r2)
        self.atoms = [Atom(a) for a in atoms]
        self.offsets = []
        total = 0
        for atom in self.atoms:
            self.offsets.append(total)
            total += atom.block_size
        self.count = total
        self.bits = max(1, (total - 1).bit_length())
        self._index = {a.values: i for i, a in enumerate(self.atoms)}
        self._atom_int = np.array(atoms, dtype=np.int64)
        self._atom_float = self._atom_int.astype(np.float64)

    def __repr__(self):
        return f"LatticeCodebook(d={self.d}, r2={self.r2}, atoms={len(self.atoms)}, count={self.count}, bits={self.bits})"

    @property
    def code_dtype(self):
        return np.uint64 if self.bits <= 64 else object

    def assign(self, y) -> np.ndarray:
        """Nearest lattice points (max inner product) for the rows of ``y``.

        Ties between atoms go to the earlier atom; ties in ``|y|`` keep the
        original coordinate order.  Zero coordinates get a positive sign.
        """
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        y = np.atleast_2d(y)
        if y.shape[1] != self.d:
            raise ValueError(f"expected vectors of dimension {self.d}, got {y.shape[1]}")
        absy = np.abs(y)
        order = np.argsort(-absy, axis=1, kind="stable")
        sorted_abs = np.take_along_axis(absy, order, axis=1)
        best = np.argmax(sorted_abs @ self._atom_float.T, axis=1)
        z = np.empty(y.shape, dtype=np.int64)
        np.put_along_axis(z, order, self._atom_int[best], axis=1)
        z[y < 0] *= -1
        return z[0] if single else z

    def quantize(self, y) -> np.ndarray:
        """Assign and rescale onto the unit sphere."""
        return self.assign(y) / self.r

    def _encode_one(self, z) -> int:
        z = [int(v) for v in z]
        if len(z) != self.d or sum(v * v for v in z) != self.r2:
            raise ValueError(f"point {tuple(z)} is not on the lattice sphere d={self.d}, r2={self.r2}")
        arrangement = tuple(abs(v) for v in z)
        i = self._index[tuple(sorted(arrangement, reverse=True))]
        atom = self.atoms[i]
        signs = 0
        for v in z:
            if v:
                signs = (signs << 1) | (v < 0)
        return self.offsets[i] + (perm_rank(atom.values, arrangement) << atom.nnz) + signs

    def _decode_one(self, code: int) -> list:
        code = int(code)
        if not 0 <= code < self.count:
            raise ValueError(f"code {code} out of range [0, {self.count})")
        i = bisect.bisect_right(self.offsets, code) - 1
        atom = self.atoms[i]
        local = code - self.offsets[i]
        signs = local & ((1 << atom.nnz) - 1)
        arrangement = perm_unrank(atom.values, local >> atom.nnz)
        out = []
        bit = atom.nnz - 1
        for v in arrangement:
            if v:
                out.append(-v if (signs >> bit) & 1 else v)
                bit -= 1
            else:
                out.append(0)
        return out

    def encode(self, z) -> np.ndarray:
        """Codes for lattice points (rows of ``z``)."""
        z = np.atleast_2d(np.asarray(z))
        return np.array([self._encode_one(row) for row in z], dtype=self.code_dtype)

    def decode(self, codes) -> np.ndarray:
        """Lattice points for ``codes``, as an int64 matrix."""
        codes = np.atleast_1d(np.asarray(codes, dtype=self.code_dtype))
        out = np.empty((len(codes), self.d), dtype=np.int64)
        for j, c in enumerate(codes):
            out[j] = self._decode_one(c)
        return out


def count_points(codebook: LatticeCodebook) -> int:
    return sum(a.block_size for a in codebook.atoms)


def asymmetric_distance(query, codes, codebook: LatticeCodebook) -> np.ndarray:
    """Squared distance between unit ``query`` and the decoded points scaled to
    the unit sphere, computed as ``2 - 2 <q, z> / r``."""
    z = codebook.decode(codes).astype(np.float64)
    return 2.0 - 2.0 * (z @ np.asarray(query, dtype=np.float64)) / codebook.r


def _to_limbs(codes, n_limbs: int) -> np.ndarray:
    if n_limbs == 1 and np.asarray(codes).dtype == np.uint64:
        return np.asarray(codes, dtype=np.uint64)[:, None]
    mask = (1 << 64) - 1
    return np.array([[(int(c) >> (64 * j)) & mask for j in range(n_limbs)] for c in codes],
                    dtype=np.uint64).reshape(len(codes), n_limbs)


def pack_bits(codes, bits: int) -> bytes:
    """Pack integer codes contiguously at ``bits`` each, little-endian bit order."""
    n_limbs = (bits + 63) // 64
    limbs = _to_limbs(codes, n_limbs)
    shifts = np.arange(64, dtype=np.uint64)
    bitmat = ((limbs[:, :, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    bitmat = bitmat.reshape(len(limbs), n_limbs * 64)[:, :bits]
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def unpack_bits(buf: bytes, n: int, bits: int):
    flat = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    if flat.size < n * bits:
        raise ValueError(f"code payload holds {flat.size} bits, expected {n * bits}")
    bitmat = flat[: n * bits].reshape(n, bits)
    if bits <= 64:
        weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
        return (bitmat.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
    return np.array([int("".join(map(str, row[::-1])), 2) for row in bitmat], dtype=object)


def write_codes(path, codes, codebook: LatticeCodebook) -> None:
    codes = np.asarray(codes, dtype=codebook.code_dtype)
    mask = (1 << 64) - 1
    header = CODE_MAGIC + struct.pack(
        "<IIQQBQ", codebook.d, codebook.r2, codebook.count & mask, codebook.count >> 64,
        codebook.bits, len(codes))
    with open(path, "wb") as f:
        f.write(header)
        f.write(pack_bits(codes, codebook.bits))


def read_codes(path):
    """Read a lattice code file; returns ``(codes, codebook)``."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] == CODE_MAGIC[:5] and buf[5:6] != CODE_MAGIC[5:]:
        raise ValueError(f"{path}: unsupported lattice code file version {buf[5:6]!r}")
    if buf[:6] != CODE_MAGIC:
        raise ValueError(f"{path}: not a lattice code file (magic {buf[:6]!r})")
    hsize = 6 + struct.calcsize("<IIQQBQ")
    if len(buf) < hsize:
        raise ValueError(f"{path}: truncated header")
    d, r2, lo, hi, bits, n = struct.unpack("<IIQQBQ", buf[6:hsize])
    codebook = LatticeCodebook(d, r2)
    if codebook.count != lo | (hi << 64) or codebook.bits != bits:
        raise ValueError(f"{path}: header count/bit width disagree with lattice d={d}, r2={r2}")
    expected = (n * bits + 7) // 8
    if len(buf) - hsize != expected:
        raise ValueError(f"{path}: payload has {len(buf) - hsize} bytes, expected {expected}")
    return unpack_bits(buf[hsize:], n, bits), codebook
