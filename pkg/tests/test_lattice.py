import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catalyzer import lattice
from catalyzer.lattice import LatticeCodebook, enumerate_atoms, perm_rank, perm_unrank

from oracles import (distinct_arrangements, lattice_points_bruteforce,
                     lattice_points_recursive, sum_of_squares_count)


@pytest.fixture(scope="module")
def cb8():
    return LatticeCodebook(8, 10)


@pytest.fixture(scope="module")
def points8():
    return lattice_points_bruteforce(8, 10)


def test_atoms_of_8d_radius_sqrt10():
    assert enumerate_atoms(8, 10) == [
        (3, 1, 0, 0, 0, 0, 0, 0),
        (2, 2, 1, 1, 0, 0, 0, 0),
        (2, 1, 1, 1, 1, 1, 1, 0),
    ]


def test_atoms_small_cases():
    assert enumerate_atoms(2, 1) == [(1, 0)]
    assert enumerate_atoms(3, 7) == []
    assert len(lattice_points_recursive(3, 7)) == 0
    with pytest.raises(ValueError, match="not a sum of 3 squares"):
        LatticeCodebook(3, 7)


@pytest.mark.parametrize("d,r2", [(3, 5), (4, 9), (5, 6), (6, 5)])
def test_atoms_match_normalized_bruteforce(d, r2):
    pts = lattice_points_recursive(d, r2)
    atoms = {tuple(sorted(np.abs(p), reverse=True)) for p in pts}
    got = enumerate_atoms(d, r2)
    assert got == sorted(atoms, reverse=True)


def test_count_points(cb8, points8):
    assert lattice.count_points(LatticeCodebook(24, 1)) == 48
    assert len(points8) == 14112
    assert lattice.count_points(cb8) == 14112 == 56 * 4 + 420 * 16 + 56 * 128
    assert cb8.bits == 14 == math.ceil(math.log2(14112))


@pytest.mark.parametrize("d", [8, 16, 24])
def test_count_matches_dp(d):
    for r2 in range(1, 41):
        expected = sum_of_squares_count(d, r2)
        if expected == 0:
            assert enumerate_atoms(d, r2) == []
            continue
        assert lattice.count_points(LatticeCodebook(d, r2)) == expected


def test_24d_r79_fits_in_64_bits():
    cb = LatticeCodebook(24, 79)
    assert cb.count == sum_of_squares_count(24, 79) == 17319684851070915840
    assert cb.bits == 64
    assert cb.code_dtype == np.uint64


def test_layout_invariants():
    cb = LatticeCodebook(24, 79)
    assert all(a < b for a, b in zip(cb.offsets, cb.offsets[1:]))
    assert cb.offsets[-1] + cb.atoms[-1].block_size == cb.count
    for atom in cb.atoms:
        assert list(atom.values) == sorted(atom.values, reverse=True)
        assert sum(v * v for v in atom.values) == 79


def test_perm_rank_order():
    atom = (2, 2, 1, 1, 0, 0, 0, 0)
    assert perm_rank(atom, atom) == 0
    arrangements = distinct_arrangements(atom)
    assert len(arrangements) == 420 == lattice.multiset_permutations(atom)
    for i in [0, 1, 17, 200, 419]:
        assert perm_rank(atom, arrangements[i]) == i
        assert perm_unrank(atom, i) == arrangements[i]


def test_perm_roundtrip_small_atom():
    atom = (2, 1, 1, 0)
    arrangements = distinct_arrangements(atom)
    assert len(arrangements) == 12
    ranks = [perm_rank(atom, a) for a in arrangements]
    assert ranks == list(range(12))
    assert all(perm_unrank(atom, r) == a for r, a in zip(ranks, arrangements))


def test_perm_errors():
    with pytest.raises(ValueError):
        perm_unrank((2, 1, 1, 0), 12)
    with pytest.raises(ValueError):
        perm_rank((2, 1, 1, 0), (2, 2, 1, 0))


def test_codes_tiny_case_pinned():
    cb = LatticeCodebook(2, 1)
    pts = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    assert cb.encode(pts).tolist() == [0, 1, 2, 3]
    assert cb.decode([0, 1, 2, 3]).tolist() == pts.tolist()


def test_codec_bijection_exhaustive(cb8, points8):
    codes = cb8.encode(points8)
    assert sorted(int(c) for c in codes) == list(range(14112))
    assert np.array_equal(cb8.decode(codes), points8)
    all_codes = np.arange(14112, dtype=np.uint64)
    assert np.array_equal(cb8.encode(cb8.decode(all_codes)), all_codes)


def test_codec_sampled_24d_r79():
    cb = LatticeCodebook(24, 79)
    rng = np.random.default_rng(3)
    codes = rng.integers(0, 2**63, size=300, dtype=np.uint64) * np.uint64(2) + rng.integers(0, 2, 300, dtype=np.uint64)
    codes = codes[codes < np.uint64(cb.count)]
    pts = cb.decode(codes)
    assert np.all((pts ** 2).sum(axis=1) == 79)
    assert np.array_equal(cb.encode(pts), codes)
    z = cb.assign(rng.standard_normal((200, 24)))
    assert np.array_equal(cb.decode(cb.encode(z)), z)


def test_codec_errors(cb8):
    with pytest.raises(ValueError, match="not on the lattice"):
        cb8.encode([[1, 1, 0, 0, 0, 0, 0, 0]])
    with pytest.raises(ValueError, match="out of range"):
        cb8.decode([14112])


def test_assign_examples(cb8):
    z = cb8.assign(np.array([3, 1, 0, 0, 0, 0, 0, 0]) / math.sqrt(10))
    assert z.tolist() == [3, 1, 0, 0, 0, 0, 0, 0]
    z = cb8.assign([0.6, 0.8, 0, 0, 0, 0, 0, 0])
    assert z.tolist() == [1, 3, 0, 0, 0, 0, 0, 0]
    y = np.array([0, -1.0, 0, 0, 0, 0, 0, 0])
    z = cb8.assign(y)
    assert z[1] < 0
    sorted_abs = np.sort(np.abs(y))[::-1]
    z_sorted = cb8.assign(sorted_abs)
    assert z @ y == pytest.approx(z_sorted @ sorted_abs)


def test_assign_optimal_vs_bruteforce(cb8, points8):
    rng = np.random.default_rng(0)
    y = rng.standard_normal((100, 8))
    z = cb8.assign(y)
    best = (y @ points8.T).max(axis=1)
    assert np.allclose((z * y).sum(axis=1), best, rtol=0, atol=1e-12)


def test_zero_coordinate_gets_positive_sign():
    cb = LatticeCodebook(4, 4)
    # all-zero input: every atom ties, the first atom lands on coordinate 0
    assert cb.assign([0.0, 0.0, 0.0, 0.0]).tolist() == [2, 0, 0, 0]
    assert cb.assign([0.0, 0.0, -1.0, 0.0]).tolist() == [0, 0, -2, 0]
    assert cb.assign([0.5, -0.5, 0.5, -0.0]).tolist() == [1, -1, 1, 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=6, max_size=6),
       st.permutations(range(6)),
       st.lists(st.sampled_from([-1.0, 1.0]), min_size=6, max_size=6))
def test_assign_equivariance(values, perm, signs):
    cb = LatticeCodebook(6, 5)
    y = np.array(values)
    signs = np.array(signs)
    z = cb.assign(y)
    z2 = cb.assign((y * signs)[list(perm)])
    # same optimum value; the point itself can differ only under ties
    assert z2 @ (y * signs)[list(perm)] == pytest.approx(z @ y, abs=1e-9)
    if len(set(np.abs(y))) == 6 and np.all(y != 0):
        assert np.array_equal(z2, (z * signs.astype(int))[list(perm)])


def test_asymmetric_distance(cb8):
    z = np.array([[1, 3, 0, 0, 0, 0, 0, 0]])
    code = cb8.encode(z)
    q = z[0] / math.sqrt(10)
    assert lattice.asymmetric_distance(q, code, cb8)[0] == pytest.approx(0.0, abs=1e-12)
    q_orth = np.array([3, -1, 0, 0, 0, 0, 0, 0]) / math.sqrt(10)
    assert lattice.asymmetric_distance(q_orth, code, cb8)[0] == pytest.approx(2.0)

    rng = np.random.default_rng(1)
    codes = rng.integers(0, cb8.count, 50).astype(np.uint64)
    for _ in range(20):
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        direct = ((q - cb8.decode(codes) / cb8.r) ** 2).sum(axis=1)
        assert np.allclose(lattice.asymmetric_distance(q, codes, cb8), direct, atol=1e-6)


@pytest.mark.parametrize("d,r2", [(8, 10), (24, 79), (5, 3)])
def test_code_file_roundtrip(tmp_path, d, r2):
    cb = LatticeCodebook(d, r2)
    rng = np.random.default_rng(5)
    codes = cb.encode(cb.assign(rng.standard_normal((37, d))))
    path = tmp_path / "codes.splat"
    lattice.write_codes(path, codes, cb)
    back, cb2 = lattice.read_codes(path)
    assert (cb2.d, cb2.r2) == (d, r2)
    assert np.array_equal(back, codes)
    assert path.stat().st_size == 6 + 33 + (37 * cb.bits + 7) // 8


def test_code_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.splat"
    path.write_bytes(b"SPLAT2" + b"\0" * 40)
    with pytest.raises(ValueError, match="unsupported lattice code file version"):
        lattice.read_codes(path)
    path.write_bytes(b"SPBIN1" + b"\0" * 40)
    with pytest.raises(ValueError, match="not a lattice code file"):
        lattice.read_codes(path)
