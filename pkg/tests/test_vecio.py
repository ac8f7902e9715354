import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from catalyzer.vecio import (FormatError, NormalizationError, brute_force_knn, l2_normalize,
                             read_vecs, topk_smallest, write_vecs)

from oracles import knn_reference


def _record(d, values, fmt="f"):
    return struct.pack(f"<i{len(values)}{fmt}", d, *values)


def test_read_fvecs_records(tmp_path):
    p = tmp_path / "a.fvecs"
    p.write_bytes(_record(2, [1.0, 2.0]) + _record(2, [3.0, 4.0]))
    x = read_vecs(p)
    assert x.dtype == np.float32
    assert x.tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_read_empty_file(tmp_path):
    p = tmp_path / "e.fvecs"
    p.write_bytes(b"")
    assert read_vecs(p).shape == (0, 0)


def test_inconsistent_dimension_reports_offset(tmp_path):
    p = tmp_path / "bad.fvecs"
    p.write_bytes(_record(2, [1.0, 2.0]) + _record(3, [3.0, 4.0, 5.0]))
    with pytest.raises(FormatError, match="byte offset 12 declares d=3"):
        read_vecs(p)


def test_truncated_record_reports_offset(tmp_path):
    p = tmp_path / "t.fvecs"
    p.write_bytes(_record(2, [1.0, 2.0]) + _record(2, [3.0, 4.0])[:-2])
    with pytest.raises(FormatError, match="truncated record at byte offset 12"):
        read_vecs(p)


def test_bvecs_widened_without_scaling(tmp_path):
    p = tmp_path / "b.bvecs"
    p.write_bytes(struct.pack("<i3B", 3, 0, 7, 255) + struct.pack("<i3B", 3, 1, 2, 3))
    x = read_vecs(p)
    assert x.dtype == np.float32
    assert x.tolist() == [[0, 7, 255], [1, 2, 3]]


def test_ivecs_reads_integers(tmp_path):
    p = tmp_path / "g.ivecs"
    p.write_bytes(_record(2, [5, -1], "i"))
    x = read_vecs(p)
    assert x.dtype == np.int32 and x.tolist() == [[5, -1]]


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_fvecs_roundtrip_bit_identical(tmp_path_factory, x):
    p = tmp_path_factory.mktemp("rt") / "x.fvecs"
    write_vecs(p, x)
    assert read_vecs(p).tobytes() == x.tobytes()


def test_ivecs_roundtrip(tmp_path):
    x = np.random.default_rng(0).integers(-2**31, 2**31 - 1, (13, 7)).astype(np.int32)
    write_vecs(tmp_path / "x.ivecs", x)
    assert np.array_equal(read_vecs(tmp_path / "x.ivecs"), x)


def test_knn_examples():
    base = np.array([[0, 0], [1, 0], [3, 0]], dtype=np.float32)
    assert brute_force_knn(base, np.array([[0.9, 0]]), 2).tolist() == [[1, 0]]
    assert brute_force_knn(base, base[2:], 1).tolist() == [[2]]
    tie = np.array([[5, 5], [1, 0], [-1, 0]], dtype=np.float32)
    assert brute_force_knn(tie, np.array([[0.0, 0.0]]), 1).tolist() == [[1]]
    with pytest.raises(ValueError):
        brute_force_knn(base, base, 4)


@pytest.mark.parametrize("n,d,seed", [(50, 3, 0), (400, 8, 1), (1000, 16, 2)])
def test_knn_matches_reference(n, d, seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n, d)).astype(np.float32)
    queries = rng.standard_normal((15, d)).astype(np.float32)
    for k in (1, 5, 10):
        assert np.array_equal(brute_force_knn(base, queries, k), knn_reference(base, queries, k))


def test_knn_exclude_self_keeps_duplicates():
    x = np.array([[0.0], [1.0], [0.0], [3.0]])
    ids = brute_force_knn(x, x, 1, exclude_self=True)
    assert ids.ravel().tolist() == [2, 0, 0, 1]


def test_l2_normalize():
    assert np.allclose(l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    assert np.array_equal(l2_normalize(np.array([[1.0, 0.0]])), [[1.0, 0.0]])
    with pytest.raises(NormalizationError, match="row 1"):
        l2_normalize(np.array([[1.0, 2.0], [0.0, 0.0]]))


def test_l2_normalize_idempotent():
    x = np.random.default_rng(0).standard_normal((200, 12)).astype(np.float32)
    once = l2_normalize(x)
    assert np.allclose(np.linalg.norm(once, axis=1), 1, atol=1e-6)
    assert np.allclose(l2_normalize(once), once, atol=1e-6)


def test_topk_nan_ranks_last():
    d = np.array([[0.3, np.nan, 0.1, 0.2]])
    assert topk_smallest(d, 4).tolist() == [[2, 3, 0, 1]]
    assert topk_smallest(d, 2).tolist() == [[2, 3]]
