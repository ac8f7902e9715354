import math

import numpy as np
import pytest

from catalyzer.losses import combined, koleo, triplet

from oracles import central_difference, rel_error


def unit_rows(n, d, seed):
    y = np.random.default_rng(seed).standard_normal((n, d))
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def test_koleo_closed_forms():
    assert koleo(np.array([[1.0, 0, 0], [-1.0, 0, 0]])).loss == pytest.approx(-math.log(2), abs=1e-6)
    angles = 2 * np.pi * np.arange(3) / 3
    tri = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    assert koleo(tri).loss == pytest.approx(-math.log(math.sqrt(3)), abs=1e-6)


def test_koleo_duplicate_rows_clamped():
    y = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    v = koleo(y)
    assert v.rho[0] == v.rho[1] == 1e-8
    assert np.isfinite(v.loss) and np.all(np.isfinite(v.grad))


def test_koleo_needs_two_rows():
    with pytest.raises(ValueError):
        koleo(np.ones((1, 3)))


def test_koleo_neighbors():
    v = koleo(np.array([[0.0], [1.0], [3.0]]))
    assert v.nn_index.tolist() == [1, 0, 1]
    assert v.rho.tolist() == [1.0, 1.0, 2.0]


@pytest.mark.parametrize("d", [4, 8])
def test_koleo_gradient(d):
    y = unit_rows(16, d, d)
    num = central_difference(lambda: koleo(y).loss, y)
    assert rel_error(koleo(y).grad, num) < 1e-4


def test_koleo_orthogonal_invariance():
    y = unit_rows(50, 6, 0)
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 6)))
    assert koleo(y @ q).loss == pytest.approx(koleo(y).loss, abs=1e-6)


def test_koleo_moving_neighbor_away_does_not_increase_loss():
    y = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 1.0], [-1.0, 1.0]])
    base = koleo(y).loss
    y2 = y.copy()
    y2[1, 0] = 0.2  # still 0's nearest neighbor
    assert koleo(y2).nn_index[0] == 1
    assert koleo(y2).loss <= base


def test_triplet_cases():
    a, p, n = np.array([1.0, 0]), np.array([0.0, 1]), np.array([-1.0, 0])
    assert triplet(a, p, n).loss == 0.0
    t = triplet(np.array([1.0, 0]), np.array([-1.0, 0]), np.array([0.0, 1]))
    assert t.loss == 2 - math.sqrt(2)
    t = triplet(a, a, n)
    assert t.loss == 0.0
    assert np.all(t.grad_anchor == 0)


def test_triplet_gradient_zero_when_inactive_and_at_kink():
    a = unit_rows(10, 4, 1)
    t = triplet(a, a, -a)
    assert np.all(t.grad_anchor == 0) and np.all(t.grad_negative == 0)
    # exact kink: |a - p| == |a - n|
    x = np.array([[1.0, 0.0]])
    t = triplet(x, np.array([[0.0, 1.0]]), np.array([[0.0, -1.0]]))
    assert t.per_triplet[0] == 0 and np.all(t.grad_anchor == 0)


def test_triplet_gradient():
    a, p, n = unit_rows(16, 4, 2), unit_rows(16, 4, 3), unit_rows(16, 4, 4)
    t = triplet(a, p, n)
    assert 0 < (t.per_triplet > 0).sum() < 16
    for arr, g in ((a, t.grad_anchor), (p, t.grad_positive), (n, t.grad_negative)):
        num = central_difference(lambda: triplet(a, p, n).loss, arr)
        assert rel_error(g, num) < 1e-4


def _triplets(n, seed):
    rng = np.random.default_rng(seed)
    ia = np.arange(n)
    return ia, rng.integers(0, n, n), rng.integers(0, n, n)


def test_combined_degenerate_cases():
    y = unit_rows(16, 4, 5)
    trip = _triplets(16, 0)
    c0 = combined(y, trip, 0.0)
    assert c0.loss == triplet(y[trip[0]], y[trip[1]], y[trip[2]]).loss
    ia = np.arange(16)
    c1 = combined(y, (ia, ia, (ia + 1) % 16), 1.0)
    assert c1.rank == 0.0
    assert c1.loss == koleo(y).loss


@pytest.mark.parametrize("d", [4, 8])
@pytest.mark.parametrize("lam", [0.0, 0.01, 1.0])
def test_combined_gradient_and_linearity(d, lam):
    y = unit_rows(16, d, 6)
    trip = _triplets(16, 1)
    c = combined(y, trip, lam)
    num = central_difference(lambda: combined(y, trip, lam).loss, y)
    assert rel_error(c.grad, num) < 1e-4
    rank_only = combined(y, trip, 0.0).grad
    assert np.allclose(c.grad, rank_only + lam * koleo(y).grad, atol=1e-12)


def test_combined_koleo_subset_and_validation():
    y = unit_rows(12, 4, 7)
    rows = np.arange(4)
    c = combined(y, _triplets(12, 2), 0.5, koleo_rows=rows)
    assert c.koleo == koleo(y[:4]).loss
    with pytest.raises(ValueError):
        combined(y, _triplets(12, 2), -1.0)
