import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficcnn.tensor import (Rng, ShapeError, map_elementwise, matmul, reduce_max, reduce_sum,
                               reshape, rng_normal, tensor_full)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_full():
    assert np.array_equal(tensor_full([2, 2], 0.0), np.zeros((2, 2)))
    s = tensor_full([], 3.5)
    assert s.shape == () and s.size == 1 and float(s) == 3.5
    ones = tensor_full([224, 224, 3], 1.0)
    assert ones.size == 150528 and np.all(ones == 1)


@pytest.mark.parametrize("dims", [[0], [2, -1], [1, 1, 1, 1, 1]])
def test_full_rejects_bad_dims(dims):
    with pytest.raises(ShapeError):
        tensor_full(dims, 1.0)


def test_matmul_small_cases():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
        assert np.max(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c)))) < 1e-9


def test_reshape_and_reduce():
    t = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(reshape(reshape(t, [3, 2]), [2, 3]), t)
    assert float(reduce_sum(np.ones((4, 4)))) == 16
    assert reduce_max(np.array([[1, 5], [7, 2]]), axis=0).tolist() == [7, 5]
    with pytest.raises(ShapeError):
        reshape(t, [4, 2])


def test_reshape_transfer_width_preserves_order():
    t = np.arange(7 * 7 * 512, dtype=np.float32).reshape(7, 7, 512)
    flat = reshape(t, [25088])
    assert flat.shape == (25088,)
    assert np.array_equal(flat, np.arange(25088, dtype=np.float32))
    assert flat[512 * 7 + 3] == t[1, 0, 3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.randoms())
def test_reshape_roundtrip_property(dims, r):
    t = np.arange(int(np.prod(dims)), dtype=np.float64).reshape(dims)
    flat = list(dims)
    r.shuffle(flat)
    assert np.array_equal(reshape(reshape(t, flat), dims), t)


def test_map_elementwise():
    x = np.array([-1.0, 0.0, 2.0])
    assert map_elementwise(x, "relu").tolist() == [0, 0, 2]
    assert np.all(np.isfinite(map_elementwise(np.array([-1e4, 1e4]), "tanh")))
    with pytest.raises(ValueError):
        map_elementwise(x, "nope")


def test_rng_normal_degenerate_and_deterministic():
    assert np.all(rng_normal(Rng(3), [4, 4], 2.5, 0.0) == 2.5)
    a = rng_normal(Rng(42), [3, 5])
    b = rng_normal(Rng(42), [3, 5])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rng_normal(Rng(43), [3, 5]))


def test_rng_normal_mean_within_bound():
    z = rng_normal(Rng(42), [100000], 0.0, 1.0, dtype=np.float64)
    assert abs(z.mean()) < 0.016


def test_child_streams_reproducible_and_disjoint():
    root = Rng(5)
    a1 = root.child(0).generator.integers(0, 2**63, 100000, dtype=np.int64)
    a2 = Rng(5).child(0).generator.integers(0, 2**63, 100000, dtype=np.int64)
    b = root.child(1).generator.integers(0, 2**63, 100000, dtype=np.int64)
    assert np.array_equal(a1, a2)
    # 63-bit draws from overlapping streams would share values; independent ones essentially never do
    assert len(np.intersect1d(a1, b)) == 0


def test_child_independent_of_parent_draws():
    r = Rng(9)
    before = r.child(2).normal([4])
    r.normal([100])
    assert np.array_equal(before, r.child(2).normal([4]))
