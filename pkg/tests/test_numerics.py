import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmtl import numerics as nx
from gmtl.numerics import InputError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- conv1d_valid -----------------------------------------------------------

def test_conv_identity_filter():
    out = nx.conv1d_valid([[1.0], [2.0], [3.0]], [[1.0]], 0.0, "identity")
    np.testing.assert_array_equal(out.value, [1, 2, 3])


def test_conv_single_window_hand_sum():
    out = nx.conv1d_valid([[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [1.0, 1.0]], 0.0, "identity")
    np.testing.assert_array_equal(out.value, [2])


def test_conv_relu_clamps():
    np.testing.assert_array_equal(nx.conv1d_valid([[-5.0]], [[1.0]], 0.0, "relu").value, [0])


def test_conv_matches_loop_oracle(rng):
    x, w = rng.normal(size=(3, 9, 4)), rng.normal(size=(5, 3, 4))
    b = rng.normal(size=5)
    got = nx.conv1d_valid(x, w, b, "tanh").value
    want = np.empty((3, 7, 5))
    for n in range(3):
        for i in range(7):
            for f in range(5):
                want[n, i, f] = np.tanh(np.sum(x[n, i:i + 3] * w[f]) + b[f])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("x, w", [
    (np.zeros((2, 3)), np.zeros((3, 3))),   # n < h
    (np.zeros((4, 3)), np.zeros((2, 2))),   # d disagrees
])
def test_conv_rejects_bad_shapes(x, w):
    with pytest.raises(InputError):
        nx.conv1d_valid(x, w, 0.0)


def test_conv_rejects_unknown_activation():
    with pytest.raises(InputError):
        nx.conv1d_valid([[1.0]], [[1.0]], 0.0, "gelu")


# --- pooling ----------------------------------------------------------------

@pytest.mark.parametrize("c, expected", [([3, 1, 2], (3, 0)), ([1, 3, 3], (3, 1)), ([-2, -7], (-2, 0))])
def test_max_pool_global(c, expected):
    node, idx = nx.max_pool_global(np.array(c, dtype=float))
    assert (float(node.value), idx) == expected


def test_max_pool_empty():
    with pytest.raises(InputError):
        nx.max_pool_global(np.array([]))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 3)),
              elements=st.integers(-3, 3).map(float)))
def test_max_pool_routes_to_one_position(x):
    leaf = nx.leaf(x)
    pooled, idx = nx.max_pool(leaf, axis=1)
    nx.backward(nx.sum_all(pooled))
    nonzero = (leaf.grad != 0).sum(axis=1)
    assert np.all(nonzero == 1)
    # first occurrence on ties
    assert np.array_equal(idx, np.argmax(x, axis=1))


# --- dense ------------------------------------------------------------------

def test_dense_examples():
    np.testing.assert_array_equal(nx.dense([1.0, 0.0], np.eye(2), [0.0, 0.0]).value, [1, 0])
    np.testing.assert_array_equal(nx.dense([1.0, 1.0], [[2.0], [3.0]], [1.0]).value, [6])
    np.testing.assert_array_equal(nx.dense([0.0, 0.0], np.ones((2, 2)), [5.0, -5.0]).value, [5, -5])


def test_dense_shape_mismatch():
    with pytest.raises(InputError):
        nx.dense([1.0, 2.0, 3.0], np.ones((2, 2)), [0.0, 0.0])
    with pytest.raises(InputError):
        nx.dense([1.0, 2.0], np.ones((2, 2)), [0.0, 0.0, 0.0])


# --- activations / softmax ---------------------------------------------------

def test_activation_examples():
    assert float(nx.sigmoid(0.0).value) == 0.5
    np.testing.assert_array_equal(nx.softmax([0.0, 0.0]).value, [0.5, 0.5])
    np.testing.assert_allclose(nx.softmax([1.0, 2.0]).value, [0.26894, 0.73106], atol=1e-5)
    np.testing.assert_array_equal(nx.relu([-1.0, 0.0, 2.0]).value, [0, 0, 2])


def test_softmax_overflow_safe():
    out = nx.softmax([1000.0, 1000.0, -1000.0]).value
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_sigmoid_extremes_finite():
    v = nx.sigmoid(np.array([-800.0, 800.0])).value
    assert np.all(np.isfinite(v)) and v[0] == 0.0 and v[1] == 1.0


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), finite,
       st.sampled_from([0, 1, -1]))
def test_softmax_sums_to_one_and_shift_invariant(x, shift, axis):
    s = nx.softmax(x, axis=axis).value
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)
    assert np.all((s >= 0) & (s <= 1))
    shifted = nx.softmax(x + shift, axis=axis).value
    np.testing.assert_allclose(shifted, s, atol=1e-12)
    assert np.array_equal(np.argmax(shifted, axis=axis), np.argmax(s, axis=axis))


# --- backward ---------------------------------------------------------------

def test_backward_product_rule():
    x, y = nx.leaf(2.0), nx.leaf(3.0)
    nx.backward(x * y)
    assert (float(x.grad), float(y.grad)) == (3.0, 2.0)


def test_backward_sigmoid_at_zero():
    x = nx.leaf(0.0)
    nx.backward(nx.sigmoid(x))
    assert float(x.grad) == 0.25


def test_backward_accumulates():
    x = nx.leaf(2.0)
    out = x * x
    nx.backward(out)
    nx.backward(out)
    assert float(x.grad) == 8.0


def test_backward_shared_subgraph_counted_once():
    x = nx.leaf(1.5)
    y = nx.tanh(x)
    nx.backward(nx.add(y, y))
    assert float(x.grad) == pytest.approx(2 * (1 - np.tanh(1.5) ** 2), abs=1e-15)


def test_backward_rejects_vector_root():
    with pytest.raises(InputError):
        nx.backward(nx.leaf([1.0, 2.0]))


# --- grad_check ---------------------------------------------------------------

def test_grad_check_square():
    assert nx.grad_check(lambda v: nx.mul(v[0], v[0]), [np.array(3.0)]) < 1e-6


def test_grad_check_constant():
    assert nx.grad_check(lambda v: nx.add(nx.sum_all(nx.mul(v[0], 0.0)), 4.0), [np.array([1.0, 2.0])]) == 0.0


def _composites(rng):
    """Random small-shape scalar functions covering every primitive."""
    n, d, h, f, o = (int(rng.integers(lo, hi)) for lo, hi in ((4, 8), (1, 4), (1, 4), (1, 4), (1, 4)))
    act = str(rng.choice(["tanh", "identity", "relu"]))
    x, w, b = rng.normal(size=(2, n, d)), rng.normal(size=(f, h, d)), rng.normal(size=f)
    wd, bd = rng.normal(size=(f, o)), rng.normal(size=o)

    def model(v):
        c = nx.conv1d_valid(v[0], v[1], v[2], act)
        p, _ = nx.max_pool(c, axis=1)
        z = nx.dense(p, v[3], v[4])
        s = nx.softmax(z, axis=-1)
        g = nx.mul(nx.sigmoid(z), s)
        lse = nx.logsumexp(nx.concat([g, nx.tanh(z)], axis=-1), axis=-1)
        return nx.add(nx.mean_all(lse), nx.sum_all(nx.log_sigmoid(nx.sub(z, 0.3))))

    return model, [x, w, b, wd, bd]


def test_grad_check_random_composites():
    rng = np.random.default_rng(2024)
    errors = []
    for _ in range(25):
        fn, point = _composites(rng)
        errors.append(nx.grad_check(fn, point))
    assert max(errors) < 1e-4


def test_grad_check_matmul_and_gather(rng):
    table, ids = rng.normal(size=(6, 3)), np.array([[0, 5, 5], [2, 1, 0]])

    def fn(v):
        e = nx.gather_rows(v[0], ids)
        s = nx.matmul(e, nx.swapaxes(e, -1, -2))
        flat = nx.reshape(s, (2, 9))
        picked = nx.reshape(nx.take_last(flat, np.array([1, 4])), (2, 1))
        return nx.sum_all(nx.mul(flat, picked))

    assert nx.grad_check(fn, [table]) < 1e-4


# --- determinism / rng -------------------------------------------------------

def test_determinism_bitwise():
    def run():
        rng = nx.make_rng(9, "w")
        fn, point = _composites(rng)
        leaves = [nx.leaf(p) for p in point]
        out = fn(leaves)
        nx.backward(out)
        return out.value.copy(), [lf.grad.copy() for lf in leaves]

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


def test_make_rng_streams():
    a = nx.make_rng(1, "init", "p").random(4)
    assert np.array_equal(a, nx.make_rng(1, "init", "p").random(4))
    assert not np.array_equal(a, nx.make_rng(1, "init", "e").random(4))
    assert not np.array_equal(a, nx.make_rng(2, "init", "p").random(4))
    with pytest.raises(InputError):
        nx.make_rng(-1)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_forward_ops_finite(x):
    for node in (nx.sigmoid(x), nx.softmax(x), nx.relu(x), nx.tanh(x), nx.log_sigmoid(x), nx.logsumexp(x)):
        assert np.all(np.isfinite(node.value))
