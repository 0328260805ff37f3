import zlib

import numpy as np
import pytest

from deer import tensor as T
from deer.gradcheck import check_gradients
from deer.tensor import DimensionError, Tensor


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, k, bias, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, oc, i, j] = (patch * k[oc]).sum() + (bias[oc] if bias is not None else 0)
    return out


def scatter_tconv(x, k, stride):
    n, c, h, w = x.shape
    _, o, kh, kw = k.shape
    out = np.zeros((n, o, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(w):
                    out[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[b, ic, i, j] * k[ic]
    return out


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(5):
        n, k, m = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_formula_and_rows_sum_to_one():
    x = np.random.default_rng(1).normal(size=(4, 7)) * 5
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, e / e.sum(1, keepdims=True), atol=1e-14)
    big = T.softmax(Tensor(np.array([[1000.0, 1000.0]]))).data
    np.testing.assert_allclose(big, [[0.5, 0.5]])


def test_log_softmax_consistent():
    x = np.random.default_rng(2).normal(size=(3, 5))
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), T.softmax(Tensor(x)).data, atol=1e-14)


def test_group_norm_statistics():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(2, 8, 5, 4))
    y = T.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-5).data
    g = y.reshape(2, 4, -1)
    np.testing.assert_allclose(g.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(g.var(-1), 1, atol=1e-4)
    xr = x.reshape(2, 4, -1)
    ref = (xr - xr.mean(-1, keepdims=True)) / np.sqrt(xr.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(y, ref.reshape(x.shape), atol=1e-12)


def test_layer_norm_statistics():
    x = np.random.default_rng(4).normal(size=(3, 6)) * 4 + 1
    y = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(5)
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, naive_conv2d(x, k, b, stride, pad), atol=1e-11)


def test_conv_transpose_matches_scatter():
    rng = np.random.default_rng(6)
    for stride in (1, 2):
        x = rng.normal(size=(2, 3, 4, 5))
        k = rng.normal(size=(3, 2, 2, 2))
        got = T.conv_transpose2d(Tensor(x), Tensor(k), stride=stride).data
        np.testing.assert_allclose(got, scatter_tconv(x, k, stride), atol=1e-12)


def test_cross_entropy_ignore_index():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(5, 4))
    t = np.array([0, 3, 1, 1, 2])
    got = T.cross_entropy(Tensor(logits), t, ignore_index=1).item()
    keep = [0, 1, 4]
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert got == pytest.approx(-np.mean([lp[i, t[i]] for i in keep]), abs=1e-12)


def test_embedding_out_of_vocab():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((4, 2))), [0, 4])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.mul(x, 2.0))


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = T.tsum(T.add(T.mul(x, x), x))
    T.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad


def test_nan_from_finite_inputs_raises():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.log(T.sub(Tensor(np.array([0.0])), 1.0))


def test_precision_switch_changes_dtype():
    with T.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64


@pytest.mark.parametrize("name,fn,shapes", [
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    ("batched_matmul", lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    ("linear", lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    ("softmax", lambda x: T.softmax(x), [(3, 5)]),
    ("log_softmax", lambda x: T.log_softmax(x), [(3, 5)]),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("group_norm", lambda x, g, b: T.group_norm(x, 2, g, b), [(2, 4, 3, 3), (4,), (4,)]),
    ("conv2d", lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    ("conv_transpose2d", lambda x, k, b: T.conv_transpose2d(x, k, b, stride=2), [(1, 2, 3, 3), (2, 3, 2, 2), (3,)]),
    ("sigmoid_exp", lambda x: T.exp(T.sigmoid(x)), [(4,)]),
    ("reshape_transpose", lambda x: T.transpose(T.reshape(x, (3, 2, 2)), (2, 0, 1)), [(12,)]),
    ("concat_stack", lambda a, b: T.stack([T.concat([a, b], 0), T.concat([b, a], 0)], 1), [(2, 3), (2, 3)]),
    ("getitem", lambda x: x[1:, ::2], [(3, 4)]),
    ("take_rows", lambda x: T.take_rows(x, np.array([2, 0, 2, 1])), [(3, 2)]),
    ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)), [(3,), (3,)]),
])
def test_gradients(name, fn, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [rand(rng, *s) for s in shapes]
    report = check_gradients(fn, inputs, tol=1e-4)
    assert report.passed, (name, report.errors)


def test_cross_entropy_gradient():
    t = np.array([0, 2, 1])
    report = check_gradients(lambda x: T.cross_entropy(x, t), [rand(np.random.default_rng(8), 3, 4)])
    assert report.passed, report.errors


def test_bce_gradient():
    p = Tensor(np.random.default_rng(9).uniform(0.1, 0.9, size=6))
    tgt = np.array([0, 1, 1, 0, 1, 0], dtype=float)
    report = check_gradients(lambda x: T.binary_cross_entropy(x, tgt), [p])
    assert report.passed, report.errors


def test_gradcheck_detects_a_wrong_gradient():
    def bad(x):
        return T._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    report = check_gradients(bad, [Tensor(np.array([1.0, 2.0]))])
    assert not report.passed
