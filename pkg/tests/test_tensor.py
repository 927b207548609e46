import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyngate import functional as F
from dyngate import tensor as T
from dyngate.errors import DegenerateBatchError, DimensionError, LabelError, OracleError, FormatError
from dyngate.gradcheck import gradcheck, numerical_grad
from dyngate.tensor import Tensor


def weighted_sum(out, rng):
    """Scalarise an op output with fixed random weights so every entry matters."""
    w = rng.normal(size=out.shape)
    return T.tsum(out * w)


def check(op, shapes, seed=0, tol=1e-6, positive=False):
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    if positive:
        for x in xs:
            x.data = np.abs(x.data) + 0.5
    w = rng.normal(size=op(*xs).shape)
    err = gradcheck(lambda: T.tsum(op(*xs) * w), xs)
    assert err <= tol, err
    return err


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_computed():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_gradcheck():
    check(T.matmul, [(3, 4), (4, 2)], tol=1e-6)


def test_matmul_batched_gradcheck():
    check(T.matmul, [(2, 3, 4), (4, 2)], tol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0)


def test_softmax_closed_form():
    assert np.allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_gradcheck():
    check(lambda x: T.softmax(x, axis=1), [(2, 5)], tol=1e-6)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((2, 0))), axis=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 50.0))
def test_softmax_rows_sum_to_one(seed, r, c, spread):
    x = np.random.default_rng(seed).normal(scale=spread, size=(r, c))
    for axis in (0, 1):
        y = T.softmax(Tensor(x), axis=axis).data
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=axis), 1.0, rtol=0, atol=1e-9)


# ---------------------------------------------------------------- gru

def test_gru_zero_params_closed_form():
    p = F.GRUParams.create(2)
    h = Tensor([[2.0, -2.0]])
    x = Tensor([[0.3, 7.0]])
    assert np.array_equal(F.gru_cell(h, x, p).data, [[1.0, -1.0]])


def test_gru_zero_fixed_point():
    p = F.GRUParams.create(4, np.random.default_rng(1))
    z = Tensor(np.zeros((3, 4)))
    assert np.array_equal(F.gru_cell(z, z, p).data, np.zeros((3, 4)))


def test_gru_gradcheck_all_params():
    rng = np.random.default_rng(3)
    p = F.GRUParams.create(4, rng)
    for t in p.tensors().values():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    h = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    inputs = [h, x, *p.tensors().values()]
    assert gradcheck(lambda: T.tsum(F.gru_cell(h, x, p) * w), inputs) <= 1e-5


def test_gru_shape_mismatch():
    p = F.GRUParams.create(4)
    with pytest.raises(DimensionError):
        F.gru_cell(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), p)


# ---------------------------------------------------------------- conv

def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    assert np.array_equal(F.conv2d(x, Tensor(w), Tensor(np.zeros(3))).data, x.data)


def test_conv_ones_kernel_interior():
    v = 1.75
    out = F.conv2d(Tensor(np.full((1, 1, 5, 5), v)), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 2, 2] == pytest.approx(9 * v, abs=1e-14)
    assert out.data[0, 0, 0, 0] == pytest.approx(4 * v, abs=1e-14)


def test_conv_gradcheck():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    wt = rng.normal(size=(1, 3, 4, 4))
    assert gradcheck(lambda: T.tsum(F.conv2d(x, w, b) * wt), [x, w, b]) <= 1e-5


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 4, 5))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o])
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------- norm

def test_norm_standardized_passthrough():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = F.channel_norm(Tensor(x), F.NormParams.create(2), "train")
    assert np.allclose(out.data, x, rtol=0, atol=1e-6)


def test_norm_constant_channel_gives_shift():
    p = F.NormParams.create(1)
    p.shift.data[:] = 0.7
    out = F.channel_norm(Tensor(np.full((2, 1, 3, 3), 4.2)), p, "train")
    assert np.allclose(out.data, 0.7, rtol=0, atol=1e-12)


def test_norm_gradcheck_train():
    rng = np.random.default_rng(2)
    p = F.NormParams.create(3)
    p.scale.data = rng.normal(size=3)
    p.shift.data = rng.normal(size=3)
    x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    w = rng.normal(size=(2, 3, 2, 2))
    assert gradcheck(lambda: T.tsum(F.channel_norm(x, p, "train") * w), [p.scale, p.shift, x]) <= 1e-5


def test_norm_gradcheck_eval():
    rng = np.random.default_rng(2)
    p = F.NormParams.create(3)
    p.running_mean[:] = rng.normal(size=3)
    p.running_var[:] = rng.uniform(0.5, 2.0, size=3)
    x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    w = rng.normal(size=(2, 3, 2, 2))
    assert gradcheck(lambda: T.tsum(F.channel_norm(x, p, "eval") * w), [p.scale, p.shift, x]) <= 1e-6


def test_norm_running_stats_momentum():
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    p = F.NormParams.create(1)
    F.channel_norm(Tensor(x), p, "train")
    assert p.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert p.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        F.channel_norm(Tensor(np.ones((1, 2, 1, 1))), F.NormParams.create(2), "train")
    # eval mode is fine with a single value
    F.channel_norm(Tensor(np.ones((1, 2, 1, 1))), F.NormParams.create(2), "eval")


# ---------------------------------------------------------------- aux ops

def test_nearest_upsample_blocks():
    out = F.nearest_upsample(Tensor([[1.0, 0.0], [0.0, 1.0]]), 2).data
    expected = np.kron(np.eye(2), np.ones((2, 2)))
    assert np.array_equal(out, expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
def test_nearest_upsample_preserves_density(seed, h, w, f):
    m = (np.random.default_rng(seed).random((h, w)) < 0.5).astype(float)
    assert F.nearest_upsample(Tensor(m), f).data.mean() == m.mean()


def test_nearest_upsample_gradcheck():
    check(lambda m: F.nearest_upsample(m, 2), [(2, 3, 3)])


def test_cross_entropy_uniform_k7():
    assert T.cross_entropy(Tensor(np.zeros(7)), 3).item() == pytest.approx(math.log(7), abs=1e-12)
    assert math.log(7) == pytest.approx(1.945910, abs=1e-6)


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = np.array([0, 3, 1, 1, 2])
    assert gradcheck(lambda: T.cross_entropy(x, labels), [x]) <= 1e-6


def test_cross_entropy_bad_label():
    with pytest.raises(LabelError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_relu_gradcheck_away_from_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    t = Tensor(x, requires_grad=True)
    w = rng.normal(size=x.shape)
    assert gradcheck(lambda: T.tsum(T.relu(t) * w), [t]) <= 1e-6


@pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.exp, T.square])
def test_unary_gradcheck(op):
    check(op, [(3, 4)], tol=1e-6)


def test_log_gradcheck():
    check(T.log, [(3, 4)], tol=1e-6, positive=True)


def test_broadcast_mul_gradcheck():
    check(T.mul, [(2, 3, 4, 4), (2, 3, 1, 1)], tol=1e-6)
    check(T.add, [(2, 3, 4), (4,)], tol=1e-6)


def test_broadcast_conflict():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_pooling_gradcheck():
    check(F.avg_pool2, [(2, 2, 4, 4)])
    check(F.global_avg_pool, [(2, 3, 2, 2)])


def test_pointwise_conv_gradcheck():
    check(F.pointwise_conv, [(2, 3, 2, 2), (3, 5)])


def test_straight_through_forward_and_grad():
    s = Tensor([0.2, 0.5, 0.9], requires_grad=True)
    out = T.straight_through(s)
    assert np.array_equal(out.data, [0.0, 1.0, 1.0])
    T.tsum(out * Tensor([1.0, 2.0, 3.0])).backward()
    assert np.array_equal(s.grad, [1.0, 2.0, 3.0])


# ---------------------------------------------------------------- gradcheck oracle

def test_gradcheck_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    f = lambda: T.tsum(T.square(x))  # noqa: E731
    f().backward()
    assert np.array_equal(x.grad, [2.0, 4.0])
    assert np.allclose(numerical_grad(f, x), [2.0, 4.0], rtol=0, atol=1e-8)


def test_gradcheck_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    f = lambda: T.tsum(x * 0.0) + 3.0  # noqa: E731
    assert gradcheck(f, [x]) == 0.0
    assert np.array_equal(x.grad, [0.0, 0.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_nonfinite():
    x = Tensor([-1.0], requires_grad=True)
    with pytest.raises(OracleError):
        gradcheck(lambda: T.tsum(T.log(x)), [x])


def test_gradcheck_detects_wrong_rule(monkeypatch):
    monkeypatch.setattr(T, "_sigmoid_backward", lambda y, g: g * y)
    x = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
    assert gradcheck(lambda: T.tsum(T.sigmoid(x)), [x]) > 1e-2


# ---------------------------------------------------------------- tape

def test_shared_subexpression_accumulates():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=4), requires_grad=True)

    def g(t):
        return T.tsum(T.tanh(t) * T.sigmoid(t))

    g(x).backward()
    single = x.grad.copy()
    x.grad = None
    y = g(x)
    (y + y).backward()
    assert np.array_equal(x.grad, 2.0 * single)


def test_every_reachable_leaf_gets_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    out = T.tsum(a * 0.0 + T.relu(-b * 5.0))  # b's grad is zero through relu
    out.backward()
    assert a.grad is not None and b.grad is not None
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = a * 2.0
    assert not out.requires_grad


def test_tensor_serialization_roundtrip():
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(2, 3, 4))
    buf = io.BytesIO()
    T.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == (3).to_bytes(4, "little")
    buf.seek(0)
    assert np.array_equal(T.read_tensor(buf), arr)
    with pytest.raises(FormatError, match="byte"):
        T.read_tensor(io.BytesIO(raw[:-5]))


@pytest.mark.parametrize("seed", range(20))
def test_randomized_op_battery(seed):
    """All differentiable ops against finite differences on 20 seeds."""
    rng = np.random.default_rng(1000 + seed)
    s = lambda *d: tuple(int(v) for v in d)  # noqa: E731
    m, k, n = rng.integers(1, 5, size=3)
    check(T.matmul, [s(m, k), s(k, n)], seed, tol=1e-4)
    check(lambda x: T.softmax(x, axis=-1), [s(m, k + 1)], seed, tol=1e-4)
    check(F.conv2d, [s(1, k, 3, 3), s(n, k, 3, 3)], seed, tol=1e-4)
    check(T.sigmoid, [s(m, k)], seed, tol=1e-4)
    check(T.tanh, [s(m, k)], seed, tol=1e-4)
