import io

import numpy as np
import pytest

from dyngate import gates as G
from dyngate import tensor as T
from dyngate.errors import DimensionError, ValidationError
from dyngate.gradcheck import gradcheck, numerical_grad
from dyngate.tensor import Tensor


def head(seed=0, s=2, d=3, channels=5, grid=(2, 2), bias=0.0):
    return G.GateHead.create(s * d, channels, grid, np.random.default_rng(seed), bias=bias)


def test_zero_fused_zero_logits():
    c, s = G.gate_logits(Tensor(np.zeros((2, 3))), head())
    assert np.array_equal(c.data, np.zeros(5))
    assert np.array_equal(s.data, np.zeros((2, 2)))


def test_bias_only_head():
    h = G.GateHead.create(6, 5, (2, 2), rng=None, bias=0.3)
    c, s = G.gate_logits(Tensor(np.random.default_rng(0).normal(size=(4, 2, 3))), h)
    assert np.array_equal(c.data, np.full((4, 5), 0.3))
    assert np.array_equal(s.data, np.full((4, 2, 2), 0.3))


def test_gate_logits_gradcheck():
    rng = np.random.default_rng(1)
    h = head(1)
    fused = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    wc, ws = rng.normal(size=(2, 5)), rng.normal(size=(2, 2, 2))

    def f():
        c, s = G.gate_logits(fused, h)
        return T.tsum(c * wc) + T.tsum(s * ws)

    assert gradcheck(f, [fused, *h.tensors().values()]) <= 1e-5


def test_gate_logits_dimension_error():
    with pytest.raises(DimensionError):
        G.gate_logits(Tensor(np.zeros((2, 4))), head())


def test_binarize_examples():
    logits = np.log(np.array([0.7, 0.3]) / (1 - np.array([0.7, 0.3])))
    assert np.array_equal(G.binarize(logits, 0.5), [1.0, 0.0])
    assert np.array_equal(G.binarize(np.array([0.0]), 0.5), [1.0])  # sigmoid(0) == 0.5 exactly
    m = G.GateMask(G.CHANNEL, G.binarize(np.array([-3.0, -0.1, -8.0]), 0.5))
    assert np.array_equal(m.values, np.zeros(3)) and m.density == 0.0


def test_binarize_threshold_domain():
    with pytest.raises(ValidationError):
        G.binarize(np.zeros(2), 1.0)


def test_gumbel_forward_is_binary():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(scale=5.0, size=(50, 7)))
    hard, soft = G.gumbel_gate(logits, 1.0, rng)
    assert set(np.unique(hard.data)) <= {0.0, 1.0}
    assert np.array_equal(hard.data, (soft.data >= 0.5).astype(float))
    assert np.all((soft.data >= 0) & (soft.data <= 1))


def test_gumbel_zero_logit_is_fair_coin():
    hard, _ = G.gumbel_gate(Tensor(np.zeros(100_000)), 1.0, np.random.default_rng(123))
    assert abs(hard.data.mean() - 0.5) <= 0.01


def test_gumbel_large_logit_nearly_always_on():
    hard, _ = G.gumbel_gate(Tensor(np.full(100_000, 10.0)), 1.0, np.random.default_rng(7))
    assert hard.data.mean() >= 0.999


def test_gumbel_needs_positive_tau_and_rng():
    with pytest.raises(ValidationError):
        G.gumbel_gate(Tensor(np.zeros(2)), 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        G.gumbel_gate(Tensor(np.zeros(2)))


def test_straight_through_gradient_is_soft_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=8), requires_grad=True)
    noise = G.logistic_noise(x.shape, rng)
    w = rng.normal(size=8)
    hard, _ = G.gumbel_gate(x, 0.7, noise=noise)
    T.tsum(hard * w).backward()
    soft_fd = numerical_grad(lambda: T.tsum(G.gumbel_gate(x, 0.7, noise=noise)[1] * w), x)
    assert np.allclose(x.grad, soft_fd, rtol=1e-6, atol=1e-9)
    # and the relaxed path itself passes gradcheck
    assert gradcheck(lambda: T.tsum(G.gumbel_gate(x, 0.7, noise=noise, relaxed=True)[0] * w), [x]) <= 1e-6


def test_eval_binarize_is_deterministic():
    logits = np.random.default_rng(0).normal(size=(3, 4))
    assert G.binarize(logits).tobytes() == G.binarize(logits).tobytes()


def test_mask_for_stage_examples():
    up = G.mask_for_stage(np.array([[1.0, 0.0], [0.0, 1.0]]), (4, 4)).data
    assert np.array_equal(up, np.kron(np.eye(2), np.ones((2, 2))))
    assert up.mean() == 0.5
    assert np.array_equal(G.mask_for_stage(np.ones((2, 2)), (6, 6)).data, np.ones((6, 6)))
    with pytest.raises(DimensionError):
        G.mask_for_stage(np.ones((2, 2)), (5, 4))


@pytest.mark.parametrize("seed", range(10))
def test_mask_for_stage_density_exact(seed):
    rng = np.random.default_rng(seed)
    base = (rng.random((3, 4, 4)) < 0.4).astype(float)
    up = G.mask_for_stage(base, (16, 32)).data
    assert up.mean() == base.mean()
    for i in range(3):
        assert up[i].mean() == base[i].mean()


def test_mask_density_tracks_values():
    m = G.GateMask(G.SPATIAL, np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert m.density == 0.75
    m.values[0, 1] = 1.0
    assert m.density == 1.0


def test_mask_dump_roundtrip():
    buf = io.StringIO()
    masks = [("block1", G.GateMask(G.CHANNEL, np.array([1.0, 0.0, 1.0, 1.0]))),
             ("block1", G.GateMask(G.SPATIAL, np.array([[1.0, 0.0], [0.0, 0.0]])))]
    G.write_mask_dump(buf, masks)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "block1\tchannel\t0.750000\t1 0 1 1"
    buf.seek(0)
    parsed = G.read_mask_dump(buf)
    assert parsed[1][1] == "spatial" and parsed[1][2] == 0.25
