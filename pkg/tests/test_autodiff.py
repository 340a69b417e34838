import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_fd
from qvrp import autodiff as ad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def grad_of(fn, x):
    t = ad.tensor(x, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


def test_matmul_identity_and_hand_sum():
    x = ad.tensor([[1.0], [2.0], [3.0]])
    assert torch.equal(ad.matmul(ad.tensor(np.eye(3)), x), x)
    out = ad.matmul(ad.tensor([[1, 2], [3, 4]]), ad.tensor([[1], [1]]))
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    ga = grad_of(lambda t: ad.matmul(t, ad.tensor(b)).sum(), a)
    fd = central_fd(lambda v: float((v @ b).sum()), a)
    assert rel_err(ga, fd) < 1e-6
    gb = grad_of(lambda t: ad.matmul(ad.tensor(a), t).sum(), b)
    assert rel_err(gb, central_fd(lambda v: float((a @ v).sum()), b)) < 1e-6


def test_softmax_closed_forms():
    assert np.allclose(ad.softmax_rows(ad.tensor([0.0, 0.0, 0.0])).numpy(), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(ad.softmax_rows(ad.tensor([math.log(2), 0.0])).numpy(), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_masking():
    u = ad.tensor([[1.0, 2.0, 3.0]])
    mask = ad.tensor([[0.0, ad.MASK_SENTINEL, 0.0]])
    p = ad.softmax_rows(u, mask).numpy()[0]
    assert p[1] == 0.0
    assert np.isclose(p[0] + p[2], 1.0, atol=1e-12)
    with pytest.raises(ad.InfeasibleRowError):
        ad.softmax_rows(u, ad.tensor([[ad.MASK_SENTINEL] * 3]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(u):
    p = ad.softmax_rows(ad.tensor(u)).numpy()
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-12)


def test_softmax_jacobian_matches_fd():
    rng = np.random.default_rng(1)
    u = rng.normal(size=6)
    w = rng.normal(size=6)
    g = grad_of(lambda t: (ad.softmax_rows(t) * ad.tensor(w)).sum(), u)
    fd = central_fd(lambda v: float(np.exp(v) @ w / np.exp(v).sum()), u)
    assert rel_err(g, fd) < 1e-5


def test_batch_norm_eval_constant_is_zero():
    c = 3.5
    st_ = ad.BatchNormState(torch.full((4,), c, dtype=ad.DTYPE), torch.ones(4, dtype=ad.DTYPE))
    out = ad.batch_norm(torch.full((2, 3, 4), c, dtype=ad.DTYPE), st_, training=False)
    assert torch.all(out == 0)


def test_batch_norm_symmetric_pair():
    st_ = ad.BatchNormState.fresh(3)
    x = ad.tensor([[-1.0] * 3, [1.0] * 3])
    out = ad.batch_norm(x, st_, training=True).numpy()
    assert np.allclose(out, x.numpy(), atol=1e-5)


def test_batch_norm_running_stats_update():
    st_ = ad.BatchNormState.fresh(2)
    x = np.array([[0.0, 1.0], [2.0, 5.0], [4.0, 9.0]])
    ad.batch_norm(ad.tensor(x), st_, training=True)
    m = x.mean(axis=0)
    v = x.var(axis=0, ddof=1)
    assert np.allclose(st_.mean.numpy(), 0.1 * m)
    assert np.allclose(st_.var.numpy(), 0.9 + 0.1 * v)


def test_batch_norm_feature_mismatch():
    with pytest.raises(ValueError):
        ad.batch_norm(ad.tensor(np.ones((2, 3))), ad.BatchNormState.fresh(4), training=True)


def test_batch_norm_gradient_matches_fd():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3, 2))
    w = rng.normal(size=(4, 3, 2))

    def f_np(v):
        flat = v.reshape(-1, 2)
        out = (v - flat.mean(0)) / np.sqrt(flat.var(0) + ad.BN_EPS)
        return float((out * w).sum())

    g = grad_of(lambda t: (ad.batch_norm(t, ad.BatchNormState.fresh(2), True) * ad.tensor(w)).sum(), x)
    assert rel_err(g, central_fd(f_np, x)) < 1e-4


def test_relu_dropout_primitives():
    assert ad.relu(ad.tensor([-1.0, 2.0])).tolist() == [0.0, 2.0]
    x = ad.tensor(np.arange(6.0))
    assert torch.equal(ad.dropout(x, 0.0, training=True), x)
    assert torch.equal(ad.dropout(x, 0.7, training=False), x)
    y = ad.dropout(ad.tensor(np.ones(10000)), 0.5, training=True, generator=torch.Generator().manual_seed(0))
    assert set(np.unique(y.numpy())) <= {0.0, 2.0}
    assert abs(float(y.mean()) - 1.0) < 0.05


def test_concat_gradient_split():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    w = rng.normal(size=(2, 5))
    ta, tb = ad.tensor(a, True), ad.tensor(b, True)
    (ad.concat([ta, tb]) * ad.tensor(w)).sum().backward()
    fd_a = central_fd(lambda v: float((np.concatenate([v, b], -1) * w).sum()), a)
    fd_b = central_fd(lambda v: float((np.concatenate([a, v], -1) * w).sum()), b)
    assert rel_err(ta.grad.numpy(), fd_a) < 1e-6
    assert rel_err(tb.grad.numpy(), fd_b) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 4))
    w = rng.normal(size=(3, 4))

    def f_t(t):
        h = ad.scale(ad.add(ad.matmul(t, ad.tensor(m)), t), 0.7)
        return (ad.softmax_rows(h) * ad.tensor(w)).sum() + ad.relu(h).sum() * 0.1

    def f_np(v):
        h = 0.7 * (v @ m + v)
        e = np.exp(h - h.max(-1, keepdims=True))
        return float((e / e.sum(-1, keepdims=True) * w).sum() + 0.1 * np.maximum(h, 0).sum())

    g = grad_of(f_t, x)
    assert rel_err(g, central_fd(f_np, x)) < 1e-4


def test_eval_forward_is_bit_identical():
    st_ = ad.BatchNormState(ad.tensor([0.3, -0.2]), ad.tensor([1.5, 0.7]))
    x = ad.tensor(np.random.default_rng(4).normal(size=(5, 2)))
    a = ad.softmax_rows(ad.batch_norm(x, st_, False)).numpy()
    b = ad.softmax_rows(ad.batch_norm(x, st_, False)).numpy()
    assert a.tobytes() == b.tobytes()
