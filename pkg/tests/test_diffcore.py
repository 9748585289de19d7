import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kolmo.diffcore import (Mlp, ParamVector, Tape, TapeError, adam_step, backward, mlp_forward, read_checkpoint,
                            sigmoid, softplus, write_checkpoint)


@given(st.floats(-700, 700))
def test_softplus_is_stable_and_positive(x):
    v = softplus(np.array([x]))[0]
    assert np.isfinite(v) and v >= 0
    assert v >= x


def test_sigmoid_is_softplus_derivative():
    x = np.linspace(-30, 30, 61)
    h = 1e-6
    fd = (softplus(x + h) - softplus(x - h)) / (2 * h)
    assert np.allclose(sigmoid(x), fd, atol=1e-8)


def test_mlp_vjp_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = Mlp([4, 7, 5, 3], rng)
    pv = ParamVector([net])
    x = rng.normal(size=(6, 4))
    cot = rng.normal(size=(6, 3))
    out, vjp = net.forward(x, need_vjp=True)
    pv.zero_grad()
    gx = vjp(cot)

    def f():
        return float(np.sum(net.forward(x) * cot))

    h = 1e-6
    for i in rng.choice(pv.size, 20, replace=False):
        v = pv.data[i]
        pv.data[i] = v + h
        a = f()
        pv.data[i] = v - h
        b = f()
        pv.data[i] = v
        assert abs((a - b) / (2 * h) - pv.grad[i]) < 1e-6
    for j in range(4):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        fd = (np.sum(net.forward(xp) * cot) - np.sum(net.forward(xm) * cot)) / (2 * h)
        assert abs(fd - gx[:, j].sum()) < 1e-6


def test_dropout_only_in_train_mode():
    rng = np.random.default_rng(1)
    net = Mlp([3, 50, 2], rng, dropout=0.5)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(net.forward(x), net.forward(x))
    a = net.forward(x, train=True, rng=np.random.default_rng(0))
    b = net.forward(x, train=True, rng=np.random.default_rng(1))
    assert not np.allclose(a, b)


def test_param_vector_views_share_storage():
    rng = np.random.default_rng(2)
    a, b = Mlp([2, 3], rng), Mlp([3, 1], rng)
    pv = ParamVector([a, b])
    assert pv.size == 2 * 3 + 3 + 3 + 1
    pv.data[:] = 0.5
    assert np.all(a.weights[0] == 0.5) and np.all(b.biases[0] == 0.5)
    with pytest.raises(ValueError):
        pv.set(np.zeros(3))


def test_adam_minimizes_quadratic_and_rejects_nan():
    net = Mlp([1, 1], np.random.default_rng(0))
    pv = ParamVector([net])
    target = np.array([2.0, -1.0])
    for _ in range(3000):
        pv.grad[:] = 2 * (pv.data - target)
        adam_step(pv, lr=0.01)
    assert np.allclose(pv.data, target, atol=1e-3)
    before = pv.copy()
    pv.grad[:] = np.nan
    assert adam_step(pv) is False
    assert np.array_equal(pv.data, before) and pv.rejected == 1


def test_adam_weight_decay_is_decoupled():
    net = Mlp([1, 1], np.random.default_rng(0))
    pv = ParamVector([net])
    pv.data[:] = 1.0
    pv.grad[:] = 0.0
    adam_step(pv, lr=0.1, weight_decay=0.5)
    # zero gradient: only the multiplicative shrink acts
    assert np.allclose(pv.data, 0.95)


def test_tape_chain_and_double_consume():
    rng = np.random.default_rng(3)
    a, b = Mlp([2, 4], rng), Mlp([4, 1], rng)
    ParamVector([a, b])
    tape = Tape()
    x = rng.normal(size=(3, 2))
    y = mlp_forward(b, mlp_forward(a, x, tape=tape), tape=tape)
    g = backward(tape, np.ones_like(y))
    assert g.shape == x.shape
    with pytest.raises(TapeError):
        backward(tape, np.ones_like(y))
    with pytest.raises(ValueError):
        mlp_forward(a, x, mode="test")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    pv = ParamVector([Mlp([3, 4, 2], rng)])
    pv.m[:] = rng.normal(size=pv.size)
    pv.v[:] = rng.random(pv.size)
    pv.step = 17
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, {"kind": "test"}, pv)
    header, params, opt = read_checkpoint(path)
    assert header["kind"] == "test" and header["n_params"] == pv.size
    assert np.array_equal(params, pv.data)
    assert opt["step"] == 17 and np.array_equal(opt["m"], pv.m) and np.array_equal(opt["v"], pv.v)
    write_checkpoint(path, {}, pv, with_optimizer=False)
    assert read_checkpoint(path)[2] is None
    (tmp_path / "bad").write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "bad")
