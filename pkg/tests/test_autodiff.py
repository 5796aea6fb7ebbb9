import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import clix3d.autodiff as ad

seeds = st.integers(0, 2**31 - 1)


def away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(0, 1, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# --- linear -------------------------------------------------------------------------------

def test_linear_identity_and_hand_example():
    x = ad.constant(np.arange(6.0).reshape(2, 3))
    y = ad.linear(x, ad.constant(np.eye(3)), ad.constant(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)
    y = ad.linear(ad.constant([[1.0, 1.0]]), ad.constant([[2.0], [3.0]]), ad.constant([1.0]))
    assert y.data.tolist() == [[6.0]]


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        ad.linear(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 1))))


def test_linear_weight_gradient_is_x_transpose_ones():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=(4, 3))
    W = ad.parameter(rng.normal(size=(3, 2)))
    with ad.Tape() as tape:
        y = ad.sum(ad.matmul(ad.constant(xv), W))
    tape.backward(y)
    np.testing.assert_allclose(W.grad, xv.T @ np.ones((4, 2)))
    assert ad.grad_check(lambda: ad.sum(ad.matmul(ad.constant(xv), W)), W) < 1e-6


# --- gradient checks per op (property suite) ------------------------------------------------

def _unary_cases(rng):
    x = away_from_zero(rng, (3, 4))
    pos = np.abs(x) + 0.5
    return [
        (ad.relu, x), (ad.sigmoid, x), (ad.tanh, x), (ad.exp, 0.5 * x), (ad.log, pos),
        (lambda t: ad.scale(t, -1.7), x), (ad.mean, x),
        (lambda t: ad.reshape(t, (4, 3)), x),
    ]


@settings(max_examples=25)
@given(seeds)
def test_unary_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=12)
    for fn, xv in _unary_cases(rng):
        x = ad.parameter(xv)

        def f():
            y = fn(x)
            return ad.sum(ad.mul(ad.reshape(y, (1, -1)), ad.constant(w[:y.data.size].reshape(1, -1))))
        assert ad.grad_check(f, x) < 1e-4


@settings(max_examples=25)
@given(seeds)
def test_binary_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(3, 4)))
    W = ad.parameter(rng.normal(size=(4, 5)))
    bias = ad.parameter(rng.normal(size=5))
    for f in (lambda: ad.sum(ad.mul(ad.add(a, b), ad.sub(a, b))),
              lambda: ad.sum(ad.tanh(ad.linear(a, W, bias))),
              lambda: ad.sum(ad.tanh(ad.concat([a, b], axis=1))),
              lambda: ad.sum(ad.tanh(ad.concat([a, b], axis=0)))):
        assert ad.grad_check(f, [a, b, W, bias]) < 1e-4


@settings(max_examples=25)
@given(seeds)
def test_gather_and_segment_max_gradcheck(seed):
    rng = np.random.default_rng(seed)
    # distinct values keep the max unique, so the function is smooth at x
    x = ad.parameter(rng.permutation(40).reshape(10, 4) * 0.1 + rng.normal(0, 0.001, (10, 4)))
    idx = rng.integers(-1, 10, 15)
    seg = np.r_[np.arange(4), rng.integers(0, 4, 6)]
    w = rng.normal(size=(4, 4))
    assert ad.grad_check(lambda: ad.sum(ad.tanh(ad.gather_rows(x, idx))), x) < 1e-4
    assert ad.grad_check(lambda: ad.sum(ad.mul(ad.segment_max(x, seg, 4), ad.constant(w))), x) < 1e-4


def test_segment_max_requires_nonempty_segments():
    with pytest.raises(ValueError):
        ad.segment_max(ad.constant(np.ones((3, 2))), [0, 0, 2], 3)


@settings(max_examples=15)
@given(seeds, st.sampled_from([1, 2]))
def test_conv2d_gradcheck(seed, stride):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.normal(size=(1, 5, 6, 2)))
    W = ad.parameter(rng.normal(0, 0.3, size=(18, 3)))
    b = ad.parameter(rng.normal(size=3))
    assert ad.grad_check(lambda: ad.sum(ad.tanh(ad.conv2d(x, W, b, stride))), [x, W, b]) < 1e-4


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 5, 2))
    W = rng.normal(size=(18, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(ad.constant(x), ad.constant(W), ad.constant(b), 1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    Wk = W.reshape(3, 3, 2, 3)
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abco->o", xp[0, i:i + 3, j:j + 3], Wk) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=25)
@given(seeds)
def test_losses_gradcheck(seed):
    rng = np.random.default_rng(seed)
    z = ad.parameter(rng.normal(size=(6, 3)))
    lab = rng.integers(0, 3, 6)
    w = rng.uniform(0.1, 1, 6)
    assert ad.grad_check(lambda: ad.cross_entropy(z, lab, w), z) < 1e-4
    zb = ad.parameter(rng.normal(size=8))
    t = rng.integers(0, 2, 8)
    wb = rng.uniform(0.1, 1, 8)
    assert ad.grad_check(lambda: ad.bce_with_logits(zb, t, wb), zb) < 1e-4
    p = ad.parameter(rng.normal(size=(5, 7)))
    tgt = p.data + away_from_zero(rng, (5, 7), 0.05) * 0.5
    assert ad.grad_check(lambda: ad.smooth_l1(p, tgt, np.ones(5)), p) < 1e-4


def test_sparse_matmul_gradcheck():
    rng = np.random.default_rng(2)
    S = (rng.uniform(size=(4, 6)) < 0.4) * rng.normal(size=(4, 6))
    x = ad.parameter(rng.normal(size=(6, 3)))
    assert ad.grad_check(lambda: ad.sum(ad.tanh(ad.sparse_matmul(S, x))), x) < 1e-4


def test_grad_check_sum_of_squares_and_nonfinite():
    x = ad.parameter([3.0])
    assert ad.grad_check(lambda: ad.sum(ad.mul(x, x)), x) < 1e-9
    y = ad.parameter([-1.0])
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        ad.grad_check(lambda: ad.sum(ad.log(y)), y)


def test_bce_stable_at_large_logits():
    z = ad.constant([1000.0, -1000.0])
    v = ad.bce_with_logits(z, [1.0, 0.0], [1.0, 1.0]).data
    assert np.isfinite(v) and v == pytest.approx(0.0)


# --- tape ---------------------------------------------------------------------------------

def test_no_tape_no_recording():
    x = ad.parameter([1.0, 2.0])
    y = ad.sum(ad.mul(x, x))
    assert not y.requires_grad


def test_gradients_accumulate_over_shared_use():
    x = ad.parameter([2.0])
    with ad.Tape() as tape:
        y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
    tape.backward(y)
    assert x.grad.tolist() == [7.0]


# --- Adam ---------------------------------------------------------------------------------

def test_adam_zero_grad_no_decay_unchanged():
    p = {"w": ad.parameter([1.0, -2.0])}
    ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(weight_decay=0.0))
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_hand_value():
    p = {"w": ad.parameter([0.0])}
    st_ = ad.AdamState(lr=0.01, weight_decay=0.0)
    ad.adam_step(p, {"w": np.array([1.0])}, st_)
    # m_hat = 1, v_hat = 1 -> update = lr * 1 / (1 + eps)
    assert p["w"].data[0] == pytest.approx(-0.01, abs=1e-6)
    assert st_.step == 1


def test_adam_decoupled_weight_decay():
    p = {"w": ad.parameter([2.0])}
    ad.adam_step(p, {"w": np.array([0.0])}, ad.AdamState(lr=0.1, weight_decay=0.5))
    assert p["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_identical_params_identical_updates_and_shape_check():
    p = {"a": ad.parameter([0.3, 0.1]), "b": ad.parameter([0.3, 0.1])}
    g = {"a": np.array([0.5, -1.0]), "b": np.array([0.5, -1.0])}
    s = ad.AdamState()
    for _ in range(5):
        ad.adam_step(p, g, s)
    np.testing.assert_array_equal(p["a"].data, p["b"].data)
    with pytest.raises(ValueError):
        ad.adam_step(p, {"a": np.zeros(3), "b": np.zeros(2)}, s)


def test_one_cycle_shape():
    lrs = [ad.one_cycle_lr(s, 0.01, 100) for s in range(100)]
    assert max(lrs) == pytest.approx(0.01, rel=1e-3)
    assert lrs[0] == pytest.approx(0.001) and lrs[-1] < 0.0002
    assert ad.one_cycle_lr(100, 0.01, 100) == lrs[0]


# --- checkpoints --------------------------------------------------------------------------

def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ts = {"a": rng.normal(size=(3, 4)), "b.c": np.array(2.5), "e": np.zeros((0, 3))}
    ad.save_tensors(tmp_path / "t.ckpt", ts, {"k": 1})
    back, meta = ad.load_tensors(tmp_path / "t.ckpt")
    assert meta == {"k": 1} and set(back) == set(ts)
    for k in ts:
        assert back[k].shape == ts[k].shape and np.array_equal(back[k], ts[k])
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_tensors(tmp_path / "bad")


def test_training_steps_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        W = ad.parameter(rng.normal(size=(4, 2)))
        x = rng.normal(size=(8, 4))
        s = ad.AdamState()
        for _ in range(10):
            W.grad = None
            with ad.Tape() as tape:
                y = ad.sum(ad.tanh(ad.matmul(ad.constant(x), W)))
            tape.backward(y)
            ad.adam_step({"W": W}, None, s)
        return W.data.tobytes()
    assert run() == run()
