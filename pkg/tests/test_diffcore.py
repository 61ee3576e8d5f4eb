import numpy as np
import pytest
from hypothesis import given, strategies as st

from sesshet import diffcore as dc
from sesshet.diffcore import LstmParams, LstmState, NumericError, Tensor


def _lstm_params(d_in, d, rng, scale=0.5, prefix=""):
    p = LstmParams.init(d_in, d, rng, prefix)
    for t in p.named().values():
        t.data[...] = rng.normal(scale=scale, size=t.shape)
    return p


def _zero_lstm(d_in, d):
    p = LstmParams.init(d_in, d, np.random.default_rng(0))
    for t in p.named().values():
        t.data[...] = 0.0
    return p


# grad_check itself -------------------------------------------------------------

def test_square_at_three():
    theta = dc.parameter([3.0])
    loss = (theta * theta).sum()
    loss.backward()
    assert theta.grad[0] == 6.0
    assert dc.grad_check(lambda: (theta * theta).sum(), [theta], 1e-4) < 1e-9


def test_softmax_cross_entropy_self_test(rng):
    logits = dc.parameter(rng.normal(size=(1, 5)), "logits")
    err = dc.grad_check(lambda: dc.cross_entropy(logits, np.array([2])), [logits], 1e-5)
    assert err <= 1e-6


def test_corrupted_gradient_is_detected(rng):
    theta = dc.parameter(rng.normal(size=4) + 2.0)

    def bad_square():
        x = theta
        return dc._make((x.data ** 2).sum(), (x,), lambda g: x._accum(g * 2 * x.data * 1.1), "bad")

    err = dc.grad_check(bad_square, [theta], 1e-5)
    assert err == pytest.approx(0.1 / 1.1, rel=1e-4)


def test_eps_range_enforced():
    theta = dc.parameter([1.0])
    with pytest.raises(ValueError):
        dc.grad_check(lambda: theta.sum(), [theta], eps=1e-2)
    with pytest.raises(ValueError):
        dc.grad_check(lambda: theta.sum(), [theta], eps=1e-9)


# op gradients on random shapes ----------------------------------------------------

shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))


def _check(f, params, tol=1e-5):
    assert dc.grad_check(f, params, 1e-6) <= tol


@given(shapes, st.integers(0, 10 ** 6))
def test_elementwise_grads(shape, seed):
    rng = np.random.default_rng(seed)
    a = dc.parameter(rng.normal(size=shape))
    b = dc.parameter(rng.uniform(0.5, 2.0, size=shape))
    w = rng.normal(size=shape)
    _check(lambda: ((a * b + a / b - b) * w).sum(), [a, b])
    _check(lambda: (dc.sigmoid(a) * w + dc.tanh(a) * w).sum(), [a])
    _check(lambda: (dc.exp(a) * w + dc.log(b) * w).sum(), [a, b])
    _check(lambda: (dc.leaky_relu(a + 0.05) * w).sum(), [a])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_matmul_and_broadcast_grads(n, k, m, seed):
    rng = np.random.default_rng(seed)
    A = dc.parameter(rng.normal(size=(n, k)))
    B = dc.parameter(rng.normal(size=(k, m)))
    bias = dc.parameter(rng.normal(size=m))
    v = dc.parameter(rng.normal(size=k))
    w = rng.normal(size=(n, m))
    _check(lambda: ((A @ B + bias) * w).sum(), [A, B, bias])
    _check(lambda: ((A @ v) * w[:, 0]).sum(), [A, v])
    _check(lambda: ((v @ B) * w[0]).sum(), [v, B])


@given(shapes, st.integers(0, 10 ** 6))
def test_shape_op_grads(shape, seed):
    rng = np.random.default_rng(seed)
    a = dc.parameter(rng.normal(size=shape))
    b = dc.parameter(rng.normal(size=shape))
    n = shape[0]
    idx = rng.integers(0, n, size=5)
    w2 = rng.normal(size=(2,) + shape)
    _check(lambda: (dc.stack([a, b]) * w2).sum(), [a, b])
    _check(lambda: (dc.concat([a, b], axis=1) * np.concatenate([w2[0], w2[1]], axis=1)).sum(), [a, b])
    w5 = rng.normal(size=(5, shape[1]))
    _check(lambda: (a[idx] * w5).sum(), [a])
    _check(lambda: (a.T * w2[0].T).sum() + a.mean(axis=0).sum() + a.reshape(-1).sum(), [a])


@given(shapes, st.integers(0, 10 ** 6))
def test_softmax_grads(shape, seed):
    rng = np.random.default_rng(seed)
    a = dc.parameter(rng.normal(size=shape))
    w = rng.normal(size=shape)
    mask = rng.random(shape) < 0.7
    mask[:, 0] = True
    _check(lambda: (dc.softmax(a, axis=-1) * w).sum(), [a])
    _check(lambda: (dc.softmax(a, axis=-1, mask=mask) * w).sum(), [a])
    _check(lambda: (dc.log_softmax(a, axis=-1) * w).sum(), [a])
    targets = rng.integers(0, shape[1], size=shape[0])
    _check(lambda: dc.cross_entropy(a, targets), [a])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_invariants(logits, shift):
    x = np.array(logits)
    p = dc.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all() and (p <= 1).all()
    assert np.allclose(dc.softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    p = dc.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0)


@given(st.floats(-1e3, 1e3))
def test_leaky_relu_definition(x):
    y = dc.leaky_relu(Tensor([x])).data[0]
    assert y == (x if x >= 0 else dc.LEAKY_SLOPE * x)


def test_non_finite_raises():
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(NumericError):
        dc.exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        dc.log(Tensor([0.0]))
    with pytest.raises(NumericError):
        dc.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_needs_scalar():
    a = dc.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (a * 2).backward()


def test_gradient_accumulates_over_reuse():
    a = dc.parameter([2.0])
    (a * a * a).sum().backward()
    assert a.grad[0] == pytest.approx(12.0)


# LSTM ------------------------------------------------------------------------------

def test_zero_params_cell():
    p = _zero_lstm(3, 4)
    x = Tensor(np.ones((1, 3)))
    prev = LstmState(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
    gate = dc.sigmoid(x @ p.U_z + prev.h @ p.W_z + p.b_z).data
    assert np.array_equal(gate, np.full((1, 4), 0.5))
    st_ = dc.lstm_cell(x, prev, p)
    assert np.array_equal(st_.h.data, np.zeros((1, 4)))
    assert np.array_equal(st_.c.data, np.zeros((1, 4)))


def test_forget_one_input_zero_carries_cell(rng):
    p = _lstm_params(3, 4, rng)
    for name in ("U_f", "W_f", "U_z", "W_z"):
        getattr(p, name).data[...] = 0.0
    p.b_f.data[...] = 60.0   # sigma -> 1 in double precision
    p.b_z.data[...] = -60.0  # sigma -> 0
    c_prev = rng.normal(size=(1, 4))
    st_ = dc.lstm_cell(Tensor(rng.normal(size=(1, 3))),
                       LstmState(Tensor(rng.normal(size=(1, 4))), Tensor(c_prev)), p)
    assert np.allclose(st_.c.data, c_prev, atol=1e-15)


def test_cell_gradient(rng):
    p = _lstm_params(3, 4, rng)
    x = dc.parameter(rng.normal(size=(1, 3)))
    h0, c0 = dc.parameter(rng.normal(size=(1, 4))), dc.parameter(rng.normal(size=(1, 4)))
    w = rng.normal(size=(2, 4))

    def f():
        s = dc.lstm_cell(x, LstmState(h0, c0), p)
        return (s.h * w[0]).sum() + (s.c * w[1]).sum()

    assert dc.grad_check(f, list(p.named().values()) + [x, h0, c0], 1e-5) <= 1e-6


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_sequence_matches_cell(rng, reverse):
    p = _lstm_params(3, 4, rng)
    X = rng.normal(size=(3, 5, 3))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], bool)
    H = dc.lstm_sequence(Tensor(X), p, mask, reverse=reverse).data
    for b in range(3):
        n = mask[b].sum()
        s = LstmState(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
        for t in (range(n - 1, -1, -1) if reverse else range(n)):
            s = dc.lstm_cell(Tensor(X[b, t][None]), s, p)
            assert np.allclose(s.h.data[0], H[b, t], atol=1e-14)
        assert (H[b, n:] == 0).all()


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_sequence_gradient(rng, reverse):
    p = _lstm_params(3, 4, rng)
    X = dc.parameter(rng.normal(size=(3, 5, 3)))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], bool)
    w = rng.normal(size=(3, 5, 4))
    f = lambda: (dc.lstm_sequence(X, p, mask, reverse=reverse) * w).sum()
    assert dc.grad_check(f, list(p.named().values()) + [X], 1e-5) <= 1e-5


def test_bilstm_single_element(rng):
    fwd, bwd = _lstm_params(3, 2, rng), _lstm_params(3, 2, rng)
    x = rng.normal(size=3)
    out = dc.bilstm_encode([Tensor(x)], fwd, bwd).data
    zero = LstmState(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))
    hf = dc.lstm_cell(Tensor(x[None]), zero, fwd).h.data[0]
    hb = dc.lstm_cell(Tensor(x[None]), zero, bwd).h.data[0]
    assert out.shape == (1, 4)
    assert np.allclose(out[0], np.concatenate([hf, hb]), atol=1e-15)


def test_bilstm_palindrome_symmetry(rng):
    p = _lstm_params(3, 2, rng)
    a, b, c = rng.normal(size=(3, 3))
    seq = np.stack([a, b, c, b, a])
    out = dc.bilstm_encode(Tensor(seq), p, p).data
    swapped = np.concatenate([out[:, 2:], out[:, :2]], axis=1)[::-1]
    assert np.allclose(out, swapped, atol=1e-14)


def test_bilstm_gradient_three_steps(rng):
    fwd, bwd = _lstm_params(3, 2, rng, prefix="f."), _lstm_params(3, 2, rng, prefix="b.")
    X = dc.parameter(rng.normal(size=(3, 3)))
    w = rng.normal(size=(3, 4))
    f = lambda: (dc.bilstm_encode(X, fwd, bwd) * w).sum()
    params = list(fwd.named("f.").values()) + list(bwd.named("b.").values()) + [X]
    assert dc.grad_check(f, params, 1e-5) <= 1e-6


def test_bilstm_rejects_empty(rng):
    p = _lstm_params(3, 2, rng)
    with pytest.raises(ValueError):
        dc.bilstm_encode([], p, p)


# checkpoint container -----------------------------------------------------------------

def test_tensor_container_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b.c": dc.parameter(rng.normal(size=4)), "s": np.array(1.5)}
    dc.save_tensors(tmp_path / "t.shtc", tensors)
    back = dc.load_tensors(tmp_path / "t.shtc")
    assert list(back) == ["a", "b.c", "s"]
    assert np.array_equal(back["a"], tensors["a"])
    assert np.array_equal(back["b.c"], tensors["b.c"].data)
    assert back["s"].shape == ()


def test_tensor_container_checksum(tmp_path, rng):
    path = tmp_path / "t.shtc"
    dc.save_tensors(path, {"a": rng.normal(size=5)})
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        dc.load_tensors(path)
