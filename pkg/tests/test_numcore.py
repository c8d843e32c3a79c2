import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedscape import numcore as nc
from fedscape.errors import ConfigError, NumericError
from fedscape.numcore import Mode


# -- oracles -----------------------------------------------------------------

def loop_dense(x, W, b):
    B, n_in = x.shape
    out = np.zeros((B, W.shape[0]))
    for i in range(B):
        for o in range(W.shape[0]):
            out[i, o] = b[o] + sum(float(W[o, k]) * float(x[i, k]) for k in range(n_in))
    return out


def loop_conv(x, K, b, stride):
    B, C, H, W = x.shape
    O = K.shape[0]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for di in range(3):
                            for dj in range(3):
                                acc += K[o, c, di, dj] * xp[n, c, i * stride + di, j * stride + dj]
                    out[n, o, i, j] = acc
    return out


# -- dense / conv ---------------------------------------------------------------

def test_dense_identity():
    out = nc.dense_forward(np.array([[2.0, 3.0]], np.float32), np.eye(2, dtype=np.float32), np.zeros(2, np.float32))
    np.testing.assert_array_equal(out, [[2, 3]])


def test_dense_hand_arithmetic():
    W = np.array([[1, 2], [3, 4]], np.float32)
    out = nc.dense_forward(np.ones((1, 2), np.float32), W, np.array([1, 0], np.float32))
    np.testing.assert_array_equal(out, [[4, 7]])


def test_dense_matches_loop_oracle(rng):
    x, W, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    np.testing.assert_allclose(nc.dense_forward(x, W, b), loop_dense(x, W, b), atol=1e-6)


def test_dense_shape_mismatch():
    with pytest.raises(ConfigError):
        nc.dense_forward(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    K = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        K[c, c, 1, 1] = 1.0
    out, _ = nc.conv2d_forward(x, K, np.zeros(3, np.float32), 1)
    np.testing.assert_array_equal(out, x)


def test_conv_constant_field_interior():
    x = np.full((1, 1, 5, 5), 2.5, np.float32)
    out, _ = nc.conv2d_forward(x, np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), 1)
    assert out[0, 0, 2, 2] == pytest.approx(9 * 2.5)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_nested_loop_oracle(rng, stride):
    x = rng.standard_normal((2, 3, 8, 8))
    K, b = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out, _ = nc.conv2d_forward(x, K, b, stride)
    np.testing.assert_allclose(out, loop_conv(x, K, b, stride), atol=1e-5)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ConfigError):
        nc.conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1), 1)


# -- batch norm -----------------------------------------------------------------

def test_batchnorm_constant_batch_gives_beta():
    x = np.full((4, 3), 7.0, np.float32)
    y, _, _ = nc.batchnorm_forward(x, np.ones(3, np.float32), np.full(3, 0.5, np.float32),
                                   np.zeros(3, np.float32), np.ones(3, np.float32), Mode.TRAIN)
    np.testing.assert_allclose(y, 0.5)


def test_batchnorm_eval_identity(rng):
    x = rng.standard_normal((5, 4)).astype(np.float32)
    y, _, stats = nc.batchnorm_forward(x, np.ones(4, np.float32), np.zeros(4, np.float32),
                                       np.zeros(4, np.float32), np.ones(4, np.float32), Mode.EVAL)
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-6)
    np.testing.assert_array_equal(stats[0], np.zeros(4))


def test_batchnorm_two_pass_oracle(rng):
    x = rng.standard_normal((6, 3, 4, 4))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    y, _, (nm, nv) = nc.batchnorm_forward(x, g, b, rm, rv, Mode.TRAIN)
    for c in range(3):
        vals = x[:, c].ravel()
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        ref = g[c] * (x[:, c] - mean) / np.sqrt(var + 1e-5) + b[c]
        np.testing.assert_allclose(y[:, c], ref, atol=1e-5)
        assert nm[c] == pytest.approx(0.1 * mean)
        assert nv[c] == pytest.approx(0.9 + 0.1 * var * len(vals) / (len(vals) - 1))


def test_batchnorm_train_needs_two_rows():
    with pytest.raises(NumericError):
        nc.batchnorm_forward(np.ones((1, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), Mode.TRAIN)


# -- loss / adam ----------------------------------------------------------------

def test_mse_examples():
    assert nc.mse_loss(np.ones((2, 8)), np.ones((2, 8)))[0] == 0.0
    assert nc.mse_loss(np.ones((1, 8)), np.zeros((1, 8)))[0] == 1.0


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    nc.adam_step(p, {"w": np.array([1.0])}, nc.AdamState(lr=1e-3))
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-9)


def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([0.3, -1.0])}
    st_ = nc.AdamState()
    nc.adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [0.3, -1.0])
    assert st_.t == 1


def test_adam_scalar_hand_simulation():
    # f(t) = t^2 from t = 1; reference Adam written out longhand
    p = {"w": np.array([1.0])}
    opt = nc.AdamState(lr=0.1)
    th, m, v = 1.0, 0.0, 0.0
    prev = 1.0
    for t in range(1, 11):
        g = 2 * p["w"][0]
        nc.adam_step(p, {"w": np.array([g])}, opt)
        gr = 2 * th
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        th -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"][0] == pytest.approx(th, rel=1e-10)
        assert p["w"][0] < prev
        prev = p["w"][0]


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(NumericError):
        nc.adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, nc.AdamState())


# -- grad check -----------------------------------------------------------------

def test_grad_check_quadratic(rng):
    p = {"a": rng.standard_normal(10)}
    assert nc.grad_check(lambda q: (float(np.sum(q["a"] ** 2)), {"a": 2 * q["a"]}), p) < 1e-5


def test_grad_check_constant():
    assert nc.grad_check(lambda q: (3.0, {}), {"a": np.ones(4)}) == 0.0


def test_grad_check_dense_mse(rng):
    x, t = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    p = {"W": rng.standard_normal((3, 4)), "b": rng.standard_normal(3)}

    def f(q):
        out = nc.dense_forward(x, q["W"], q["b"])
        loss, d = nc.mse_loss(out, t)
        _, dW, db = nc.dense_backward(d, x, q["W"])
        return loss, {"W": dW, "b": db}
    assert nc.grad_check(f, p) < 1e-4


def test_grad_check_restores_params(rng):
    a = rng.standard_normal(6)
    p = {"a": a.copy()}
    nc.grad_check(lambda q: (float(np.sum(q["a"] ** 3)), {"a": 3 * q["a"] ** 2}), p)
    np.testing.assert_array_equal(p["a"], a)


# -- tensor format ----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4))
def test_tensor_round_trip(shape):
    arr = np.random.default_rng(len(shape)).standard_normal(shape).astype(np.float32)
    back = nc.tensor_from_bytes(nc.tensor_to_bytes(arr))
    assert back.shape == arr.shape and back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_tensor_size_matches_header_count():
    buf = io.BytesIO()
    n = nc.write_tensor(buf, np.zeros((2, 3), np.float32))
    assert n == len(buf.getvalue()) == nc.tensor_nbytes((2, 3))


def test_tensor_bad_magic():
    with pytest.raises(ConfigError):
        nc.tensor_from_bytes(b"XXXX" + bytes(20))
