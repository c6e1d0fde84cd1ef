"""Tensor engine: forward oracles, gradient checks, guards, persistence."""

import io
import math
import struct

import numpy as np
import pytest

from adapterlab import tensor as T
from adapterlab.errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    NonFiniteError,
)
from helpers import gradcheck, random_loss_of


@pytest.fixture(autouse=True)
def clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- matmul -------------------------------------------------------------------


def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = T.Tensor(np.eye(2))
    assert np.array_equal(T.matmul(eye, a).data, a.data)


def test_matmul_hand_expansion():
    # oracle: row-by-column expansion done by hand
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[0.0], [1.0]]
    expected = [[a[0][0] * b[0][0] + a[0][1] * b[1][0]], [a[1][0] * b[0][0] + a[1][1] * b[1][0]]]
    assert expected == [[2.0], [4.0]]
    out = T.matmul(T.Tensor(a), T.Tensor(b))
    np.testing.assert_array_equal(out.data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))


def test_matmul_gradient_vs_finite_differences(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    gradcheck(lambda: T.tsum(T.matmul(a, b)), [a, b], rng)
    # grad of sum(A@B) w.r.t. A is the row-sums of B broadcast over rows
    T.reset_tape()
    a.zero_grad()
    b.zero_grad()
    loss = T.tsum(T.matmul(a, b))
    T.backward(loss)
    np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)), rtol=1e-12)


# --- softmax ------------------------------------------------------------------


def test_softmax_symmetry_and_overflow():
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_softmax_closed_form():
    # oracle: softmax([0, ln 3]) = [1, 3] / 4
    out = T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    x = T.Tensor(rng.normal(scale=5.0, size=(17, 9)))
    sums = T.softmax_rows(x).data.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)
    assert np.all(T.softmax_rows(x).data >= 0.0)


def test_softmax_gradient(rng):
    x = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.softmax_rows(x), np.random.default_rng(7)), [x], rng)


# --- conv2d -------------------------------------------------------------------


def naive_conv3x3(x, w, b):
    """Six-loop direct convolution, padding 1, stride 1."""
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    out = np.zeros((c_out, h, wd))
    for co in range(c_out):
        for y in range(h):
            for xx in range(wd):
                acc = b[co]
                for ci in range(c_in):
                    for i in range(3):
                        for j in range(3):
                            yy, xj = y + i - 1, xx + j - 1
                            if 0 <= yy < h and 0 <= xj < wd:
                                acc += w[co, ci, i, j] * x[ci, yy, xj]
                out[co, y, xx] = acc
    return out


def test_conv2d_zero_weights_bias_only(rng):
    x = T.Tensor(rng.normal(size=(2, 4, 4)))
    w = T.Tensor(np.zeros((3, 2, 3, 3)))
    b = T.Tensor([1.5, -0.5, 2.0])
    out = T.conv2d(x, w, b).data
    for c, beta in enumerate([1.5, -0.5, 2.0]):
        assert np.all(out[c] == beta)


def test_conv2d_identity_kernel(rng):
    x = T.Tensor(rng.normal(size=(1, 5, 5)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = T.conv2d(x, T.Tensor(w), T.Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_vs_naive_loop_oracle(rng):
    x = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b))
    np.testing.assert_allclose(out.data, naive_conv3x3(x, w, b), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((3, 4, 3, 3))), T.Tensor(np.zeros(3)))


def test_conv2d_gradient(rng):
    x = T.Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=3), requires_grad=True)
    loss_rng = np.random.default_rng(3)
    gradcheck(lambda: random_loss_of(T.conv2d(x, w, b), np.random.default_rng(5)), [x, w, b], loss_rng)


# --- group_norm -----------------------------------------------------------------


def test_group_norm_constant_input_is_zero():
    x = T.Tensor(np.full((4, 3, 3), 7.0))
    out = T.group_norm(x, 2, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def instance_norm_oracle(x, eps=1e-5):
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        m, v = x[c].mean(), x[c].var()
        out[c] = (x[c] - m) / np.sqrt(v + eps)
    return out


def test_group_norm_groups_eq_channels_matches_instance_norm(rng):
    x = rng.normal(size=(4, 5, 5))
    out = T.group_norm(T.Tensor(x), 4, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, instance_norm_oracle(x), atol=1e-10)


def test_group_norm_per_group_statistics(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(8, 6, 6))
    out = T.group_norm(T.Tensor(x), 4, T.Tensor(np.ones(8)), T.Tensor(np.zeros(8))).data
    grouped = out.reshape(4, -1)
    np.testing.assert_allclose(grouped.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(grouped.var(axis=1), 1.0, atol=1e-4)


def test_group_norm_indivisible_groups():
    with pytest.raises(ConfigurationError):
        T.group_norm(T.Tensor(np.zeros((6, 2, 2))), 4, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))


def test_group_norm_gradient(rng):
    x = T.Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    gamma = T.Tensor(rng.normal(size=4) + 1.0, requires_grad=True)
    beta = T.Tensor(rng.normal(size=4), requires_grad=True)
    gradcheck(
        lambda: random_loss_of(T.group_norm(x, 2, gamma, beta), np.random.default_rng(11)),
        [x, gamma, beta],
        rng,
    )


# --- activations -----------------------------------------------------------------


def test_activation_values():
    x = T.Tensor([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.activation(x, "relu").data, [0.0, 0.0, 2.0])
    assert T.activation(T.Tensor([0.0]), "sigmoid").data[0] == 0.5
    assert T.activation(T.Tensor([0.0]), "silu").data[0] == 0.0
    assert T.activation(x, "identity") is x


def test_silu_closed_form():
    # silu(1) = 1 * sigmoid(1) = 1 / (1 + e^-1)
    expected = 1.0 / (1.0 + math.exp(-1.0))
    assert abs(T.silu(T.Tensor([1.0])).data[0] - expected) < 1e-12


def test_unknown_activation_kind():
    with pytest.raises(ValueError, match="unknown activation"):
        T.activation(T.Tensor([1.0]), "tanh")


def test_activation_gradients(rng):
    for kind in ("relu", "sigmoid", "silu"):
        # keep relu inputs away from the kink
        base = rng.normal(size=(3, 4))
        base[np.abs(base) < 0.1] += 0.5
        x = T.Tensor(base, requires_grad=True)
        gradcheck(
            lambda x=x, kind=kind: random_loss_of(T.activation(x, kind), np.random.default_rng(2)),
            [x],
            rng,
        )


# --- structural ops -----------------------------------------------------------


def test_structural_op_gradients(rng):
    ops = {
        "transpose": lambda x: T.transpose(x),
        "reshape": lambda x: T.reshape(x, (2, 6)),
        "mean_rows": lambda x: T.mean_rows(x),
        "square": lambda x: T.square(x),
        "tmean": lambda x: T.tmean(x),
    }
    for name, op in ops.items():
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        out = op(x)
        if out.data.ndim == 0:
            make = lambda op=op, x=x: op(x)
        else:
            make = lambda op=op, x=x: random_loss_of(op(x), np.random.default_rng(4))
        gradcheck(make, [x], rng)


def test_spatial_op_gradients(rng):
    x = T.Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.avg_pool2(x), np.random.default_rng(8)), [x], rng)
    gradcheck(lambda: random_loss_of(T.upsample2(x), np.random.default_rng(9)), [x], rng)
    gradcheck(lambda: random_loss_of(T.chw_to_tokens(x), np.random.default_rng(10)), [x], rng)
    tok = T.Tensor(rng.normal(size=(16, 3)), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.tokens_to_chw(tok, 4, 4), np.random.default_rng(12)), [tok], rng)


def test_bias_add_gradients(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    bias = T.Tensor(rng.normal(size=4), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.add(a, bias), np.random.default_rng(6)), [a, bias], rng)
    x = T.Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    ch = T.Tensor(rng.normal(size=3), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.add(x, ch), np.random.default_rng(6)), [x, ch], rng)


def test_concat_gradient(rng):
    a = T.Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.concat(a, b, axis=0), np.random.default_rng(13)), [a, b], rng)


def test_broadcast_rows_gradient(rng):
    a = T.Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    gradcheck(lambda: random_loss_of(T.broadcast_rows(a, 7), np.random.default_rng(14)), [a], rng)


def test_pool_upsample_shapes(rng):
    x = T.Tensor(rng.normal(size=(3, 8, 8)))
    assert T.avg_pool2(x).shape == (3, 4, 4)
    assert T.upsample2(x).shape == (3, 16, 16)
    with pytest.raises(DimensionError):
        T.avg_pool2(T.Tensor(np.zeros((1, 3, 4))))


# --- backward mechanics ----------------------------------------------------------


def test_backward_sum_is_ones():
    x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_sum_of_squares():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_fanout_accumulates():
    x = T.Tensor([1.0, 1.0], requires_grad=True)
    T.backward(T.tsum(T.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.add(x, 1.0))


def test_backward_requires_trainable_path():
    x = T.Tensor([1.0, 2.0])
    with pytest.raises(ContractError):
        T.backward(T.tsum(x))


def test_no_grad_skips_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.square(x))
    assert T.tape_size() == 0
    assert not y.requires_grad


def test_frozen_inputs_get_no_grad(rng):
    frozen = T.Tensor(rng.normal(size=(3, 3)), requires_grad=False)
    live = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    T.backward(T.tsum(T.matmul(frozen, live)))
    assert frozen.grad is None
    assert live.grad is not None


def test_determinism_bit_identical(rng):
    def run():
        r = np.random.default_rng(99)
        x = T.Tensor(r.normal(size=(4, 4)), requires_grad=True)
        w = T.Tensor(r.normal(size=(4, 4)), requires_grad=True)
        loss = T.tsum(T.square(T.softmax_rows(T.matmul(x, w))))
        T.backward(loss)
        out = (loss.item(), x.grad.copy(), w.grad.copy())
        T.reset_tape()
        return out

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


# --- finite guard -----------------------------------------------------------------


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        T.Tensor([float("inf")])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_op_output_raises():
    x = T.Tensor([1e200])
    with pytest.raises(NonFiniteError):
        T.square(x)


# --- persistence ------------------------------------------------------------------


def test_tensor_binary_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(3, 4, 2))
    path = tmp_path / "t.bin"
    T.save_tensor(path, arr)
    np.testing.assert_array_equal(T.load_tensor(path), arr)


def test_tensor_binary_layout():
    # little-endian u32 rank, u32 extents, f64 payload
    buf = io.BytesIO()
    T.write_tensor(buf, np.array([[1.0, 2.0], [3.0, 4.0]]))
    raw = buf.getvalue()
    assert struct.unpack("<I", raw[:4])[0] == 2
    assert struct.unpack("<2I", raw[4:12]) == (2, 2)
    assert struct.unpack("<4d", raw[12:]) == (1.0, 2.0, 3.0, 4.0)


def test_scalar_tensor_roundtrip(tmp_path):
    path = tmp_path / "s.bin"
    T.save_tensor(path, np.asarray(2.5))
    out = T.load_tensor(path)
    assert out.shape == () and out == 2.5
