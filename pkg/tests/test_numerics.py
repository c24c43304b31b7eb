import math

import numpy as np
import pytest

from gradcheck import check_gradients
from pmvc.numerics import (
    BatchNorm,
    Conv2d,
    ConvBlock,
    ConvLSTMCell,
    ConvLstmState,
    Deconv2d,
    NonFiniteError,
    Parameter,
    ResBlock,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    conv_lstm_step,
    kaiming_init,
    make_rng,
    no_grad,
    ops,
)
from pmvc.numerics import checkpoint


def loop_conv2d(x, w, stride=1, dilation=1):
    """Direct nested-loop "same" convolution (NHWC, HWIO)."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
    pad_h = max((ho - 1) * stride + (kh - 1) * dilation + 1 - h, 0)
    pad_w = max((wo - 1) * stride + (kw - 1) * dilation + 1 - wd, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ky in range(kh):
                    for kx in range(kw):
                        iy = oy * stride + ky * dilation - top
                        ix = ox * stride + kx * dilation - left
                        if 0 <= iy < h and 0 <= ix < wd:
                            out[b, oy, ox] += x[b, iy, ix] @ w[ky, kx]
    return out


def random_projection_loss(out: Tensor, seed: int = 99) -> Tensor:
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum_all(ops.mul(out, Tensor(r.astype(out.dtype))))


# ---------------------------------------------------------------------------
# forward behaviour


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 1, 3)).astype(np.float32))
    w = Tensor(np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3))
    np.testing.assert_array_equal(ops.conv2d(x, w).data, x.data)


def test_conv_table_row4_geometry():
    layer = Conv2d(96, 192, 4, stride=2, batchnorm=True, act="relu", rng=make_rng(0))
    layer.eval()
    with no_grad():
        y = layer(Tensor(np.zeros((1, 96, 128, 96), dtype=np.float32)))
    # Height x width x channels in the table's notation is 128x96x96 -> 64x48x192.
    assert y.shape == (1, 48, 64, 192)


@pytest.mark.parametrize("stride,dilation,k", [(1, 1, 3), (2, 1, 4), (1, 2, 3), (2, 1, 5), (1, 4, 3)])
def test_conv_matches_loop_oracle(stride, dilation, k):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 8, 2)).astype(np.float32)
    w = rng.standard_normal((k, k, 2, 3)).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation).data
    np.testing.assert_allclose(got, loop_conv2d(x, w, stride, dilation), atol=1e-5)


def test_conv_channel_mismatch_names_layer():
    with pytest.raises(ShapeError, match="row12"):
        ops.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 5, 2))), name="row12")


def test_deconv_geometry_and_identity():
    layer = Deconv2d(32, 32, 5, stride=2, batchnorm=True, act="relu", rng=make_rng(0))
    layer.eval()
    with no_grad():
        y = layer(Tensor(np.zeros((1, 12, 16, 32), dtype=np.float32)))
    assert y.shape == (1, 24, 32, 32)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 5, 6, 4)).astype(np.float32))
    w = Tensor(np.eye(4, dtype=np.float32).reshape(1, 1, 4, 4))
    np.testing.assert_allclose(ops.conv_transpose2d(x, w, stride=1).data, x.data)


@pytest.mark.parametrize("k,stride", [(5, 2), (4, 2), (3, 2), (5, 1)])
def test_deconv_is_adjoint_of_conv(k, stride):
    rng = np.random.default_rng(3)
    w = rng.standard_normal((k, k, 3, 5))
    x = rng.standard_normal((2, 6, 7, 5))
    y = rng.standard_normal((2, 6 * stride, 7 * stride, 3))
    lhs = np.sum(ops.conv_transpose2d(Tensor(x), Tensor(w), stride=stride).data * y)
    rhs = np.sum(x * ops.conv2d(Tensor(y), Tensor(w), stride=stride).data)
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_lstm_zero_everything():
    x = Tensor(np.zeros((1, 4, 4, 6), dtype=np.float32))
    state = ConvLstmState.zeros(1, 4, 4, 5)
    w = Tensor(np.zeros((3, 3, 11, 20), dtype=np.float32))
    h, new = conv_lstm_step(x, state, w, None)
    assert not h.data.any() and not new.cell.data.any()


def test_conv_lstm_table_row9_geometry():
    cell = ConvLSTMCell(96, 32, rng=make_rng(0))
    with no_grad():
        h, state = cell(Tensor(np.zeros((1, 12, 16, 96), dtype=np.float32)))
    assert h.shape == (1, 12, 16, 32) and state.cell.shape == h.shape


def test_conv_lstm_single_pixel_matches_scalar_lstm():
    rng = np.random.default_rng(4)
    cin, ch = 3, 2
    w = rng.standard_normal((3, 3, cin + ch, 4 * ch)).astype(np.float32)
    b = rng.standard_normal(4 * ch).astype(np.float32)
    xs = rng.standard_normal((3, cin)).astype(np.float32)
    state = ConvLstmState.zeros(1, 1, 1, ch)
    h_ref, c_ref = np.zeros(ch), np.zeros(ch)
    center = w[1, 1].astype(np.float64)
    sig = lambda z: 1 / (1 + np.exp(-z))
    for x in xs:
        h, state = conv_lstm_step(Tensor(x.reshape(1, 1, 1, cin)), state, Tensor(w), Tensor(b))
        z = np.concatenate([x, h_ref]) @ center + b
        i, f, o, g = sig(z[:ch]), sig(z[ch : 2 * ch]), sig(z[2 * ch : 3 * ch]), np.tanh(z[3 * ch :])
        c_ref = f * c_ref + i * g
        h_ref = o * np.tanh(c_ref)
        np.testing.assert_allclose(h.data.reshape(-1), h_ref, atol=1e-5)


def test_conv_lstm_state_mismatch():
    with pytest.raises(ShapeError):
        conv_lstm_step(Tensor(np.zeros((1, 4, 4, 2))), ConvLstmState.zeros(1, 3, 4, 2), Tensor(np.zeros((3, 3, 4, 8))), None)


def test_pool_concat_shapes():
    const = Tensor(np.full((1, 16, 16, 2), 0.7, dtype=np.float32))
    np.testing.assert_allclose(ops.avg_pool(const, 5, 2).data, 0.7, rtol=1e-6)
    frame = Tensor(np.zeros((1, 192, 256, 3), dtype=np.float32))
    assert ops.avg_pool(frame, 5, 8).shape == (1, 24, 32, 3)
    a = Tensor(np.zeros((1, 24, 32, 32)))
    assert ops.concat_channels([a, a]).shape == (1, 24, 32, 64)
    assert ops.crop(Tensor(np.zeros((1, 64, 64, 3))), 32, 32, 32, 32).shape == (1, 32, 32, 3)


def test_batchnorm_inference_identity():
    bn = BatchNorm(4)
    bn.eval()
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 3, 4)).astype(np.float32))
    np.testing.assert_allclose(bn(x).data, x.data, rtol=1e-5, atol=1e-6)


def test_batchnorm_running_stats_momentum():
    bn = BatchNorm(1)
    x = Tensor(np.full((1, 2, 2, 1), 3.0, dtype=np.float32))
    bn(x)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.3)


def test_inference_determinism():
    rng = make_rng(11)
    block = ResBlock(4, rng=rng)
    block.eval()
    x = Tensor(np.random.default_rng(6).standard_normal((1, 8, 8, 4)).astype(np.float32))
    with no_grad():
        a, b = block(x).data, block(x).data
    assert a.tobytes() == b.tobytes()


def test_non_finite_is_an_error():
    x = Tensor(np.array([[[[np.nan]]]], dtype=np.float32))
    with pytest.raises(NonFiniteError):
        ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))


# ---------------------------------------------------------------------------
# backward


def test_linear_loss_gradient_is_input():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    w = Parameter(np.ones((2, 3), dtype=np.float32))
    backward(ops.sum_all(ops.mul(w, Tensor(x))))
    np.testing.assert_array_equal(w.grad, x)


def test_zero_loss_gives_zero_gradients():
    layer = Conv2d(2, 3, 3, rng=make_rng(1))
    out = layer(Tensor(np.random.default_rng(0).standard_normal((1, 4, 4, 2)).astype(np.float32)))
    backward(ops.mul(ops.sum_all(out), 0.0))
    assert all(not p.grad.any() for p in layer.parameters())


def _f64(shape, seed):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)


def _layer_cases():
    f64 = np.float64

    def conv():
        layer = Conv2d(2, 3, 4, stride=2, rng=make_rng(1), act="tanh", dtype=f64)
        x = _f64((2, 6, 6, 2), 1)
        return lambda: random_projection_loss(layer(x)), [x] + layer.parameters()

    def dilated():
        layer = Conv2d(2, 2, 3, dilation=2, rng=make_rng(2), act=None, dtype=f64)
        x = _f64((1, 7, 7, 2), 2)
        return lambda: random_projection_loss(layer(x)), [x] + layer.parameters()

    def deconv():
        layer = Deconv2d(3, 2, 5, stride=2, rng=make_rng(3), act="tanh", dtype=f64)
        x = _f64((1, 3, 4, 3), 3)
        return lambda: random_projection_loss(layer(x)), [x] + layer.parameters()

    def batchnorm():
        bn = BatchNorm(3, dtype=f64)
        bn.gamma.data[:] = [0.5, 1.5, -1.0]
        x = _f64((2, 3, 3, 3), 4)
        return lambda: random_projection_loss(bn(x)), [x, bn.gamma, bn.beta]

    def convlstm():
        cell = ConvLSTMCell(2, 3, rng=make_rng(5), dtype=f64)
        x1, x2 = _f64((1, 4, 4, 2), 5), _f64((1, 4, 4, 2), 6)

        def loss():
            h, s = cell(x1)
            h, s = cell(x2, s)
            return random_projection_loss(ops.add(h, s.cell))

        return loss, [x1, x2] + cell.parameters()

    def pooling():
        x = _f64((1, 9, 9, 2), 7)
        return lambda: random_projection_loss(ops.avg_pool(x, 5, 2)), [x]

    def crop_concat_add():
        a, b = _f64((1, 6, 6, 2), 8), _f64((1, 6, 6, 1), 9)

        def loss():
            joined = ops.concat_channels([a, b, a])
            return random_projection_loss(ops.add(ops.crop(joined, 1, 2, 4, 3), ops.crop(joined, 2, 0, 4, 3)))

        return loss, [a, b]

    def resblock():
        block = ResBlock(3, rng=make_rng(10), dtype=f64)
        x = _f64((2, 5, 5, 3), 10)
        return lambda: random_projection_loss(block(x)), [x] + block.parameters()

    def convblock():
        block = ConvBlock(2, 2, rng=make_rng(11), dtype=f64)
        x = _f64((1, 5, 5, 2), 11)
        return lambda: random_projection_loss(block(x)), [x] + block.parameters()

    def fuse():
        layer = Conv2d(3, 2, 1, rng=make_rng(14), act="hardtanh", dtype=f64)
        x = _f64((1, 4, 4, 3), 14)
        return lambda: random_projection_loss(layer(x)), [x] + layer.parameters()

    def elementwise():
        a, b = _f64((3, 4), 12), _f64((3, 4), 13)
        return lambda: ops.mse(ops.mul(ops.sigmoid(a), ops.tanh(b)), ops.square(b)), [a, b]

    return {
        "conv": conv, "dilated_conv": dilated, "deconv": deconv, "batchnorm": batchnorm,
        "convlstm": convlstm, "pooling": pooling, "crop_concat_add": crop_concat_add,
        "resblock": resblock, "convblock": convblock, "hardtanh_fuse": fuse, "elementwise": elementwise,
    }


LAYER_CASES = _layer_cases()


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_finite_difference_gradients(name):
    loss_fn, tensors = LAYER_CASES[name]()
    assert check_gradients(loss_fn, tensors, eps=1e-3) <= 1e-3


# ---------------------------------------------------------------------------
# optimizer and init


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float32))
    p.grad = np.zeros(2, dtype=np.float32)
    adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([0.5, 0.5, 0.5], dtype=np.float64))
    p.grad = np.array([3.0, -0.01, 200.0])
    adam_step([p], lr=1e-3)
    np.testing.assert_allclose(0.5 - p.data, 1e-3 * np.sign(p.grad), rtol=1e-4)


def test_adam_scalar_quadratic_converges():
    p = Parameter(np.array([3.0], dtype=np.float64))
    for step in range(2000):
        p.grad = None
        backward(ops.sum_all(ops.square(ops.sub(p, 1.25))))
        adam_step([p], lr=1e-2)
        if (p.data[0] - 1.25) ** 2 < 1e-6:
            break
    assert (p.data[0] - 1.25) ** 2 < 1e-6


def test_kaiming_statistics_and_determinism():
    samples = kaiming_init((100_000,), 18, make_rng(3), dtype=np.float64)
    assert abs(samples.var() / (2 / 18) - 1) < 0.05
    assert kaiming_init((100_000,), 2, make_rng(3), dtype=np.float64).std() == pytest.approx(1.0, rel=0.01)
    assert kaiming_init((7, 5), 2, make_rng(42)).tobytes() == kaiming_init((7, 5), 2, make_rng(42)).tobytes()


# ---------------------------------------------------------------------------
# checkpoint


def test_checkpoint_roundtrip_and_hash(tmp_path):
    block = ResBlock(3, rng=make_rng(1))
    block.parameters()[0].m += 0.25
    block.parameters()[0].step = 7
    data = checkpoint.state_from_module(block, {"kind": "resblock"}, with_moments=True)
    path = tmp_path / "model.pmck"
    checkpoint.save(path, data)
    raw = path.read_bytes()
    assert raw[:4] == b"PMCK"
    loaded = checkpoint.load(path)
    other = ResBlock(3, rng=make_rng(2))
    checkpoint.load_into_module(other, loaded)
    for (na, pa), (nb, pb) in zip(block.named_parameters(), other.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    assert other.parameters()[0].step == 7
    assert checkpoint.model_hash(loaded) == checkpoint.model_hash(data)
    assert checkpoint.dumps(loaded) == raw
    plain = checkpoint.state_from_module(block, {"kind": "resblock"})
    assert checkpoint.model_hash(plain) == checkpoint.model_hash(data)


def test_checkpoint_version_mismatch(tmp_path):
    raw = bytearray(checkpoint.dumps(checkpoint.state_from_module(ResBlock(2))))
    raw[4:6] = (99).to_bytes(2, "little")
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.loads(bytes(raw))
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + bytes(raw[4:]))
