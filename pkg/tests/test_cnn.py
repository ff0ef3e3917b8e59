import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from fieldreg.cnn import (
    BicubicResize,
    Conv,
    ConvSpec,
    DenseBlock,
    NetworkSpec,
    Stem,
    bicubic_resize,
    bicubic_resize_adjoint,
    build_network,
    checkpoint_from_bytes,
    checkpoint_read,
    checkpoint_to_bytes,
    checkpoint_write,
    conv2d_forward,
    fr21,
    fr25,
    init_parameters,
    layer_shapes,
    preset,
)
from fieldreg.cnn import layers as L
from fieldreg.errors import BadMagic, CheckpointMismatch, InvalidArgument, InvalidState, TruncatedPayload
from fieldreg.field import Field

from gradcheck import fd_check, toy_spec


def brute_conv(x, k, s, p):
    # direct definition of the strided, padded cross-correlation
    n, h, w, c = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    ho, wo = (h - kh + 2 * p) // s + 1, (w - kw + 2 * p) // s + 1
    out = np.zeros((n, ho, wo, co))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * s : i * s + kh, j * s : j * s + kw, :]
            out[:, i, j] = np.einsum("nabc,ocab->no", patch, k)
    return out


# convolution arithmetic


def test_fig3_arithmetic():
    spec = ConvSpec(3, 3, 1, 1, stride=2, padding=1)
    assert spec.out_hw(5, 5) == (3, 3)
    out = conv2d_forward(Field(np.ones((1, 5, 5))), spec, np.ones((1, 1, 3, 3)))
    assert out.shape == (3, 3, 1)
    assert out.data[0, 1, 1] == 9.0 and out.data[0, 0, 0] == 4.0


def test_scalar_kernel():
    out = conv2d_forward(Field(np.array([[[1.0, 2.0], [3.0, 4.0]]])), ConvSpec(1, 1, 1, 1), np.array([[[[2.0]]]]))
    assert np.array_equal(out.data[0], [[2.0, 4.0], [6.0, 8.0]])


def test_zero_kernel(rng):
    out = conv2d_forward(Field(rng.standard_normal((2, 6, 6))), ConvSpec(3, 3, 2, 3, 1, 1), np.zeros((3, 2, 3, 3)))
    assert not out.data.any()


def test_conv_kernel_shape_checked(rng):
    with pytest.raises(InvalidArgument):
        conv2d_forward(Field(rng.standard_normal((2, 6, 6))), ConvSpec(3, 3, 2, 3), np.zeros((3, 1, 3, 3)))


@pytest.mark.parametrize("k,s,p,h", [(3, 1, 1, 7), (3, 1, 0, 6), (5, 1, 2, 9), (3, 2, 1, 8), (3, 2, 0, 9), (3, 2, 2, 7), (1, 1, 0, 5), (1, 2, 0, 5), (2, 1, 0, 5)])
def test_conv_matches_definition_and_adjoint(rng, k, s, p, h):
    x = rng.standard_normal((2, h, h, 3))
    W = rng.standard_normal((4, 3, k, k))
    y = L.conv2d(x, W, s, p)
    assert np.abs(y - brute_conv(x, W, s, p)).max() < 1e-12
    G = rng.standard_normal(y.shape)
    dx, dk = L.conv2d_backward(G, x, W, s, p)
    # conv is linear in x and in W: <conv(u), G> = <u, dx>, <conv_W(V), G> = <V, dk>
    u = rng.standard_normal(x.shape)
    V = rng.standard_normal(W.shape)
    assert abs((L.conv2d(u, W, s, p) * G).sum() - (u * dx).sum()) < 1e-10
    assert abs((L.conv2d(x, V, s, p) * G).sum() - (V * dk).sum()) < 1e-10


# activation and batch norm


def test_relu_zeroes_negatives():
    out, mask = L.relu(np.array([-2.0, -0.0, 0.0, 1.5]))
    assert np.array_equal(out, [0.0, 0.0, 0.0, 1.5])
    assert mask.tolist() == [False, False, False, True]


def test_bn_constant_batch_gives_beta():
    x = np.full((4, 3, 3, 2), 0.7)
    out, _ = L.batchnorm_train(x, np.ones(2), np.array([0.25, -1.0]))
    assert np.allclose(out[..., 0], 0.25, atol=1e-12) and np.allclose(out[..., 1], -1.0, atol=1e-12)


def test_bn_train_statistics(rng):
    x = 5.0 + 3.0 * rng.standard_normal((4, 5, 5, 3))
    alpha, beta = np.array([2.0, -0.5, 1.0]), np.array([0.1, 0.2, -0.3])
    out, _ = L.batchnorm_train(x, alpha, beta, eps=1e-12)
    assert np.allclose(out.mean(axis=(0, 1, 2)), beta, atol=1e-8)
    assert np.allclose(out.std(axis=(0, 1, 2)), np.abs(alpha), atol=1e-6)


def test_bn_infer_affine(rng):
    a, b = rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((2, 4, 4, 3))
    args = (rng.random(3) + 0.5, rng.standard_normal(3), rng.standard_normal(3), rng.random(3) + 0.1)
    mid = L.batchnorm_infer(0.5 * (a + b), *args)
    assert np.allclose(mid, 0.5 * (L.batchnorm_infer(a, *args) + L.batchnorm_infer(b, *args)), atol=1e-14)


def test_conv_unit_negative_preactivation_zeroed():
    spec = NetworkSpec((3, 3, 1), (Conv(ConvSpec(1, 1, 1, 1)),))
    net = build_network(spec)
    p = init_parameters(net, 0)
    p.view("L0.kernel")[...] = 1.0
    x = -np.ones((2, 1, 3, 3))
    y, _ = net.forward(p, x, train=True)
    assert np.allclose(y, 0.0)  # relu output all zero, BN of a constant -> beta = 0


# dense blocks


def test_dense_channel_law():
    b = DenseBlock(5, 4)
    assert b.layer_in_channels(2, 4) == 14
    assert b.out_channels(2) == 22
    assert DenseBlock(3, 16).out_channels(48) == 96
    for l in range(1, 6):
        assert b.inner(2, l).in_channels == 2 + 4 * (l - 1)


def test_dense_depth_zero_is_identity(rng):
    spec = NetworkSpec((4, 4, 3), (DenseBlock(0, 8),))
    net = build_network(spec)
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(net.forward(init_parameters(net, 0), x)[0], x)


def test_dense_block_concatenates_input(rng):
    spec = NetworkSpec((4, 4, 2), (DenseBlock(2, 3),))
    net = build_network(spec)
    x = rng.standard_normal((2, 2, 4, 4))
    y, _ = net.forward(init_parameters(net, 1), x)
    assert y.shape == (2, 8, 4, 4)
    assert np.array_equal(y[:, :2], x)


# bicubic resize


def test_resize_constant(rng):
    f = Field(np.full((2, 7, 5), 3.25))
    for th, tw in ((17, 17), (3, 9), (31, 31)):
        assert np.abs(bicubic_resize(f, th, tw).data - 3.25).max() <= 1e-12


def test_resize_decoder_chain():
    f = Field(np.ones((1, 17, 17)))
    g = bicubic_resize(bicubic_resize(f, 31, 31), 64, 64)
    assert g.shape == (64, 64, 1)


def _direct_cubic(values, pos, a=-0.5):
    # convolution-sum oracle: sum_k v_k W(pos - k)
    total = 0.0
    for k, v in enumerate(values):
        s = abs(pos - k)
        if s <= 1:
            wk = (a + 2) * s**3 - (a + 3) * s**2 + 1
        elif s < 2:
            wk = a * s**3 - 5 * a * s**2 + 8 * a * s - 4 * a
        else:
            wk = 0.0
        total += v * wk
    return total


def test_resize_reproduces_ramp_interior():
    n_in, n_out = 9, 20
    ramp = 0.3 + 1.7 * np.arange(n_in)
    f = Field(np.broadcast_to(ramp, (1, 4, n_in)).copy())
    out = bicubic_resize(f, 4, n_out).data[0, 0]
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    interior = (np.floor(src) >= 1) & (np.floor(src) + 2 <= n_in - 1)
    assert interior.sum() > 10
    assert np.abs(out[interior] - (0.3 + 1.7 * src[interior])).max() <= 1e-10
    direct = np.array([_direct_cubic(ramp, s) for s in src[interior]])
    assert np.abs(out[interior] - direct).max() <= 1e-12


def test_resize_adjoint_identity(rng):
    u = Field(rng.standard_normal((2, 17, 13)))
    v = Field(rng.standard_normal((2, 31, 29)))
    lhs = (bicubic_resize(u, 31, 29).data * v.data).sum()
    rhs = (u.data * bicubic_resize_adjoint(v, 17, 13).data).sum()
    assert abs(lhs - rhs) <= 1e-10


# specs, presets and shapes


def test_fr21_encoder_chain():
    spec = fr21((64, 64, 1), 1)
    shapes = layer_shapes(spec)
    assert shapes[0] == (64, 64, 1) and shapes[1][:2] == (31, 31) and shapes[3][:2] == (17, 17)
    assert spec.out_shape == (64, 64, 1)
    assert spec.n_convs() == 21


def test_fr25_one2many():
    spec = fr25((64, 64, 1), 3)
    assert spec.out_shape == (64, 64, 3)
    assert spec.n_convs() == 25
    # final block widens 72 -> 144 feature maps
    shapes = layer_shapes(spec)
    assert shapes[-3][2] == 72 and shapes[-2][2] == 144


def test_separate_stem_shapes():
    spec = fr25((64, 64, 2), 2, stem_mode="separate")
    assert layer_shapes(spec)[1] == (31, 31, 64)
    net = build_network(spec)
    assert net.param_shapes["L0.kernel"] == (64, 1, 3, 3)


def test_separate_stem_is_grouped(rng):
    spec = NetworkSpec((5, 5, 2), (Stem(ConvSpec(3, 3, 2, 4, 1, 1), "separate"),))
    net = build_network(spec)
    p = init_parameters(net, 0)
    x = rng.standard_normal((3, 2, 5, 5))
    y0, _ = net.forward(p, x)
    x2 = x.copy()
    x2[:, 1] += 1.0  # touching channel 1 leaves channel-0 features unchanged
    y1, _ = net.forward(p, x2)
    assert np.array_equal(y0[:, :2], y1[:, :2]) and not np.array_equal(y0[:, 2:], y1[:, 2:])


def test_unknown_preset():
    with pytest.raises(InvalidArgument):
        preset("FR99", (16, 16, 1), 1)


def test_shape_validation_names_layer():
    spec = NetworkSpec((8, 8, 1), (Conv(ConvSpec(3, 3, 1, 4, 1, 1)), Conv(ConvSpec(3, 3, 5, 4, 1, 1))))
    with pytest.raises(InvalidArgument, match="layer 1"):
        layer_shapes(spec)
    with pytest.raises(InvalidArgument, match="layer 0"):
        layer_shapes(NetworkSpec((2, 2, 1), (Conv(ConvSpec(5, 5, 1, 1)),)))


layer_st = st.one_of(
    st.tuples(st.just("conv"), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(1, 5)),
    st.tuples(st.just("dense"), st.integers(0, 3), st.integers(1, 4)),
    st.tuples(st.just("resize"), st.integers(1, 12), st.integers(1, 12)),
)


@given(st.integers(4, 12), st.integers(1, 3), st.lists(layer_st, min_size=1, max_size=5))
def test_shape_algebra_property(n, c, raw):
    layers, h, w, ch = [], n, n, c
    for item in raw:
        if item[0] == "conv":
            _, k, s, p, co = item
            layers.append(Conv(ConvSpec(k, k, ch, co, s, p)))
            h, w, ch = (h - k + 2 * p) // s + 1, (w - k + 2 * p) // s + 1, co
        elif item[0] == "dense":
            layers.append(DenseBlock(item[1], item[2]))
            ch = ch + item[1] * item[2]
        else:
            layers.append(BicubicResize(item[1], item[2]))
            h, w = item[1], item[2]
        assume(h >= 1 and w >= 1)
    spec = NetworkSpec((n, n, c), layers)
    assert spec.out_shape == (h, w, ch)
    net = build_network(spec)
    y, _ = net.forward(init_parameters(net, 0), np.random.default_rng(0).standard_normal((2, c, n, n)))
    assert y.shape == (2, ch, h, w)


def test_spec_json_roundtrip():
    spec = fr25((16, 16, 2), 2, "separate")
    assert NetworkSpec.from_json(spec.to_json()) == spec


# network, parameters, tape


def test_init_parameters_contract():
    net = build_network(fr21((64, 64, 1), 1))
    p = init_parameters(net, 4)
    q = init_parameters(net, 4)
    assert np.array_equal(p.values, q.values)
    for name in p.blocks:
        if name.endswith(".alpha"):
            assert np.all(p.view(name) == 1.0)
        if name.endswith(".beta"):
            assert np.all(p.view(name) == 0.0)
    # a large kernel block: sample std near sqrt(2 / fan_in)
    name = max((n for n in p.blocks if n.endswith(".kernel")), key=lambda n: p.view(n).size)
    k = p.view(name)
    assert k.size >= 10_000
    target = np.sqrt(2.0 / np.prod(k.shape[1:]))
    assert abs(k.std() / target - 1.0) < 0.1


def test_gradient_check_two_samples():
    net = build_network(toy_spec())
    p = init_parameters(net, 3)
    x = np.random.default_rng(2).standard_normal((2, 2, 8, 8))
    err_p, err_x, n = fd_check(net, p, x, h=1e-6)
    assert n == net.n_params
    assert err_p <= 1e-6
    assert err_x <= 1e-5


def test_zero_output_grad_gives_zero_grads(rng):
    net = build_network(toy_spec())
    p = init_parameters(net, 0)
    y, tape = net.forward(p, rng.standard_normal((3, 2, 8, 8)), train=True)
    g, dx = net.backward(p, tape, np.zeros_like(y))
    assert not g.any() and not dx.any()


def test_tape_single_use_and_version(rng):
    net = build_network(toy_spec())
    p = init_parameters(net, 0)
    x = rng.standard_normal((2, 2, 8, 8))
    y, tape = net.forward(p, x, train=True)
    net.backward(p, tape, y)
    with pytest.raises(InvalidState):
        net.backward(p, tape, y)
    y, tape = net.forward(p, x, train=True)
    p.bump()
    with pytest.raises(InvalidState):
        net.backward(p, tape, y)
    with pytest.raises(InvalidState):
        net.backward(p, None, y)


def test_inference_is_pure(rng):
    net = build_network(toy_spec())
    p = init_parameters(net, 0)
    x = rng.standard_normal((5, 2, 8, 8))
    a = net.predict(p, x, batch_size=2)
    b = net.predict(p, x, batch_size=2)
    assert a.tobytes() == b.tobytes()
    before = p.stats.copy()
    net.forward(p, x)
    assert np.array_equal(before, p.stats)


def test_running_stats_update(rng):
    spec = NetworkSpec((4, 4, 1), (Conv(ConvSpec(1, 1, 1, 1)),))
    net = build_network(spec)
    p = init_parameters(net, 0)
    p.view("L0.kernel")[...] = 1.0
    x = np.abs(rng.standard_normal((2, 1, 4, 4))) + 0.1
    net.forward(p, x, train=True)
    m = x.mean()
    v = x.var() * 32 / 31
    assert p.stat("L0.mean")[0] == pytest.approx(0.1 * m, rel=1e-12)
    assert p.stat("L0.var")[0] == pytest.approx(0.9 + 0.1 * v, rel=1e-12)


def test_forward_rejects_wrong_batch(rng):
    net = build_network(toy_spec())
    p = init_parameters(net, 0)
    with pytest.raises(InvalidArgument):
        net.forward(p, rng.standard_normal((2, 1, 8, 8)))


# checkpoints


def _ck(seed=0, spec=None):
    net = build_network(spec or toy_spec())
    p = init_parameters(net, seed)
    p.stats[:] = np.random.default_rng(seed).random(p.stats.size)
    return net, p


def test_checkpoint_roundtrip(tmp_path):
    net, p = _ck(1)
    arrays = {"a": np.arange(6.0).reshape(2, 3)}
    checkpoint_write(net.spec, p, tmp_path / "m.frm1", {"epoch": 7}, arrays)
    spec, q, meta, arr = checkpoint_read(tmp_path / "m.frm1", net.spec)
    assert spec == net.spec and meta["epoch"] == 7
    assert q.values.tobytes() == p.values.tobytes() and q.stats.tobytes() == p.stats.tobytes()
    assert np.array_equal(arr["a"], arrays["a"])
    assert checkpoint_to_bytes(spec, q, meta={"epoch": 7}, arrays=arr) == (tmp_path / "m.frm1").read_bytes()


def test_checkpoint_truncated_and_magic():
    net, p = _ck()
    blob = checkpoint_to_bytes(net.spec, p)
    for cut in (3, 10, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises((TruncatedPayload, BadMagic)):
            checkpoint_from_bytes(blob[:cut])
    with pytest.raises(TruncatedPayload):
        checkpoint_from_bytes(blob[:-1])
    with pytest.raises(BadMagic):
        checkpoint_from_bytes(b"XXXX" + blob[4:])


def test_checkpoint_mismatch_names_layer():
    net, p = _ck()
    blob = checkpoint_to_bytes(net.spec, p)
    other = NetworkSpec(net.spec.in_shape, net.spec.layers[:2] + (DenseBlock(2, 4),) + net.spec.layers[3:])
    with pytest.raises(CheckpointMismatch, match="layer 2"):
        checkpoint_from_bytes(blob, other)
