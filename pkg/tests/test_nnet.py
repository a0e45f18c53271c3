"""Encoder-decoder network: forward oracle, exact gradients, training loop."""

import numpy as np
import pytest

from ctbench.core import ContainerError, Image2D, NumericalError, SliceStack
from ctbench.nnet import (
    HU_SCALE,
    NetSpec,
    SlicePairSet,
    TrainConfig,
    backward,
    build_unet,
    forward,
    infer_volume,
    load_weights,
    loss_mse,
    save_weights,
    train,
)


def small_spec(**kw):
    base = dict(z_channels=1, depth=1, base_channels=4, kernel=3, residual=True)
    base.update(kw)
    return NetSpec(**base)


# ---------------------------------------------------------------- construction

def test_parameter_count_closed_form():
    # depth 1, base 4, Z 1, kernel 3: channel ladder 1 -> 4 -> 8 -> 4 -> 1
    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    want = (conv(1, 4) + conv(4, 4)            # encoder level 0
            + conv(4, 8) + conv(8, 8)          # bottleneck
            + conv(8, 4) + conv(8, 4) + conv(4, 4)   # up, post-concat convs
            + conv(4, 1, k=1))                 # 1x1 output head
    assert want == 1805
    store = build_unet(small_spec(residual=False), seed=0)
    assert store.n_parameters() == want


def test_parameter_count_depth2_z3():
    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    want = (conv(3, 4) + conv(4, 4)
            + conv(4, 8) + conv(8, 8)
            + conv(8, 16) + conv(16, 16)
            + conv(16, 8) + conv(16, 8) + conv(8, 8)
            + conv(8, 4) + conv(8, 4) + conv(4, 4)
            + conv(4, 1, k=1))
    store = build_unet(small_spec(z_channels=3, depth=2), seed=0)
    assert store.n_parameters() == want


def test_build_seed_determinism():
    a = build_unet(small_spec(), seed=3)
    b = build_unet(small_spec(), seed=3)
    c = build_unet(small_spec(), seed=4)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.names())


def test_first_conv_carries_z_channels():
    store = build_unet(small_spec(z_channels=5), seed=0)
    assert store.tensors["enc0.conv1.weight"].shape == (4, 5, 3, 3)
    assert store.tensors["out.weight"].shape == (1, 4, 1, 1)


def test_netspec_validation():
    with pytest.raises(ValueError):
        NetSpec(z_channels=2)  # even Z
    with pytest.raises(ValueError):
        NetSpec(z_channels=-1)
    with pytest.raises(ValueError):
        NetSpec(depth=0)
    with pytest.raises(ValueError):
        NetSpec(base_channels=2)
    with pytest.raises(ValueError):
        NetSpec(kernel=4)


# ---------------------------------------------------------------- forward

def _zero_store(spec):
    store = build_unet(spec, seed=0)
    for name in store.names():
        store.tensors[name] = np.zeros_like(store.tensors[name])
    return store


def test_zero_weights_plain_gives_zero():
    store = _zero_store(small_spec(residual=False))
    x = np.random.default_rng(0).normal(size=(1, 16, 16)).astype(np.float32)
    assert np.all(forward(store, x) == 0.0)


def test_zero_weights_residual_passes_center_slice():
    store = _zero_store(small_spec(z_channels=3))
    x = np.random.default_rng(0).normal(size=(3, 16, 16)).astype(np.float32)
    out = forward(store, x)
    assert np.array_equal(out[0], x[1])


def test_residual_flag_adds_exactly_center_slice():
    x = np.random.default_rng(1).normal(size=(1, 16, 16)).astype(np.float32)
    plain = forward(build_unet(small_spec(residual=False), seed=5), x)
    res = forward(build_unet(small_spec(residual=True), seed=5), x)
    assert np.allclose(res - plain, x[0], atol=1e-6)


def test_forward_shape_checks():
    store = build_unet(small_spec(z_channels=3, depth=2), seed=0)
    with pytest.raises(ValueError):
        forward(store, np.zeros((1, 16, 16)))  # wrong Z
    with pytest.raises(ValueError):
        forward(store, np.zeros((3, 10, 10)))  # 10 not divisible by 4


def conv_ref(x, w, b):
    """Same-padding convolution with explicit loops (oracle)."""
    o, c, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    hh, ww = x.shape[1:]
    y = np.zeros((o, hh, ww))
    for oo in range(o):
        for i in range(hh):
            for j in range(ww):
                acc = 0.0
                for cc in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[cc, i + di, j + dj] * w[oo, cc, di, dj]
                y[oo, i, j] = acc + b[oo]
    return y


def pool_ref(x):
    c, hh, ww = x.shape
    y = np.zeros((c, hh // 2, ww // 2))
    for cc in range(c):
        for i in range(hh // 2):
            for j in range(ww // 2):
                y[cc, i, j] = max(x[cc, 2 * i, 2 * j], x[cc, 2 * i, 2 * j + 1],
                                  x[cc, 2 * i + 1, 2 * j], x[cc, 2 * i + 1, 2 * j + 1])
    return y


def up_ref(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def test_forward_matches_straight_line_oracle():
    spec = small_spec(residual=True)
    store = build_unet(spec, seed=9, dtype=np.float64)
    t = store.tensors
    x = np.random.default_rng(2).normal(size=(1, 16, 16))

    relu = lambda a: np.maximum(a, 0.0)
    h = relu(conv_ref(x, t["enc0.conv1.weight"], t["enc0.conv1.bias"]))
    h = relu(conv_ref(h, t["enc0.conv2.weight"], t["enc0.conv2.bias"]))
    skip = h
    h = pool_ref(h)
    h = relu(conv_ref(h, t["bottleneck.conv1.weight"], t["bottleneck.conv1.bias"]))
    h = relu(conv_ref(h, t["bottleneck.conv2.weight"], t["bottleneck.conv2.bias"]))
    h = up_ref(h)
    h = relu(conv_ref(h, t["dec0.up.weight"], t["dec0.up.bias"]))
    h = np.concatenate([h, skip], axis=0)  # upsampled first, then the skip
    h = relu(conv_ref(h, t["dec0.conv1.weight"], t["dec0.conv1.bias"]))
    h = relu(conv_ref(h, t["dec0.conv2.weight"], t["dec0.conv2.bias"]))
    want = conv_ref(h, t["out.weight"], t["out.bias"]) + x[0:1]

    got = forward(store, x)
    assert np.max(np.abs(got - want)) < 1e-9


# ---------------------------------------------------------------- loss

def test_loss_mse_values():
    a = np.zeros((2, 1, 4, 4))
    assert loss_mse(a, a) == 0.0
    assert loss_mse(a + 3.0, a) == pytest.approx(9.0, rel=1e-15)
    rng = np.random.default_rng(3)
    p = rng.normal(size=(2, 1, 4, 4))
    q = rng.normal(size=(2, 1, 4, 4))
    direct = sum((float(x) - float(y)) ** 2 for x, y in zip(p.flat, q.flat)) / p.size
    assert loss_mse(p, q) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(ValueError):
        loss_mse(p, q[:1])


# ---------------------------------------------------------------- backward

def test_zero_weights_block_all_gradients_but_output_bias():
    spec = small_spec(residual=True)
    store = _zero_store(spec)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 16, 16)).astype(np.float32)
    y = rng.normal(size=(1, 1, 16, 16)).astype(np.float32)
    loss, grads = backward(store, x, y)
    assert loss > 0
    for name, g in grads.items():
        if name == "out.bias":
            assert np.any(g != 0.0)
        else:
            assert np.all(g == 0.0)


def _fd_loss(store, x, y):
    pred = forward(store, x)
    return loss_mse(pred, y)


def test_gradients_match_finite_differences():
    spec = small_spec(residual=True)
    store = build_unet(spec, seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 8, 8))
    y = rng.normal(size=(1, 1, 8, 8))
    _, grads = backward(store, x, y)

    names = store.names()
    sizes = np.array([store.tensors[n].size for n in names])
    total = int(sizes.sum())
    coords = rng.choice(total, size=50, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    step = 1e-5
    worst = 0.0
    for flat in coords:
        layer = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[layer]
        idx = int(flat - offsets[layer])
        t = store.tensors[name]
        orig = t.flat[idx]
        t.flat[idx] = orig + step
        hi = _fd_loss(store, x, y)
        t.flat[idx] = orig - step
        lo = _fd_loss(store, x, y)
        t.flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        an = grads[name].flat[idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-6


def test_duplicated_batch_keeps_gradients():
    spec = small_spec()
    store = build_unet(spec, seed=2, dtype=np.float64)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 1, 8, 8))
    y = rng.normal(size=(1, 1, 8, 8))
    loss1, g1 = backward(store, x, y)
    loss2, g2 = backward(store, np.concatenate([x, x]), np.concatenate([y, y]))
    assert loss2 == pytest.approx(loss1, rel=1e-12)
    for name in g1:
        assert np.allclose(g1[name], g2[name], rtol=1e-12, atol=1e-15)


def test_backward_batch_validation():
    store = build_unet(small_spec(), seed=0)
    with pytest.raises(ValueError):
        backward(store, np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8)))
    with pytest.raises(ValueError):
        backward(store, np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 4, 4)))


def test_non_finite_activation_aborts_with_layer_name():
    store = build_unet(small_spec(), seed=0)
    store.tensors["enc0.conv1.weight"] = np.full_like(
        store.tensors["enc0.conv1.weight"], 3e38)
    x = np.full((1, 1, 8, 8), 1e5, dtype=np.float32)
    with np.errstate(over="ignore"), pytest.raises(NumericalError) as exc:
        backward(store, x, np.zeros((1, 1, 8, 8), dtype=np.float32))
    assert "layer" in str(exc.value)


def test_translation_consistency():
    # cyclic shift by the pooling period shifts the output identically,
    # except inside the receptive-field band fed by the zero-padded borders
    spec = small_spec(residual=False)
    store = build_unet(spec, seed=7, dtype=np.float64)
    x = np.random.default_rng(8).normal(size=(1, 32, 32))
    shift = 2 ** spec.depth
    xs = np.roll(x, (shift, shift), axis=(1, 2))
    out = forward(store, x)[0]
    out_s = forward(store, xs)[0]
    band = 10  # conv radius accumulated across levels, at input resolution
    want = np.roll(out, (shift, shift), axis=(0, 1))
    inner = slice(band + shift, 32 - band - shift)
    assert np.allclose(out_s[inner, inner], want[inner, inner], atol=1e-12)


# ---------------------------------------------------------------- training

def _pair_set(seed=12, n=16):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 120.0, size=(n, n))
    fbp = gaussian_filter(base, 1.0) + rng.normal(0, 25.0, size=(n, n))
    mbir = gaussian_filter(base, 1.5)
    return SlicePairSet(fbp[None, None].astype(np.float32),
                        mbir[None, None].astype(np.float32), ids=("p",))


def test_train_overfits_single_pair():
    pairs = _pair_set()
    final = {}
    for residual in (True, False):
        spec = NetSpec(z_channels=1, depth=1, base_channels=8, residual=residual)
        cfg = TrainConfig(learning_rate=1e-3, epochs=300, batch_size=1, seed=0)
        _, curve = train(pairs, spec, cfg)
        assert curve.shape == (300,)
        final[residual] = curve[-1] / curve[0]
    # both paths drive the loss far below its start
    assert final[True] < 0.01
    assert final[False] < 0.01


def test_train_zero_learning_rate_is_identity():
    pairs = _pair_set()
    spec = NetSpec(z_channels=1, depth=1, base_channels=8)
    cfg = TrainConfig(learning_rate=0.0, epochs=5, batch_size=1, seed=0)
    params, curve = train(pairs, spec, cfg)
    init = build_unet(spec, seed=0)
    for name in init.names():
        assert np.array_equal(params.tensors[name], init.tensors[name])
    assert np.all(curve == curve[0])


def test_train_seed_determinism():
    pairs = _pair_set()
    spec = NetSpec(z_channels=1, depth=1, base_channels=8)
    cfg = TrainConfig(learning_rate=1e-3, epochs=8, batch_size=1, seed=3)
    pa, ca = train(pairs, spec, cfg)
    pb, cb = train(pairs, spec, cfg)
    assert np.array_equal(ca, cb)
    for name in pa.names():
        assert np.array_equal(pa.tensors[name], pb.tensors[name])


def test_train_divergence_aborts():
    pairs = _pair_set()
    spec = NetSpec(z_channels=1, depth=1, base_channels=8)
    cfg = TrainConfig(learning_rate=1e12, epochs=50, batch_size=1, seed=0,
                      optimizer="sgd")
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalError):
        train(pairs, spec, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_slice_pair_set_validation():
    with pytest.raises(ValueError):
        SlicePairSet(np.zeros((2, 1, 8, 8)), np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        SlicePairSet(np.zeros((2, 1, 8, 8)), np.zeros((2, 1, 4, 4)))


# ---------------------------------------------------------------- inference

def _stack(arrs):
    return SliceStack(tuple(Image2D(a.astype(np.float32), 1.0) for a in arrs),
                      slice_spacing=1.0)


def test_infer_z1_is_slicewise_forward():
    store = build_unet(small_spec(), seed=11)
    rng = np.random.default_rng(13)
    vol = [rng.normal(0, 100, size=(16, 16)) for _ in range(4)]
    out = infer_volume(store, _stack(vol))
    assert out.n_slices == 4
    for k in range(4):
        want = forward(store, vol[k][None].astype(np.float32) / HU_SCALE)[0] * HU_SCALE
        assert np.allclose(out.slices[k].values, want, atol=1e-2)


def test_infer_identical_slices_z5():
    store = build_unet(small_spec(z_channels=5), seed=11)
    rng = np.random.default_rng(14)
    one = rng.normal(0, 100, size=(16, 16))
    out = infer_volume(store, _stack([one] * 6))
    first = out.slices[0].values
    for k in range(1, 6):
        assert np.array_equal(out.slices[k].values, first)


def test_infer_z3_window_assembly_and_edges():
    store = build_unet(small_spec(z_channels=3), seed=15)
    rng = np.random.default_rng(16)
    vol = [rng.normal(0, 100, size=(16, 16)) for _ in range(5)]
    out = infer_volume(store, _stack(vol))

    def net(window):
        w = np.stack(window).astype(np.float32) / HU_SCALE
        return forward(store, w)[0] * HU_SCALE

    # interior slice k uses the (k-1, k, k+1) window
    assert np.allclose(out.slices[2].values, net([vol[1], vol[2], vol[3]]), atol=1e-2)
    # boundaries replicate the edge slice
    assert np.allclose(out.slices[0].values, net([vol[0], vol[0], vol[1]]), atol=1e-2)
    assert np.allclose(out.slices[4].values, net([vol[3], vol[4], vol[4]]), atol=1e-2)


def test_infer_rejects_indivisible_grid():
    store = build_unet(small_spec(depth=2), seed=0)
    vol = [np.zeros((10, 10)) for _ in range(3)]
    with pytest.raises(ValueError):
        infer_volume(store, _stack(vol))


# ---------------------------------------------------------------- persistence

def test_weights_round_trip(tmp_path):
    spec = small_spec(z_channels=3, depth=2)
    store = build_unet(spec, seed=21)
    path = tmp_path / "w.ctw"
    save_weights(path, store)
    back = load_weights(path)
    assert repr(back.spec) == repr(spec)  # specs compare by identity
    assert back.names() == store.names()
    for name in store.names():
        assert np.array_equal(back.tensors[name], store.tensors[name])


def test_weights_reject_tampered_header(tmp_path):
    store = build_unet(small_spec(), seed=0)
    path = tmp_path / "w.ctw"
    save_weights(path, store)
    blob = path.read_bytes()
    bad = tmp_path / "bad.ctw"
    bad.write_bytes(b"not-weights" + blob[11:])
    with pytest.raises((ValueError, ContainerError)):
        load_weights(bad)
    short = tmp_path / "short.ctw"
    short.write_bytes(blob[:-20])
    with pytest.raises((ValueError, ContainerError)):
        load_weights(short)
