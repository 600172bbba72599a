import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from nas_tracksearch.cost import genome_cost
from nas_tracksearch.engine import (
    BN_EPS,
    EngineError,
    MacCounter,
    MissingStatsError,
    PathStats,
    conv2d,
    forward_tracker,
    instrumented_macs,
    mbconv_forward,
    recalibrate_bn,
    squeeze_excite,
    swish,
    xcorr_depthwise,
)
from nas_tracksearch.space import BranchGenes, Genome, random_genome
from nas_tracksearch.supernet import entry_layout, init_tensor, path_view

RNG = np.random.default_rng(123)


def _entry(layer_id, choice, seed=0):
    return {n: init_tensor(seed, layer_id, choice, n, s) for n, s in entry_layout(layer_id, choice).items()}


def _conv_oracle(x, w, stride):
    """Direct sliding-window convolution, independent of the tap loop."""
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]  # H W C k k
    return np.einsum("hwcij,ijco->hwo", win, w)


def _pair(seed=0):
    r = np.random.default_rng(seed)
    return r.uniform(0, 1, (112, 112, 3)), r.uniform(0, 1, (256, 256, 3))


# -- conv2d -----------------------------------------------------------------


def test_identity_pointwise_conv():
    x = RNG.standard_normal((6, 5, 4))
    assert np.array_equal(conv2d(x, np.eye(4)[None, None], 1), x)


def test_zero_input_gives_zero_output():
    w = RNG.standard_normal((3, 3, 4, 7))
    assert not conv2d(np.zeros((9, 9, 4)), w, 3, 2).any()


def test_depthwise_delta_box_sum():
    x = np.zeros((5, 5, 1))
    x[2, 2, 0] = 1.0
    out = conv2d(x, np.ones((3, 3, 1, 1)), 3, groups=1)
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out[..., 0], expected)
    xc = np.repeat(x, 3, axis=2) * [1.0, 2.0, 3.0]
    out = conv2d(xc, np.ones((3, 3, 1, 3)), 3, groups=3)
    for c in range(3):
        assert np.array_equal(out[..., c], expected * (c + 1))


@pytest.mark.parametrize("k,stride,h,w", [(1, 1, 7, 7), (3, 2, 9, 8), (5, 1, 6, 6), (7, 2, 11, 11)])
def test_conv_matches_direct_oracle(k, stride, h, w):
    x = RNG.standard_normal((h, w, 3))
    wt = RNG.standard_normal((k, k, 3, 5))
    out = conv2d(x, wt, k, stride)
    assert out.shape == (-(-h // stride), -(-w // stride), 5)
    np.testing.assert_allclose(out, _conv_oracle(x, wt, stride), atol=1e-12)


def test_depthwise_matches_oracle():
    x = RNG.standard_normal((10, 10, 4))
    wt = RNG.standard_normal((5, 5, 1, 4))
    dense = np.zeros((5, 5, 4, 4))
    for c in range(4):
        dense[:, :, c, c] = wt[:, :, 0, c]
    np.testing.assert_allclose(conv2d(x, wt, 5, 2, groups=4), _conv_oracle(x, dense, 2), atol=1e-12)


@pytest.mark.parametrize("cin,shape,kernel,groups", [
    (3, (3, 3, 4, 2), 3, 1),  # weight expects 4 input channels
    (4, (3, 3, 4, 4), 5, 1),  # kernel disagrees with weight
    (4, (2, 2, 4, 4), 2, 1),  # even kernel
    (4, (3, 3, 1, 4), 3, 3),  # channels not divisible by groups
])
def test_conv_shape_errors(cin, shape, kernel, groups):
    with pytest.raises(EngineError):
        conv2d(np.zeros((5, 5, cin)), np.zeros(shape), kernel, groups=groups)


def test_conv_counts_dense_macs():
    c = MacCounter()
    conv2d(np.zeros((8, 8, 3)), np.zeros((3, 3, 3, 5)), 3, 2, counter=c)
    assert c.total == 4 * 4 * 5 * 9 * 3


# -- blocks -----------------------------------------------------------------


def _unit(name, entry):
    return {f"{name}.{t[:-6]}": (np.zeros(a.shape[0]), np.ones(a.shape[0]) - BN_EPS)
            for t, a in entry.items() if t.endswith("_bn.gamma")}


def test_mbconv_residual_passthrough_with_zero_projection():
    e = _entry("backbone.3", 1)  # stride 1, 40 -> 40
    e["project"] = np.zeros_like(e["project"])
    x = RNG.standard_normal((8, 8, 40))
    out = mbconv_forward(x, e, 3, 1, _unit("mbconv", e))
    np.testing.assert_array_equal(out, x)


def test_se_saturated_gate_is_identity():
    x = RNG.standard_normal((6, 6, 8))
    w1, b1 = RNG.standard_normal((8, 2)), np.zeros(2)
    w2, b2 = np.zeros((2, 8)), np.full(8, 40.0)
    np.testing.assert_array_equal(squeeze_excite(x, w1, b1, w2, b2), x)


def test_stage_two_first_block_shape():
    e = _entry("backbone.0", 3)
    x = RNG.standard_normal((128, 128, 16))
    assert mbconv_forward(x, e, 5, 2, _unit("mbconv", e)).shape == (64, 64, 24)


def test_block_missing_stats():
    e = _entry("backbone.3", 0)
    stats = _unit("mbconv", e)
    del stats["mbconv.dw_bn"]
    with pytest.raises(MissingStatsError):
        mbconv_forward(RNG.standard_normal((4, 4, 40)), e, 3, 1, stats)


def test_swish_values():
    assert swish(np.array([0.0]))[0] == 0.0
    np.testing.assert_allclose(swish(np.array([2.0])), 2.0 / (1.0 + np.exp(-2.0)))


# -- cross-correlation ------------------------------------------------------


def test_xcorr_zero_exemplar():
    assert not xcorr_depthwise(np.zeros((7, 7, 128)), RNG.standard_normal((16, 16, 128))).any()


def test_xcorr_peak_at_planted_copy():
    ex = RNG.uniform(0.5, 1.5, (7, 7, 128))
    for cy, cx in [(3, 3), (8, 5), (12, 12), (5, 10)]:
        s = np.zeros((16, 16, 128))
        s[cy - 3:cy + 4, cx - 3:cx + 4] = ex
        out = xcorr_depthwise(ex, s)
        flat = out.reshape(256, 128).argmax(axis=0)
        assert np.all(flat == cy * 16 + cx)


def test_xcorr_bilinear():
    ex, s = RNG.standard_normal((7, 7, 16)), RNG.standard_normal((16, 16, 16))
    assert np.array_equal(xcorr_depthwise(2 * ex, s), 2 * xcorr_depthwise(ex, s))


def test_xcorr_matches_brute_force():
    ex, s = RNG.standard_normal((7, 7, 4)), RNG.standard_normal((16, 16, 4))
    sp = np.pad(s, ((3, 3), (3, 3), (0, 0)))
    ref = np.zeros_like(s)
    for y in range(16):
        for x in range(16):
            ref[y, x] = (sp[y:y + 7, x:x + 7] * ex).sum(axis=(0, 1))
    np.testing.assert_allclose(xcorr_depthwise(ex, s), ref, atol=1e-12)


def test_xcorr_errors():
    with pytest.raises(EngineError):
        xcorr_depthwise(np.zeros((7, 7, 8)), np.zeros((16, 16, 4)))
    with pytest.raises(EngineError):
        xcorr_depthwise(np.zeros((6, 6, 4)), np.zeros((16, 16, 4)))


# -- full tracker -----------------------------------------------------------


def test_forward_shapes_and_determinism(store):
    g = random_genome(1)
    calib = [_pair(0), _pair(1)]
    stats = recalibrate_bn(g, store, calib)
    ex, se = _pair(5)
    cls_a, reg_a = forward_tracker(g, store, stats, ex, se)
    cls_b, reg_b = forward_tracker(g, store, stats, ex, se)
    assert cls_a.shape == (16, 16, 1) and reg_a.shape == (16, 16, 4)
    assert np.array_equal(cls_a, cls_b) and np.array_equal(reg_a, reg_b)
    assert np.isfinite(cls_a).all() and np.isfinite(reg_a).all()


def test_all_skip_head(store):
    g = random_genome(2)
    skip = lambda b: BranchGenes(b.channels, b.first_kernel, ["skip"] * 7)  # noqa: E731
    g = Genome(g.backbone, g.output_layer, skip(g.cls), skip(g.reg))
    stats = recalibrate_bn(g, store, [_pair(0)])
    cls_map, reg_map = forward_tracker(g, store, stats, *_pair(3))
    assert cls_map.shape == (16, 16, 1) and reg_map.shape == (16, 16, 4)
    dense = lambda b: BranchGenes(b.channels, b.first_kernel, ["k3"] * 7)  # noqa: E731
    full = Genome(g.backbone, g.output_layer, dense(g.cls), dense(g.reg))
    assert instrumented_macs(g, store) < instrumented_macs(full, store)


def test_forward_requires_stats(store):
    g = random_genome(4)
    with pytest.raises(MissingStatsError):
        forward_tracker(g, store, None, *_pair())
    other = recalibrate_bn(random_genome(5), store, [_pair()])
    with pytest.raises(EngineError):
        forward_tracker(g, store, other, *_pair())


def test_forward_rejects_bad_inputs(store):
    g = random_genome(4)
    stats = recalibrate_bn(g, store, [_pair()])
    ex, se = _pair()
    with pytest.raises(EngineError):
        forward_tracker(g, store, stats, ex[..., :2], se)
    se = se.copy()
    se[0, 0, 0] = np.nan
    with pytest.raises(EngineError):
        forward_tracker(g, store, stats, ex, se)


# -- recalibration ----------------------------------------------------------


def test_recalibration_empty_stream(store):
    with pytest.raises(EngineError):
        recalibrate_bn(random_genome(0), store, [])


def test_recalibration_constant_stream_has_zero_variance(store):
    g = random_genome(6)
    zero = (np.zeros((112, 112, 3)), np.zeros((256, 256, 3)))
    stats = recalibrate_bn(g, store, [zero, zero, zero])
    assert max(float(v.max()) for _, v in stats.layers.values()) <= 1e-9


def test_recalibration_deterministic_and_store_untouched(store):
    g = random_genome(7)
    before = path_view(store, g)["stem"]["conv"].copy()
    a = recalibrate_bn(g, store, [_pair(0), _pair(1)])
    b = recalibrate_bn(g, store, [_pair(0), _pair(1)])
    assert a.layers.keys() == b.layers.keys()
    for k in a.layers:
        assert np.array_equal(a.layers[k][0], b.layers[k][0]) and np.array_equal(a.layers[k][1], b.layers[k][1])
    assert np.array_equal(before, path_view(store, g)["stem"]["conv"])
    assert all((v >= 0).all() for _, v in a.layers.values())


def test_recalibration_matches_hand_moments(store):
    """Stem statistics equal moments computed directly from the two input pairs."""
    g = random_genome(8)
    pairs = [_pair(10), _pair(11)]
    stats = recalibrate_bn(g, store, pairs)
    w = path_view(store, g)["stem"]["conv"].astype(np.float64)
    acts = np.concatenate([_conv_oracle(img, w, 2).reshape(-1, 16) for pair in pairs for img in pair])
    mean, var = stats["stem.bn"]
    np.testing.assert_allclose(mean, acts.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(var, acts.var(axis=0), atol=1e-6)


def test_recalibration_idempotent(store):
    g = random_genome(9)
    pairs = [_pair(20), _pair(21), _pair(22)]
    stats = recalibrate_bn(g, store, pairs)
    trace = {}
    ex = np.stack([e for e, _ in pairs])
    se = np.stack([s for _, s in pairs])
    forward_tracker(g, store, stats, ex, se, trace=trace)
    assert set(trace) == set(stats.layers)
    for name, normed in trace.items():
        flat = np.concatenate([z.reshape(-1, z.shape[-1]) for z in normed])
        assert np.abs(flat.mean(axis=0)).max() < 1e-4, name
        assert np.abs(flat.var(axis=0) - 1).max() < 1e-4, name


def test_missing_stats_lookup():
    with pytest.raises(MissingStatsError):
        PathStats("x")["stem.bn"]


# -- instrumentation --------------------------------------------------------


def test_stem_only_count():
    assert instrumented_macs(random_genome(0), stop_after="stem") == 7_077_888


@pytest.mark.parametrize("seed", range(10))
def test_instrumented_equals_analytic(seed, store):
    g = random_genome(1000 + seed)
    assert instrumented_macs(g, store) == genome_cost(g).macs
