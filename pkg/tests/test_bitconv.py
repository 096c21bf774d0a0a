import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from _cases import pm1, random_conv_case
from abcnet.activation import binarize
from abcnet.bitconv import (FoldedThreshold, NonBinaryError, apply_folded, approx_conv, binconv2d, bn_apply,
                            estimate_costs, fold_bn_threshold, pack, read_bitplane, reference_binconv, unpack,
                            write_bitplane, xnor_dot)
from abcnet.config import LayerSpec, ModelSpec, small_cnn_spec
from abcnet.tensor import FormatError, ShapeError, conv2d_ref, make_rng


def test_pack_examples():
    bp = pack([1, -1, 1])
    assert int(bp.words[0]) == 0b101 and bp.pad_count == 61
    bp = pack(np.ones(64))
    assert bp.words.size == 1 and int(bp.words[0]) == 2**64 - 1 and bp.pad_count == 0
    bp = pack(-np.ones(65))
    assert bp.words.size == 2 and bp.pad_count == 63 and not bp.words.any()


def test_pack_rejects_non_binary():
    with pytest.raises(NonBinaryError, match=r"element 4 \(index \(1, 1\)\)"):
        pack(np.array([[1, -1, 1], [-1, 0, 1]]))


@given(hnp.array_shapes(min_dims=1, max_dims=4, max_side=9), st.integers(0, 2**32 - 1))
def test_pack_round_trip(shape, seed):
    t = pm1(make_rng(seed), shape)
    bp = pack(t)
    assert np.array_equal(unpack(bp), t)
    assert (int(bp.words[-1]) >> (64 - bp.pad_count) if bp.pad_count else 0) == 0


def test_xnor_dot_examples():
    assert xnor_dot(pack([1, -1, 1]), pack([1, 1, -1])) == -1
    a = pm1(make_rng(1), 130)
    assert xnor_dot(pack(a), pack(a)) == 130
    assert xnor_dot(pack(a), pack(-a)) == -130
    with pytest.raises(ShapeError):
        xnor_dot(pack([1, 1]), pack([1]))


@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_xnor_dot_matches_integer_dot(n, seed):
    rng = make_rng(seed)
    a, b = pm1(rng, n), pm1(rng, n)
    assert xnor_dot(pack(a), pack(b)) == int(np.dot(a.astype(np.int64), b.astype(np.int64)))


@pytest.mark.parametrize("seed", range(200))
def test_binconv_exact(seed):
    x, w, stride, padding = random_conv_case(10_000 + seed)
    got = binconv2d(pack(x), pack(w), stride, padding)
    ref = conv2d_ref(x.astype(np.float64), w.astype(np.float64), stride, padding, pad_value=-1.0)
    assert got.dtype.kind == "i" and np.array_equal(got, ref.astype(np.int64))
    assert np.array_equal(got, reference_binconv(pack(x), pack(w), stride, padding))


def test_binconv_1x1_is_xnor_dot():
    rng = make_rng(2)
    x, w = pm1(rng, (1, 1, 4, 5)), pm1(rng, (1, 1, 1, 1))
    out = binconv2d(pack(x), pack(w))
    for i, j in itertools.product(range(4), range(5)):
        assert out[0, 0, i, j] == xnor_dot(pack(x[0, :, i, j]), pack(w[0, :, 0, 0]))


def test_binconv_all_ones():
    out = binconv2d(pack(np.ones((1, 5, 6, 6))), pack(np.ones((2, 5, 3, 3))))
    assert np.all(out == 45)


def test_binconv_pads_with_minus_one():
    out = binconv2d(pack(np.ones((1, 1, 1, 1))), pack(np.ones((1, 1, 3, 3))), padding=1)
    assert out[0, 0, 0, 0] == 1 - 8


def test_binconv_shape_error():
    with pytest.raises(ShapeError):
        binconv2d(pack(np.ones((1, 2, 4, 4))), pack(np.ones((1, 3, 3, 3))))


def _bank(rng, n_count, shape):
    planes = [pm1(rng, shape) for _ in range(n_count)]
    return planes, rng.uniform(0.2, 2.0, n_count)


@pytest.mark.parametrize("M,N", [(1, 1), (3, 3), (5, 5), (2, 4)])
@pytest.mark.parametrize("channelwise", [False, True])
def test_approx_conv_matches_reconstruction(M, N, channelwise):
    for seed in range(10):
        x, w, stride, padding = random_conv_case(seed)
        rng = make_rng(seed + 99)
        A, betas = _bank(rng, N, x.shape)
        B = [pm1(rng, w.shape) for _ in range(M)]
        alphas = rng.normal(size=(w.shape[0], M) if channelwise else M)
        got = approx_conv([pack(a) for a in A], betas, [pack(b) for b in B], alphas, stride, padding)
        a_ = alphas.T.reshape(M, -1, 1, 1, 1) if channelwise else alphas.reshape(M, 1, 1, 1, 1)
        W = (a_ * np.stack(B)).sum(axis=0)
        X = sum(b * a.astype(np.float64) for b, a in zip(betas, A))
        ref = conv2d_ref(X, W, stride, padding, pad_value=-float(np.sum(betas)))
        np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9 * np.abs(ref).max())


def test_approx_conv_degenerate_cases():
    rng = make_rng(5)
    x, w = pm1(rng, (1, 3, 6, 6)), pm1(rng, (4, 3, 3, 3))
    single = approx_conv([pack(x)], [1.0], [pack(w)], [1.0])
    assert np.array_equal(single, binconv2d(pack(x), pack(w)).astype(float))
    zero = approx_conv([pack(x), pack(-x)], [1.0, 2.0], [pack(w)] * 2, [0.0, 0.0])
    assert not zero.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, -4.0, 0.125]))
def test_approx_conv_bilinear_in_alpha(seed, c):
    rng = make_rng(seed)
    x, w = pm1(rng, (1, 2, 5, 5)), [pm1(rng, (3, 2, 3, 3)) for _ in range(2)]
    alphas, betas = rng.normal(size=2), rng.uniform(0.1, 1, 2)
    A = [pack(x), pack(pm1(rng, x.shape))]
    base = approx_conv(A, betas, [pack(b) for b in w], alphas)
    assert np.array_equal(approx_conv(A, betas, [pack(b) for b in w], c * alphas), c * base)


def test_partial_sums_order_independent():
    rng = make_rng(6)
    A = [pm1(rng, (1, 3, 6, 6)) for _ in range(3)]
    B = [pm1(rng, (2, 3, 3, 3)) for _ in range(3)]
    alphas, betas = rng.normal(size=3), rng.normal(size=3)
    parts = [alphas[m] * betas[n] * binconv2d(pack(A[n]), pack(B[m])).astype(float)
             for m in range(3) for n in range(3)]
    total = approx_conv([pack(a) for a in A], betas, [pack(b) for b in B], alphas)
    for order in (range(9), reversed(range(9)), rng.permutation(9)):
        np.testing.assert_allclose(sum(parts[i] for i in order), total, atol=1e-6)


def test_fold_examples():
    f = fold_bn_threshold([2.0], [0.1], 0.2)
    assert f.polarity[0] == 1 and f.thresholds[0] == pytest.approx(0.1, abs=1e-15)
    f = fold_bn_threshold([1.0], [0.0], 0.0)
    assert f.thresholds[0] == 0.5 and f.polarity[0] == 1
    f = fold_bn_threshold([-1.0], [0.0], 0.0)
    assert f.thresholds[0] == -0.5 and f.polarity[0] == -1
    R = np.array([-0.6, -0.5, -0.4]).reshape(1, 1, 3)
    assert apply_folded(R, f).ravel().tolist() == [1, 1, -1]
    with pytest.raises(ValueError, match="zero"):
        fold_bn_threshold([1.0, 0.0], [0.0, 0.0], 0.0)


def test_fold_boundary_point_fires():
    f = fold_bn_threshold([0.7, -1.3], [0.05, 0.2], 0.3)
    R = f.thresholds.reshape(1, 2, 1)
    assert np.all(apply_folded(R, f) == 1)
    below = np.nextafter(f.thresholds, -f.polarity * np.inf).reshape(1, 2, 1)
    assert np.all(apply_folded(below, f) == -1)


def test_fold_identity_bn():
    R = make_rng(7).normal(size=(4, 3, 5, 5))
    f = fold_bn_threshold(np.ones(3), np.zeros(3), 0.3)
    assert np.array_equal(apply_folded(R, f), binarize(R, 0.3))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 5) | st.floats(-5, -0.05), st.floats(-2, 2), st.floats(-3, 3))
def test_fold_matches_unfolded(a, b, v):
    f = fold_bn_threshold([a], [b], v)
    t = f.thresholds[0]
    R = np.concatenate([np.linspace(t - 3, t + 3, 2001), [t, np.nextafter(t, -np.inf), np.nextafter(t, np.inf)]])
    R = R.reshape(1, 1, -1)
    assert np.array_equal(apply_folded(R, f), binarize(bn_apply(R, [a], [b]), v))


def test_apply_folded_channel_mismatch():
    f = FoldedThreshold(np.zeros(2), np.ones(2, np.int8))
    with pytest.raises(ShapeError):
        apply_folded(np.zeros((1, 3, 2, 2)), f)


def test_bitplane_io():
    bp = pack(pm1(make_rng(8), (3, 2, 5)))
    f = io.BytesIO()
    write_bitplane(f, bp)
    raw = f.getvalue()
    assert raw[:4] == b"ABCB"
    back = read_bitplane(io.BytesIO(raw))
    assert back.dims == bp.dims and np.array_equal(back.words, bp.words)
    with pytest.raises(FormatError, match="magic"):
        read_bitplane(io.BytesIO(b"ABCX" + raw[4:]))
    with pytest.raises(FormatError, match="truncated"):
        read_bitplane(io.BytesIO(raw[:-1]))
    dirty = bytearray(raw)
    dirty[-1] |= 0x80
    with pytest.raises(FormatError, match="padding"):
        read_bitplane(io.BytesIO(bytes(dirty)))


def _conv_spec(M, N, c_in=8):
    layers = [LayerSpec("activation", N=N), LayerSpec("conv", out_channels=16, kernel=3, padding=1, M=M)]
    return ModelSpec((c_in, 8, 8), 16, layers + [LayerSpec("flatten"), LayerSpec("dense", units=16)])


def test_costs_memory_ratio_m1():
    rep = estimate_costs(small_cnn_spec(preset="m1n1"))
    assert all(r["memory_ratio"] == 32.0 for r in rep["layers"] if r["kind"] == "conv")
    assert rep["total"]["memory_ratio_binary_layers"] == 32.0


@pytest.mark.parametrize("M,N,expected", [(3, 3, 9), (5, 5, 25), (1, 1, 1), (2, 3, 6)])
def test_costs_binconvs(M, N, expected):
    row = estimate_costs(_conv_spec(M, N))["layers"][0]
    assert row["binconvs"] == expected
    assert row["xnor_words"] == expected * 16 * 8 * 8 * 2  # 72 products -> 2 words
    assert row["float_mults"] + row["float_mults_avoided"] == 16 * 8 * 8 * 72
    assert row["memory_ratio"] == pytest.approx(32 / M)


def test_costs_dense_only():
    spec = ModelSpec((1, 4, 4), 3, [LayerSpec("flatten"), LayerSpec("dense", units=3)])
    rep = estimate_costs(spec)
    assert rep["total"]["binconvs"] == 0 and rep["total"]["memory_ratio_model"] == 1.0
