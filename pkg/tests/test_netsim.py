import numpy as np
import pytest

from axsub.mullib import LutMultiplier, MultiplierLibrary, gen_exact, gen_truncated
from axsub.netsim import (BatchNorm2d, Conv2d, Flatten, Linear, ModelError, ModelGraph, ReLU, accuracy, backward,
                          ce_seed, conv_approx, conv_exact_quant, dequantized_weight, fold_batchnorm, forward,
                          layer_shapes, loss_ce)
from axsub.pipeline import prepare_model, sample_subset
from axsub.quant import QuantParams, QuantTensor, dequantize_codes

from conftest import toy_net

X = np.array([[[[1, 2], [3, 1]]]])
W = np.array([[[[1, 0], [2, 1]]]])


def qt(codes, offset=0.0, bits=2):
    return QuantTensor(np.asarray(codes), QuantParams(1.0, offset, bits))


def test_conv_exact_hand_example():
    assert conv_exact_quant(qt(X), qt(W))[0, 0, 0, 0] == pytest.approx(8.0)


def test_conv_weight_offset():
    assert conv_exact_quant(qt(X), qt(W, offset=1.0))[0, 0, 0, 0] == pytest.approx(15.0)


def test_conv_approx_single_entry_error():
    table = np.arange(4)[:, None] * np.arange(4)[None, :]
    table[1, 1] = 0
    mul = LutMultiplier("m11", 2, 2, table, 0.3)
    assert conv_approx(qt(X), qt(W), mul)[0, 0, 0, 0] == pytest.approx(6.0)
    assert conv_approx(qt(X), qt(W), gen_truncated(2, 2, 1))[0, 0, 0, 0] == pytest.approx(6.0)


def test_conv_approx_exact_table_matches():
    rng = np.random.default_rng(3)
    x = qt(rng.integers(0, 16, (2, 3, 6, 6)), offset=-1.5, bits=4)
    w = qt(rng.integers(0, 16, (5, 3, 3, 3)), offset=-7.0, bits=4)
    bias = rng.normal(size=5)
    a = conv_exact_quant(x, w, bias, stride=2, padding=1)
    b = conv_approx(x, w, gen_exact(4, 4), bias, stride=2, padding=1)
    assert np.array_equal(a, b)


def test_affine_expansion_matches_dequantized_conv():
    # integer accumulation plus offset terms equals the float conv of dequantized tensors
    rng = np.random.default_rng(5)
    px, pw = QuantParams(0.07, -0.3, 4), QuantParams(0.02, -0.15, 4)
    xc = rng.integers(0, 16, (2, 2, 5, 5))
    wc = rng.integers(0, 16, (3, 2, 3, 3))
    bias = rng.normal(size=3)
    y = conv_exact_quant(QuantTensor(xc, px), QuantTensor(wc, pw), bias)
    xf = dequantize_codes(xc, px)
    wf = dequantize_codes(wc, pw)
    ref = np.zeros_like(y)
    for i in range(3):
        for j in range(3):
            ref += np.einsum("nchw,oc->nohw", xf[:, :, i:i + 3, j:j + 3], wf[:, :, i, j])
    ref += bias[None, :, None, None]
    assert np.allclose(y, ref, atol=1e-9)


def test_exact_assignment_matches_default():
    model, rng = toy_net(seed=1, bits=4)
    x = rng.normal(size=(4, 2, 5, 5))
    a = forward(model, x).logits
    b = forward(model, x, {0: "exact4x4", 1: "exact4x4", 2: "exact4x4"},
                MultiplierLibrary([gen_exact(4, 4)])).logits
    assert np.array_equal(a, b)


def test_linear_is_one_by_one_map():
    model, rng = toy_net(seed=2, bits=6)
    x = rng.normal(size=(3, 2, 5, 5))
    tr = forward(model, x, retain=True)
    rec = tr.records[2]
    assert rec.out_hw == (1, 1)
    lin = model.mult_layers()[2]
    xin = dequantize_codes(rec.cols[:, 0, :], lin.qx)
    ref = xin @ dequantized_weight(lin).T + lin.bias
    assert np.allclose(tr.logits, ref, atol=1e-9)


def test_forward_deterministic():
    model, rng = toy_net(seed=4)
    x = rng.normal(size=(5, 2, 5, 5))
    lib = MultiplierLibrary([gen_exact(3, 3), gen_truncated(3, 3, 2)])
    a = forward(model, x, {1: "trunc3x3_d2"}, lib).logits
    b = forward(model, x, {1: "trunc3x3_d2"}, lib).logits
    assert np.array_equal(a, b)


def test_assignment_errors():
    model, rng = toy_net(seed=0, bits=3)
    x = rng.normal(size=(1, 2, 5, 5))
    lib = MultiplierLibrary([gen_exact(3, 3), gen_exact(4, 4)])
    with pytest.raises(ModelError, match="unknown multiplier"):
        forward(model, x, {0: "nope"}, lib)
    with pytest.raises(ModelError, match="4x4"):
        forward(model, x, {0: "exact4x4"}, lib)
    with pytest.raises(ModelError, match="layer 7"):
        forward(model, x, {7: "exact3x3"}, lib)


def test_unprepared_and_shape_errors():
    layers = [Conv2d(np.ones((1, 1, 2, 2)), np.zeros(1)), Flatten()]
    model = ModelGraph(layers, 1, (1, 2, 2))
    with pytest.raises(ModelError, match="not prepared"):
        forward(model, np.ones((1, 1, 2, 2)))
    assert forward(model, np.ones((1, 1, 2, 2)), mode="float").logits[0, 0] == 4.0
    with pytest.raises(ModelError, match="input shape"):
        forward(model, np.ones((1, 1, 3, 3)), mode="float")
    with pytest.raises(ValueError):
        forward(model, np.ones((1, 1, 2, 2)), mode="fast")


def test_fold_batchnorm_identity_and_scale():
    rng = np.random.default_rng(0)
    conv = Conv2d(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), 1, 1)
    x = rng.normal(size=(3, 1, 4, 4))
    for gamma, factor in [(1.0, 1.0), (2.0, 2.0)]:
        bn = BatchNorm2d(np.full(2, gamma), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)
        m = ModelGraph([conv, bn, Flatten()], 32, (1, 4, 4))
        folded = fold_batchnorm(m)
        assert len(folded.layers) == 2
        assert np.allclose(folded.layers[0].weight, factor * conv.weight)
        assert np.allclose(forward(folded, x, mode="float").logits, forward(m, x, mode="float").logits, atol=1e-5)


def test_fold_batchnorm_random():
    rng = np.random.default_rng(1)
    conv = Conv2d(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), 1, 0)
    bn = BatchNorm2d(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3), rng.uniform(0.5, 2, 3))
    m = ModelGraph([conv, bn, ReLU(), Flatten()], 3 * 9, (2, 5, 5))
    x = rng.normal(size=(4, 2, 5, 5))
    a = forward(m, x, mode="float").logits
    b = forward(fold_batchnorm(m), x, mode="float").logits
    assert np.abs(a - b).max() <= 1e-5 * max(1.0, np.abs(a).max())


def test_fold_batchnorm_needs_conv():
    m = ModelGraph([BatchNorm2d(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1)), Flatten()], 4, (1, 2, 2))
    with pytest.raises(ModelError):
        fold_batchnorm(m)


def test_loss_ce_examples():
    loss, probs = loss_ce(np.zeros((1, 10)), [3])
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert np.allclose(probs, 0.1)
    z = np.array([[50.0, 0.0, 0.0]])
    assert loss_ce(z, [0])[0] == pytest.approx(0.0, abs=1e-8)
    assert np.isfinite(loss_ce(np.array([[1e4, -1e4]]), [1])[0])


def test_loss_ce_permutation_invariant():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, 6)
    perm = rng.permutation(5)
    inv = np.argsort(perm)
    assert loss_ce(z[:, perm], inv[y])[0] == pytest.approx(loss_ce(z, y)[0], abs=1e-12)


def test_loss_ce_rejects_bad_input():
    with pytest.raises(ValueError, match="out of range"):
        loss_ce(np.zeros((1, 3)), [3])
    with pytest.raises(ValueError, match="finite"):
        loss_ce(np.array([[np.nan, 0.0]]), [0])


def test_ce_seed_is_gradient():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 4))
    y = np.array([0, 2, 3])
    _, p = loss_ce(z, y)
    g = ce_seed(p, y)
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (2, 1)]:
        zp, zm = z.copy(), z.copy()
        zp[i, j] += h
        zm[i, j] -= h
        fd = (loss_ce(zp, y)[0] - loss_ce(zm, y)[0]) / (2 * h)
        assert g[i, j] == pytest.approx(fd, abs=1e-8)


def test_backward_identity_seed():
    # a lone conv with all-ones seed: every output gradient is 1
    conv = Conv2d(np.ones((1, 1, 2, 2)), np.zeros(1), bits_x=4, bits_w=4,
                  qx=QuantParams(0.25, 0.0, 4), qw=QuantParams(0.25, 0.0, 4))
    m = ModelGraph([conv, Flatten()], 4, (1, 3, 3))
    tr = forward(m, np.full((1, 1, 3, 3), 0.5), retain=True)
    g = backward(m, tr, np.ones((1, 4)))
    assert np.all(g.dy[0] == 1.0)
    assert g.dbias[0][0] == 4.0


def test_backward_relu_blocks_negative():
    model, rng = toy_net(seed=6)
    x = rng.normal(size=(2, 2, 5, 5))
    tr = forward(model, x, mode="ste", retain=True)
    g = backward(model, tr, np.ones_like(tr.logits))
    y1 = tr.records[1].y
    assert (y1 <= 0).any() and (y1 > 0).any()
    assert np.all(g.dy[1][y1 <= 0] == 0)
    assert np.any(g.dy[1][y1 > 0] != 0)


def test_backward_weights_finite_difference():
    model, rng = toy_net(seed=7, bits=4)
    x = rng.normal(size=(6, 2, 5, 5))
    y = rng.integers(0, 4, 6)
    tr = forward(model, x, mode="ste", retain=True)
    _, p = loss_ce(tr.logits, y)
    g = backward(model, tr, ce_seed(p, y))
    h = 1e-4
    for k, layer in enumerate(model.mult_layers()):
        w0 = dequantized_weight(layer)
        for idx in [tuple(rng.integers(0, s) for s in layer.weight.shape) for _ in range(4)]:
            flat = np.ravel_multi_index(idx, layer.weight.shape)
            wp, wm = w0.copy().ravel(), w0.copy().ravel()
            wp[flat] += h
            wm[flat] -= h
            lp = loss_ce(forward(model, x, mode="ste", weights={k: wp}).logits, y)[0]
            lm = loss_ce(forward(model, x, mode="ste", weights={k: wm}).logits, y)[0]
            fd = (lp - lm) / (2 * h)
            assert g.dweight[k][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_backward_needs_retained_trace():
    model, rng = toy_net(seed=0)
    tr = forward(model, rng.normal(size=(1, 2, 5, 5)))
    with pytest.raises(ModelError, match="retain"):
        backward(model, tr, np.ones_like(tr.logits))


def test_layer_shapes():
    model, _ = toy_net(seed=0, shape=(2, 7, 7))
    shapes = layer_shapes(model)
    assert [(s.n_out, s.h, s.w) for s in shapes] == [(3, 7, 7), (4, 3, 3), (4, 1, 1)]
    assert shapes[0].mults_per_sample == 3 * 49 * 2 * 9
    assert shapes[2].mults_per_sample == 4 * 36


def test_mixed_bitwidths():
    model, rng = toy_net(seed=8, bits=4)
    x = rng.normal(size=(16, 2, 5, 5))
    mixed = prepare_model(model, x, {0: 8, 1: 4, 2: 2})
    assert [(m.bits_x, m.bits_w) for m in mixed.mult_layers()] == [(8, 8), (4, 4), (2, 2)]
    lib = MultiplierLibrary([gen_exact(8, 8), gen_exact(4, 4), gen_exact(2, 2)])
    a = forward(mixed, x).logits
    b = forward(mixed, x, {0: "exact8x8", 1: "exact4x4", 2: "exact2x2"}, lib).logits
    assert np.array_equal(a, b)


def test_eight_bit_close_to_float(lenet4, float_lenet, digits):
    (xtr, _), (x, y) = digits
    m8 = prepare_model(float_lenet, xtr[sample_subset(len(xtr), 256, 0, 0)], 8)
    af = accuracy(float_lenet, x, y, mode="float")
    a8 = accuracy(m8, x, y)
    assert abs(af - a8) <= 0.5
    assert accuracy(lenet4, x, y) > 90.0


def test_relaxed_layers_keep_quantized_operating_point():
    model, rng = toy_net(seed=6, bits=3)
    x = rng.normal(size=(4, 2, 5, 5))
    ref = forward(model, x).logits
    for k in range(3):
        out = forward(model, x, inject={k: np.zeros(64)}, relax_after=k).logits
        assert np.allclose(out, ref, atol=1e-12)
