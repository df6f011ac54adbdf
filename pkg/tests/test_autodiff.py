"""Autodiff engine: forward examples, gradient oracles, tape discipline."""

import numpy as np
import pytest

from redi import autodiff as ad
from redi.gradcheck import OP_CASES, check_op, corrupted_backward
from redi.optim import OptimizerState, adamw_step, decayed_lr
from redi.rng import Stream

f32 = np.float32


def tensor(values):
    return ad.param(np.asarray(values, f32))


def backward(loss_fn, *tensors):
    with ad.Tape() as tape:
        loss = loss_fn(*tensors)
        tape.backward(loss)
    return loss


# ---------------------------------------------------------------------------
# forward examples


def test_conv2d_all_ones():
    x = tensor(np.ones((1, 1, 3, 3)))
    k = tensor(np.ones((1, 1, 3, 3)))
    assert ad.conv2d(x, k).values.reshape(()) == f32(9.0)


def test_conv2d_identity_kernel():
    x = tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = tensor([[[[1.0]]]])
    assert np.array_equal(ad.conv2d(x, k).values, x.values)


def test_conv2d_matches_loop_oracle():
    st = Stream.from_seed(1)
    x = st.uniform(2 * 5 * 5, -1, 1).reshape(1, 2, 5, 5)
    k = st.uniform(3 * 2 * 3 * 3, -1, 1).reshape(3, 2, 3, 3)
    got = ad.conv2d(ad.constant(x), ad.constant(k), stride=2, padding=1).values
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).astype(np.float64)
    want = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                patch = xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                want[0, o, i, j] = (patch * k[o].astype(np.float64)).sum()
    assert np.abs(got - want).max() < 1e-6


def test_conv2d_shape_mismatch_names_shapes():
    x = tensor(np.ones((1, 2, 4, 4)))
    k = tensor(np.ones((1, 3, 3, 3)))
    with pytest.raises(ValueError, match=r"2.*3|3.*2"):
        ad.conv2d(x, k)


def test_conv2d_transpose_single_tap():
    x = tensor([[[[2.0]]]])
    k = tensor(np.ones((1, 1, 2, 2)))
    out = ad.conv2d_transpose(x, k, stride=2).values
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out, np.full((1, 1, 2, 2), 2.0, f32))


def test_conv_then_transpose_restores_dims():
    x = tensor(np.ones((1, 1, 4, 4)))
    k = tensor(np.ones((1, 1, 2, 2)))
    down = ad.conv2d(x, k, stride=2)
    kt = tensor(np.ones((1, 1, 2, 2)))
    up = ad.conv2d_transpose(down, kt, stride=2)
    assert up.values.shape == (1, 1, 4, 4)


def test_conv_adjoint_identity():
    # <conv(x), y> == <x, conv_transpose(y)> with the same kernel: the
    # transpose op is the exact adjoint of the strided correlation.
    st = Stream.from_seed(3)
    x = st.uniform(2 * 8 * 8, -1, 1).reshape(1, 2, 8, 8)
    k = st.uniform(4 * 2 * 2 * 2, -1, 1).reshape(4, 2, 2, 2)
    cx = ad.conv2d(ad.constant(x), ad.constant(k), stride=2).values
    y = st.uniform(cx.size, -1, 1).reshape(cx.shape)
    xy = ad.conv2d_transpose(ad.constant(y), ad.constant(k), stride=2).values
    lhs = float((cx.astype(np.float64) * y).sum())
    rhs = float((x.astype(np.float64) * xy).sum())
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_relu_and_leaky_examples():
    x = tensor([-1.0, 0.0, 2.0])
    assert np.array_equal(ad.relu(x).values, np.array([0, 0, 2], f32))
    y = tensor([-2.0])
    assert np.allclose(ad.leaky_relu(y, 0.1).values, [-0.2], atol=1e-7)


def test_relu_gradient_zero_in_negative_region():
    x = tensor([-1.0])
    backward(lambda t: ad.sum_axes(ad.relu(t)), x)
    assert x.grad[0] == 0.0


def test_bilinear_upsample_examples():
    const = tensor(np.full((1, 1, 3, 3), 0.7))
    out = ad.bilinear_upsample(const, 3).values
    assert out.shape == (1, 1, 9, 9)
    assert np.allclose(out, 0.7, atol=1e-7)

    x = tensor([[[[0.0, 1.0], [0.0, 1.0]]]])
    assert np.array_equal(ad.bilinear_upsample(x, 1).values, x.values)
    up = ad.bilinear_upsample(x, 2).values
    # source coord = (dst + 0.5)/2 - 0.5, clamped
    want_row = np.array([0.0, 0.25, 0.75, 1.0], f32)
    for r in range(4):
        assert np.allclose(up[0, 0, r], want_row, atol=1e-7)


def test_concat_channels_shapes_and_backward():
    a = tensor(np.ones((1, 2, 4, 4)))
    b = tensor(np.ones((1, 3, 4, 4)))
    out = backward(lambda u, v: ad.sum_axes(ad.concat_channels([u, v])), a, b)
    assert out.values.reshape(()) == f32(5 * 16)
    assert np.array_equal(a.grad, np.ones_like(a.values))
    assert np.array_equal(b.grad, np.ones_like(b.values))
    with pytest.raises(ValueError):
        ad.concat_channels([a, tensor(np.ones((1, 1, 2, 2)))])


def test_avg_pool2_examples():
    ones = tensor(np.ones((1, 1, 2, 2)))
    assert ad.avg_pool2(ones).values.reshape(()) == f32(1.0)
    x = tensor([[[[0.0, 2.0], [4.0, 6.0]]]])
    assert ad.avg_pool2(x).values.reshape(()) == f32(3.0)
    backward(lambda t: ad.sum_axes(ad.avg_pool2(t)), x)
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 0.25, f32))
    with pytest.raises(ValueError, match="even"):
        ad.avg_pool2(tensor(np.ones((1, 1, 3, 3))))


def test_backward_sum_and_norm_examples():
    x = tensor([1.0, -2.0, 3.0])
    backward(lambda t: ad.sum_axes(t), x)
    assert np.array_equal(x.grad, np.ones(3, f32))

    y = tensor([1.0, -2.0, 3.0])
    backward(lambda t: ad.scale(ad.sum_axes(ad.mul(t, t)), 0.5), y)
    assert np.allclose(y.grad, y.values, atol=1e-6)


def test_backward_rejects_non_scalar_loss():
    x = tensor([1.0, 2.0])
    with ad.Tape() as tape:
        out = ad.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out)


def test_tape_single_use():
    x = tensor([2.0])
    with ad.Tape() as tape:
        loss = ad.sum_axes(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)


def test_backward_needs_matching_tape():
    x = tensor([2.0])
    with ad.Tape():
        loss = ad.sum_axes(x)
    with ad.Tape() as other:
        with pytest.raises(ValueError):
            other.backward(loss)


def test_softmax_channels_is_per_location_simplex():
    st = Stream.from_seed(2)
    x = tensor(st.uniform(2 * 4 * 3 * 3, -2, 2).reshape(2, 4, 3, 3))
    s = ad.softmax_channels(x).values
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert (s > 0).all()


def test_softmax_spatial_is_per_channel_simplex():
    st = Stream.from_seed(2)
    x = tensor(st.uniform(2 * 4 * 3 * 3, -2, 2).reshape(2, 4, 3, 3))
    s = ad.softmax_spatial(x).values
    assert np.allclose(s.sum(axis=(2, 3)), 1.0, atol=1e-6)


def test_gram_uniform_feature_map():
    # softmax of constants is uniform 1/c, inner product c * (1/c^2) = 1/c
    x = ad.softmax_channels(tensor(np.zeros((1, 4, 2, 2))))
    g = ad.gram_locations(x).values
    assert g.shape == (1, 4, 4)
    assert np.allclose(g, 0.25, atol=1e-6)


def test_gram_symmetric_and_hand_case():
    # 2 channels, 2 locations: softmax then explicit inner products
    x = tensor(np.array([[[[1.0, 0.0]], [[0.0, 2.0]]]]))  # (1, 2, 1, 2)
    s = ad.softmax_channels(x)
    g = ad.gram_locations(s).values[0]
    v0 = np.array([np.exp(1), np.exp(0)]) / (np.exp(1) + np.exp(0))
    v1 = np.array([np.exp(0), np.exp(2)]) / (np.exp(0) + np.exp(2))
    want = np.array([[v0 @ v0, v0 @ v1], [v1 @ v0, v1 @ v1]])
    assert np.allclose(g, want, atol=1e-6)
    assert np.array_equal(g, g.T)


def test_cosine_distance_map_examples():
    st = Stream.from_seed(4)
    a = st.uniform(3 * 2 * 2, 0.2, 1.0).reshape(1, 3, 2, 2)
    same = ad.cosine_distance_map(ad.constant(a), ad.constant(a.copy())).values
    assert np.abs(same).max() < 1e-6
    flipped = ad.cosine_distance_map(ad.constant(a), ad.constant(-a)).values
    assert np.allclose(flipped, 2.0, atol=1e-6)


def test_cosine_distance_zero_vector_counts_degenerate():
    a = np.zeros((1, 3, 1, 1), f32)
    b = np.ones((1, 3, 1, 1), f32)
    counter = [0]
    d = ad.cosine_distance_map(ad.constant(a), ad.constant(b), counter=counter).values
    assert d.reshape(()) == f32(1.0)
    assert counter[0] == 1


def test_replicate_pad_edges():
    x = tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    p = ad.replicate_pad(x, 1).values[0, 0]
    assert p.shape == (4, 4)
    assert p[0, 0] == 1.0 and p[0, 3] == 2.0 and p[3, 0] == 3.0 and p[3, 3] == 4.0


def test_forward_determinism():
    st = Stream.from_seed(8)
    x = st.uniform(2 * 3 * 8 * 8, -1, 1).reshape(2, 3, 8, 8)
    k = st.uniform(4 * 3 * 3 * 3, -1, 1).reshape(4, 3, 3, 3)
    a = ad.conv2d(ad.constant(x), ad.constant(k), stride=2, padding=1).values
    b = ad.conv2d(ad.constant(x), ad.constant(k), stride=2, padding=1).values
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# finite-difference oracle


def test_every_registered_op_passes_gradcheck():
    for name in sorted(OP_CASES):
        for seed in (0, 1):
            errs = check_op(name, seed)
            worst = max(errs.values())
            assert worst < 1e-3, f"{name} seed {seed}: {worst:.3e}"


def test_corrupted_backward_is_caught():
    with corrupted_backward("conv2d"):
        errs = check_op("conv2d", 0)
    assert max(errs.values()) > 1e-3


def test_composite_graph_gradcheck():
    # conv -> relu -> pool -> scalar, checked against central differences
    errs = check_op("conv2d", 5)
    assert max(errs.values()) < 1e-3


def test_float64_oracle_for_cosine_chain():
    """Engine gradients of deconv -> bias -> cosine against a float64 replica.

    Float32 finite differences are invalid for this chain at realistic
    feature norms; the float64 analytic replica is the trustworthy oracle.
    """
    st = Stream.from_seed(21)
    x = st.uniform(1 * 4 * 2 * 2, -0.5, 0.5).reshape(1, 4, 2, 2)
    w = st.uniform(4 * 3 * 2 * 2, -0.3, 0.3).reshape(4, 3, 2, 2)
    b = st.uniform(3, -0.1, 0.1)
    ref = st.uniform(1 * 3 * 4 * 4, 0.1, 1.0).reshape(1, 3, 4, 4)

    wt = ad.param(w, "w")
    bt = ad.param(b, "b")
    with ad.Tape() as tape:
        y = ad.add_channel_bias(ad.conv2d_transpose(ad.constant(x), wt, stride=2), bt)
        loss = ad.mean_all(ad.cosine_distance_map(y, ad.constant(ref)))
        tape.backward(loss)

    # float64 replica: scatter-style deconv, cosine distance, chain rule
    x64, w64, b64, r64 = (a.astype(np.float64) for a in (x, w, b, ref))
    out = np.zeros((1, 3, 4, 4))
    for ci in range(4):
        for i in range(2):
            for j in range(2):
                out[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] += x64[0, ci, i, j] * w64[ci]
    out += b64[None, :, None, None]

    na = np.sqrt((out**2).sum(axis=1))
    nb = np.sqrt((r64**2).sum(axis=1))
    dot = (out * r64).sum(axis=1)
    cos = dot / (na * nb)
    # d(1 - cos)/d out, averaged over the 16 locations
    g_out = -(r64 / (na * nb)[:, None] - out * (dot / (na**3 * nb))[:, None]) / 16.0
    g_b = g_out.sum(axis=(0, 2, 3))
    g_w = np.zeros_like(w64)
    for ci in range(4):
        for i in range(2):
            for j in range(2):
                g_w[ci] += x64[0, ci, i, j] * g_out[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]

    assert np.abs(wt.grad - g_w).max() < 1e-6
    assert np.abs(bt.grad - g_b).max() < 1e-6


# ---------------------------------------------------------------------------
# optimizer


def make_scalar_param(value):
    p = ad.param(np.array([value], f32), "p")
    return {"p": p}


def test_adamw_zero_grad_zero_decay_is_identity():
    params = make_scalar_param(1.5)
    st = OptimizerState.for_params(params)
    adamw_step(st, params, {"p": np.zeros(1, f32)}, lr=0.1)
    assert params["p"].values[0] == f32(1.5)


def test_adamw_one_step_hand_example():
    # p=1, g=1, lr=0.1: bias-corrected m̂=1, v̂=1, update ≈ lr
    params = make_scalar_param(1.0)
    st = OptimizerState.for_params(params)
    adamw_step(st, params, {"p": np.ones(1, f32)}, lr=0.1)
    assert abs(float(params["p"].values[0]) - 0.9) < 1e-5
    assert st.step == 1


def test_adamw_decoupled_decay():
    params = make_scalar_param(2.0)
    st = OptimizerState.for_params(params, weight_decay=0.5)
    adamw_step(st, params, {"p": np.zeros(1, f32)}, lr=0.1)
    assert params["p"].values[0] == f32(2.0 * (1.0 - 0.1 * 0.5))


def test_adamw_lr_zero_bit_identical():
    params = make_scalar_param(0.731)
    before = params["p"].values.tobytes()
    st = OptimizerState.for_params(params, weight_decay=0.01)
    adamw_step(st, params, {"p": np.ones(1, f32)}, lr=0.0)
    assert params["p"].values.tobytes() == before


def test_adamw_missing_grad_names_parameter():
    params = make_scalar_param(1.0)
    st = OptimizerState.for_params(params)
    with pytest.raises(KeyError, match="p"):
        adamw_step(st, params, {}, lr=0.1)


def test_decayed_lr_schedule():
    marks = (0.4, 0.8)
    lrs = [decayed_lr(1.0, e, 10, marks) for e in range(10)]
    assert lrs == [1.0] * 4 + [0.5] * 4 + [0.25] * 2
