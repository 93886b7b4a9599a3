import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsattn import layers as L
from capsattn import tensor as tc
from capsattn.tensor import ContractError, DimensionError

F64 = np.float64


def t64(x, grad=False):
    return tc.Tensor(np.asarray(x, dtype=F64), requires_grad=grad, dtype=F64)


# --------------------------------------------------------------- conv block


def test_conv_block_zero_params_give_zero_output():
    p = L.ConvBlockParams(t64(np.zeros((1, 1, 6, 128))), t64(np.zeros(128)))
    out = L.conv_block_forward(t64(np.random.default_rng(0).normal(size=(26, 3, 3, 6))), p)
    assert out.shape == (26, 3, 3, 128)
    assert not out.data.any()


def test_conv_block_clamps_negative_preactivations():
    k = np.zeros((1, 1, 2, 2))
    k[0, 0, 0, 0], k[0, 0, 0, 1] = 1.0, -1.0
    p = L.ConvBlockParams(t64(k), t64(np.zeros(2)))
    out = L.conv_block_forward(t64(np.ones((1, 3, 3, 2))), p).data
    assert (out[..., 0] == 1).all() and (out[..., 1] == 0).all()


def test_conv_block_band_mismatch():
    p = L.ConvBlockParams.init(np.random.default_rng(0), 6, 4)
    with pytest.raises(DimensionError):
        L.conv_block_forward(tc.tensor(np.zeros((2, 3, 3, 5))), p)


# ---------------------------------------------------------- primary capsules


def test_primary_caps_table_shape():
    p = L.PrimaryCapsParams.init(np.random.default_rng(0), 3, 3, 128, 1280, 10)
    out = L.primary_caps_forward(tc.tensor(np.zeros((26, 3, 3, 128))), p)
    assert out.shape == (26, 1280, 10)
    assert not out.data.any()


def test_primary_caps_is_relu_of_reshaped_conv():
    rng = np.random.default_rng(1)
    p = L.PrimaryCapsParams(t64(rng.normal(size=(3, 3, 4, 15))), t64(rng.normal(size=15)), 5, 3)
    x = rng.normal(size=(2, 3, 3, 4))
    direct = np.einsum("thwc,hwco->to", x, p.kernel.data) + p.bias.data
    expected = np.maximum(direct, 0).reshape(2, 5, 3)
    np.testing.assert_allclose(L.primary_caps_forward(t64(x), p).data, expected, atol=1e-12)


def test_primary_caps_capsule_count_must_match_kernel():
    with pytest.raises(DimensionError):
        L.PrimaryCapsParams(t64(np.zeros((3, 3, 4, 15))), t64(np.zeros(15)), 4, 3)


# -------------------------------------------------------------------- squash


def test_squash_zero_vector():
    with np.errstate(all="raise"):
        out = L.squash(t64(np.zeros((2, 3))))
    assert not out.data.any()


def test_squash_three_four():
    np.testing.assert_allclose(L.squash(t64([3.0, 4.0])).data, [25 / 26 * 0.6, 25 / 26 * 0.8], atol=1e-12)
    np.testing.assert_allclose(L.squash(t64([3.0, 4.0])).data, [0.576923, 0.769231], atol=1e-6)


def test_squash_bound_and_direction_on_many_vectors():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(10_000, 8))
    v *= (10 ** rng.uniform(-3, 3, (10_000, 1))) / np.linalg.norm(v, axis=1, keepdims=True)
    out = L.squash(t64(v)).data
    n = np.linalg.norm(out, axis=1)
    assert (n < 1).all()
    cos = (out * v).sum(1) / (n * np.linalg.norm(v, axis=1))
    assert (cos >= 1 - 1e-6).all()


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e2), st.floats(1.001, 10.0))
def test_squash_norm_monotone(r, factor):
    d = np.array([0.6, -0.8])
    a = np.linalg.norm(L.squash(t64(r * d)).data)
    b = np.linalg.norm(L.squash(t64(r * factor * d)).data)
    assert b > a
    assert abs(a - r * r / (1 + r * r)) < 1e-12


# ------------------------------------------------------------------- routing


def routing_oracle(u, W, iters):
    """Straight-line routing-by-agreement over python lists."""
    n_in, n_out = len(W), len(W[0])
    uhat = [[[sum(W[i][j][d][k] * u[i][k] for k in range(len(u[i]))) for d in range(len(W[i][j]))]
             for j in range(n_out)] for i in range(n_in)]
    b = [[0.0] * n_out for _ in range(n_in)]
    v = None
    for _ in range(iters):
        c = []
        for i in range(n_in):
            e = [math.exp(x) for x in b[i]]
            c.append([x / sum(e) for x in e])
        v = []
        for j in range(n_out):
            s = [sum(c[i][j] * uhat[i][j][d] for i in range(n_in)) for d in range(len(uhat[0][j]))]
            n2 = sum(x * x for x in s)
            scale = n2 / (1 + n2) / math.sqrt(n2) if n2 > 0 else 0.0
            v.append([x * scale for x in s])
        for i in range(n_in):
            for j in range(n_out):
                b[i][j] += sum(uhat[i][j][d] * v[j][d] for d in range(len(v[j])))
    return v


def test_routing_matches_scripted_oracle():
    W = np.array(
        [
            [[[1.0, 0.5], [0.0, -1.0]], [[0.2, 0.3], [0.7, -0.4]]],
            [[[-0.6, 0.1], [0.9, 0.8]], [[0.5, 0.5], [-0.5, 0.25]]],
        ]
    )
    u = np.array([[0.8, -0.3], [0.4, 1.1]])
    p = L.CapsuleLayerParams(t64(W), routing_iters=3)
    v, trace = L.dynamic_routing(t64(u), p)
    np.testing.assert_allclose(v.data, routing_oracle(u.tolist(), W.tolist(), 3), atol=1e-12)
    assert len(trace.couplings) == 3


def test_routing_single_iteration_uses_uniform_coupling():
    rng = np.random.default_rng(3)
    W, u = rng.normal(size=(5, 4, 3, 2)), rng.normal(size=(5, 2))
    v, trace = L.dynamic_routing(t64(u), L.CapsuleLayerParams(t64(W), routing_iters=1))
    np.testing.assert_allclose(trace.couplings[0], 0.25)
    s = np.einsum("ijdk,ik->jd", W, u) / 4
    n = np.linalg.norm(s, axis=1, keepdims=True)
    np.testing.assert_allclose(v.data, s * n / (1 + n * n), atol=1e-12)


def test_routing_zero_input_gives_zero_output():
    p = L.CapsuleLayerParams.init(np.random.default_rng(0), 6, 3, 4, 4)
    v, _ = L.dynamic_routing(tc.tensor(np.zeros((2, 6, 4))), p)
    assert v.shape == (2, 3, 4) and not v.data.any()


def test_routing_couplings_sum_to_one_every_iteration():
    rng = np.random.default_rng(4)
    p = L.CapsuleLayerParams(t64(rng.normal(size=(7, 5, 3, 4))), routing_iters=4)
    _, trace = L.dynamic_routing(t64(rng.normal(size=(3, 7, 4)) * 3), p)
    for c in trace.couplings:
        np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-6)


def test_routing_iters_must_be_positive():
    with pytest.raises(ContractError):
        L.CapsuleLayerParams(t64(np.zeros((1, 1, 1, 1))), routing_iters=0)


def test_routing_with_frozen_coupling_has_exact_gradients():
    rng = np.random.default_rng(5)
    W, u = t64(rng.normal(size=(3, 2, 2, 3)), grad=True), t64(rng.normal(size=(4, 3, 3)), grad=True)
    p = L.CapsuleLayerParams(W, routing_iters=3)
    _, trace = L.dynamic_routing(u, p)
    frozen = trace.couplings[-1]
    f = lambda: tc.sum(tc.tanh(L.dynamic_routing(u, p, couplings=frozen)[0]))  # noqa: E731
    tc.backward(f(), [W, u])
    for leaf in (W, u):
        numeric = tc.finite_diff_grad(lambda _: f(), leaf, 1e-6)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=1e-4, atol=1e-7)


def test_routing_without_detach_differentiates_through_all_iterations():
    rng = np.random.default_rng(6)
    W, u = t64(rng.normal(size=(3, 2, 2, 3)), grad=True), t64(rng.normal(size=(4, 3, 3)), grad=True)
    p = L.CapsuleLayerParams(W, routing_iters=3)
    f = lambda: tc.sum(tc.tanh(L.dynamic_routing(u, p, detach_logits=False)[0]))  # noqa: E731
    tc.backward(f(), [W, u])
    for leaf in (W, u):
        numeric = tc.finite_diff_grad(lambda _: f(), leaf, 1e-6)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=1e-4, atol=1e-7)


# ---------------------------------------------------------------------- LSTM


def lstm_params(units, n_in, rng=None, zero=False):
    if zero:
        return L.LSTMParams(t64(np.zeros((4 * units, n_in))), t64(np.zeros((4 * units, units))), t64(np.zeros(4 * units)))
    return L.LSTMParams(
        t64(rng.normal(size=(4 * units, n_in)) * 0.5),
        t64(rng.normal(size=(4 * units, units)) * 0.5),
        t64(rng.normal(size=4 * units) * 0.5),
    )


def test_bilstm_zero_weights_give_zero_output():
    p = lstm_params(240, 230, zero=True)
    out = L.bilstm_forward(t64(np.random.default_rng(0).normal(size=(26, 230))), p, p)
    assert out.shape == (26, 480) and not out.data.any()


def test_lstm_forget_bias_only_single_step():
    p = lstm_params(1, 1, zero=True)
    p.bias.data[1] = 1.0
    out = L.lstm_forward(t64([[[1.0]]]), p).data
    # i = o = 0.5, g = tanh(0) = 0, so c = 0 and h = 0.5 * tanh(0)
    assert out.item() == 0.0


def test_lstm_hand_evaluated_two_steps():
    s = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
    w_ih = np.array([[0.5], [-0.3], [0.8], [0.2]])
    w_hh = np.array([[0.1], [0.4], [-0.6], [0.3]])
    b = np.array([0.0, 1.0, 0.1, -0.2])
    p = L.LSTMParams(t64(w_ih), t64(w_hh), t64(b))
    xs, h, c, expected = [1.0, -0.5], 0.0, 0.0, []
    for x in xs:
        z = [w_ih[k, 0] * x + w_hh[k, 0] * h + b[k] for k in range(4)]
        i, f, g, o = s(z[0]), s(z[1]), math.tanh(z[2]), s(z[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        expected.append(h)
    out = L.lstm_forward(t64(np.array(xs).reshape(1, 2, 1)), p).data.ravel()
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_lstm_init_sets_forget_bias_to_one():
    p = L.LSTMParams.init(np.random.default_rng(0), 5, 3)
    np.testing.assert_array_equal(p.bias.data, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


def test_bilstm_reversal_swaps_halves():
    rng = np.random.default_rng(7)
    p = lstm_params(3, 4, rng)
    x = rng.normal(size=(6, 4))
    out = L.bilstm_forward(t64(x), p, p).data
    rev = L.bilstm_forward(t64(x[::-1].copy()), p, p).data
    np.testing.assert_allclose(rev[:, :3], out[::-1, 3:], atol=1e-12)
    np.testing.assert_allclose(rev[:, 3:], out[::-1, :3], atol=1e-12)


def test_bilstm_causality():
    rng = np.random.default_rng(8)
    pf, pb = lstm_params(3, 4, rng), lstm_params(3, 4, rng)
    x = rng.normal(size=(7, 4))
    base = L.bilstm_forward(t64(x), pf, pb).data
    t = 3
    later, earlier = x.copy(), x.copy()
    later[t + 1:] += rng.normal(size=later[t + 1:].shape)
    earlier[:t] += rng.normal(size=earlier[:t].shape)
    np.testing.assert_array_equal(L.bilstm_forward(t64(later), pf, pb).data[: t + 1, :3], base[: t + 1, :3])
    np.testing.assert_array_equal(L.bilstm_forward(t64(earlier), pf, pb).data[t:, 3:], base[t:, 3:])


# ----------------------------------------------------------------- attention


def attention_oracle(h, W, b, u):
    T, D = len(h), len(h[0])
    out, alphas = [], []
    for i in range(T):
        scores = []
        for t in range(T):
            ut = [math.tanh(sum(W[i][d][e] * h[t][e] for e in range(D)) + b[i][d]) for d in range(D)]
            scores.append(sum(ut[d] * u[i][d] for d in range(D)))
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        a = [x / sum(e) for x in e]
        alphas.append(a)
        out.append([sum(a[t] * h[t][d] for t in range(T)) for d in range(D)])
    return out, alphas


def test_attention_matches_scripted_oracle():
    h = [[0.5, -1.0], [1.5, 0.25], [-0.75, 0.8]]
    W = [[[1.0, 0.0], [0.5, -0.5]], [[-0.3, 0.9], [0.2, 0.1]], [[0.0, 1.2], [-1.0, 0.4]]]
    b = [[0.1, -0.1], [0.0, 0.3], [-0.2, 0.05]]
    u = [[1.0, 2.0], [-1.5, 0.5], [0.3, -0.7]]
    s, alpha = L.attention_forward(t64(h), L.AttentionParams(t64(W), t64(b), t64(u)))
    ref_s, ref_a = attention_oracle(h, W, b, u)
    np.testing.assert_allclose(s.data, ref_s, atol=1e-12)
    np.testing.assert_allclose(alpha.data, ref_a, atol=1e-12)


def test_attention_zero_projection_gives_time_mean():
    rng = np.random.default_rng(9)
    T, D = 5, 4
    h = rng.normal(size=(2, T, D))
    p = L.AttentionParams(t64(np.zeros((T, D, D))), t64(np.zeros((T, D))), t64(rng.normal(size=(T, D))))
    s, alpha = L.attention_forward(t64(h), p)
    np.testing.assert_allclose(alpha.data, 1 / T, atol=1e-12)
    np.testing.assert_allclose(s.data, np.repeat(h.mean(axis=1, keepdims=True), T, axis=1), atol=1e-12)


def test_attention_weights_normalised():
    rng = np.random.default_rng(10)
    p = L.AttentionParams.init(rng, 6, 8)
    _, alpha = L.attention_forward(tc.tensor(rng.normal(size=(3, 6, 8))), p)
    np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_with_shared_parameters_gives_identical_rows():
    rng = np.random.default_rng(11)
    T, D = 4, 3
    W, b, u = rng.normal(size=(D, D)), rng.normal(size=D), rng.normal(size=D)
    p = L.AttentionParams(t64(np.tile(W, (T, 1, 1))), t64(np.tile(b, (T, 1))), t64(np.tile(u, (T, 1))))
    s, _ = L.attention_forward(t64(rng.normal(size=(T, D))), p)
    np.testing.assert_allclose(s.data, np.tile(s.data[0], (T, 1)), atol=1e-12)


def test_attention_timestep_mismatch():
    p = L.AttentionParams.init(np.random.default_rng(0), 4, 2)
    with pytest.raises(DimensionError):
        L.attention_forward(tc.tensor(np.zeros((5, 2))), p)


# --------------------------------------------------------------------- dense


def test_dense_identity_linear():
    x = np.random.default_rng(12).normal(size=(26, 7))
    p = L.DenseParams(t64(np.eye(7)), t64(np.zeros(7)))
    np.testing.assert_allclose(L.dense_forward(t64(x), p, "linear").data, x)


def test_dense_shape_chain_and_softmax_rows():
    rng = np.random.default_rng(13)
    d1, d2 = L.DenseParams.init(rng, 480, 512), L.DenseParams.init(rng, 512, 23)
    hid = L.dense_forward(tc.tensor(rng.normal(size=(26, 480))), d1, "relu")
    out = L.dense_forward(hid, d2, "softmax")
    assert hid.shape == (26, 512) and out.shape == (26, 23)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        L.dense_forward(tc.tensor(np.zeros((2, 3))), L.DenseParams.init(np.random.default_rng(0), 4, 2))


# ---------------------------------------------------------------------- loss


def test_cross_entropy_uniform_is_log_k():
    probs = tc.tensor(np.full((26, 23), 1 / 23))
    assert abs(L.cross_entropy_loss(probs, 4, 1.0).item() - math.log(23)) < 1e-5
    assert abs(math.log(23) - 3.1355) < 1e-4


def test_cross_entropy_confident_is_zero():
    probs = np.zeros((5, 3))
    probs[:, 1] = 1.0
    assert abs(L.cross_entropy_loss(tc.tensor(probs), 1).item()) < 1e-8


def test_cross_entropy_linear_in_weight():
    probs = tc.tensor(np.random.default_rng(14).dirichlet(np.ones(4), size=6))
    a = L.cross_entropy_loss(probs, 2, 1.0).item()
    b = L.cross_entropy_loss(probs, 2, 2.0).item()
    assert abs(b - 2 * a) < 1e-6 * abs(a)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        L.cross_entropy_loss(tc.tensor(np.full((2, 3), 1 / 3)), 3)


def test_cross_entropy_batch_is_mean_of_samples():
    rng = np.random.default_rng(15)
    probs = rng.dirichlet(np.ones(4), size=(3, 5))
    labels, weights = [0, 3, 1], [1.0, 0.5, 2.0]
    batch = L.cross_entropy_loss(t64(probs), labels, weights).item()
    single = [L.cross_entropy_loss(t64(probs[i]), labels[i], weights[i]).item() for i in range(3)]
    assert abs(batch - np.mean(single)) < 1e-12
