import math

import numpy as np
import pytest

from icmpc import autodiff as ad
from icmpc import models as m


def _zero_params(spec, rng=0):
    params = m.init_params(spec, np.random.default_rng(rng))
    for p in params.values():
        p.value[:] = 0.0
    return params


def test_expand_input_examples():
    out = m.expand_input(ad.constant([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.value, [[1.0, 2.0, -1.0, -2.0]])
    zero = m.expand_input(ad.constant(np.zeros((1, 3))))
    np.testing.assert_array_equal(zero.value, np.zeros((1, 6)))


def test_expand_input_negation_columns():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 3))
    out = m.expand_input(ad.constant(x)).value
    np.testing.assert_array_equal(out[:, 3:], -out[:, :3])


def test_positional_encoding_first_rows():
    pe = m.positional_encoding(4, 8)
    np.testing.assert_array_equal(pe[0, 0::2], np.zeros(4))
    np.testing.assert_array_equal(pe[0, 1::2], np.ones(4))
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-12)


def test_positional_encoding_matches_scalar_loop_oracle():
    d_model, length = 8, 4
    expected = np.zeros((length, d_model))
    for t in range(length):
        for i in range(d_model // 2):
            angle = t / (10000.0 ** (2 * i / d_model))
            expected[t, 2 * i] = math.sin(angle)
            expected[t, 2 * i + 1] = math.cos(angle)
    np.testing.assert_allclose(m.positional_encoding(length, d_model), expected, atol=1e-15)


def test_convex_r_softmax_symmetry():
    out = m.convex_r_softmax(ad.constant([0.0, 0.0]), r=3.0, tau=1.0)
    np.testing.assert_allclose(out.value, [0.5, 0.5], atol=1e-15)


def test_convex_r_softmax_analytic():
    out = m.convex_r_softmax(ad.constant([1.0, 0.0]), r=0.0, tau=1.0)
    e = math.e
    np.testing.assert_allclose(out.value, [e / (e + 1.0), 1.0 / (e + 1.0)], atol=1e-12)


def test_convex_r_softmax_r_cancels():
    z = ad.constant([1.0, 0.0])
    a = m.convex_r_softmax(z, r=0.0, tau=1.0).value
    b = m.convex_r_softmax(ad.constant([1.0, 0.0]), r=7.0, tau=1.0).value
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_convex_r_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(2)
    z = rng.normal(scale=5.0, size=(6, 9))
    out = m.convex_r_softmax(ad.constant(z), r=1.0, tau=0.7).value
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-12)
    assert (out > 0.0).all()


def test_convex_r_softmax_rejects_non_finite():
    with pytest.raises(ad.NumericError):
        m.convex_r_softmax(ad.constant([np.inf, 0.0]), r=0.0, tau=1.0)


def _attention_oracle(x, w_x, d_q, d_k, d_v, r, tau, num_heads):
    """Scalar-loop reference for the convex attention layer."""
    t, _ = x.shape
    d_model = w_x.shape[1]
    x_proj = np.zeros((t, d_model))
    for i in range(t):
        for j in range(d_model):
            x_proj[i, j] = sum(x[i, a] * w_x[a, j] for a in range(x.shape[1]))
    q, k, v = x_proj * d_q, x_proj * d_k, x_proj * d_v
    size = d_model // num_heads
    out = np.zeros((t, d_model))
    for h in range(num_heads):
        sl = slice(h * size, (h + 1) * size)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        scores = np.zeros((t, t))
        for i in range(t):
            for j in range(t):
                scores[i, j] = sum(qh[i, a] * kh[j, a] for a in range(size))
        for i in range(t):
            ex = np.array([math.exp((scores[i, j] - r) / tau) for j in range(t)])
            weights = ex / ex.sum()
            for a in range(size):
                out[i, h * size + a] = sum(weights[j] * vh[j, a] for j in range(t))
    return out


def _attn_spec(**kw):
    defaults = dict(architecture="iceot", input_dim=2, d_model=4, d_ff=8,
                    num_heads=1, num_layers=1, sequence_length=3, output_dim=1)
    defaults.update(kw)
    return m.ModelSpec(**defaults)


def test_attention_single_token_is_value_passthrough():
    spec = _attn_spec(sequence_length=1)
    params = m.init_params(spec, np.random.default_rng(3))
    x = np.abs(np.random.default_rng(4).normal(size=(1, 1, 4)))
    out = m.convex_multihead_attention(ad.constant(x), params, spec).value
    v = (x @ params["layer0.w_x"].value) * params["layer0.d_v"].value
    np.testing.assert_allclose(out, v, atol=1e-12)


def test_attention_zero_query_gives_uniform_weights():
    spec = _attn_spec()
    params = m.init_params(spec, np.random.default_rng(6))
    params["layer0.d_q"].value[:] = 0.0
    x = np.random.default_rng(7).normal(size=(1, 3, 4))
    out = m.convex_multihead_attention(ad.constant(x), params, spec).value
    v = (x @ params["layer0.w_x"].value) * params["layer0.d_v"].value
    np.testing.assert_allclose(out, v.mean(axis=1, keepdims=True).repeat(3, axis=1), atol=1e-12)


@pytest.mark.parametrize("num_heads", [1, 2])
def test_attention_matches_scalar_loop_oracle(num_heads):
    spec = _attn_spec(num_heads=num_heads, r=0.3, tau=0.8)
    rng = np.random.default_rng(8 + num_heads)
    params = m.init_params(spec, rng)
    x = rng.normal(size=(3, 4))
    out = m.convex_multihead_attention(ad.constant(x[None]), params, spec).value[0]
    expected = _attention_oracle(x, params["layer0.w_x"].value, params["layer0.d_q"].value,
                                 params["layer0.d_k"].value, params["layer0.d_v"].value,
                                 spec.r, spec.tau, num_heads)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_rejects_negative_constrained_params():
    spec = _attn_spec()
    params = m.init_params(spec, np.random.default_rng(9))
    params["layer0.w_x"].value[0, 0] = -0.1
    with pytest.raises(m.InvariantError):
        m.convex_multihead_attention(ad.constant(np.zeros((1, 3, 4))), params, spec)


def test_attention_non_expansive_in_max_norm():
    spec = _attn_spec(sequence_length=5)
    rng = np.random.default_rng(10)
    for _ in range(20):
        params = m.init_params(spec, rng)
        x = rng.normal(size=(1, 5, 4))
        x_proj = x @ params["layer0.w_x"].value
        v = x_proj * params["layer0.d_v"].value
        out = m.convex_multihead_attention(ad.constant(x), params, spec).value
        assert np.abs(out).max() <= np.abs(v).max() + 1e-12


def test_iceot_block_zero_params_is_identity():
    spec = _attn_spec()
    params = _zero_params(spec)
    x = np.random.default_rng(11).normal(size=(1, 3, 4))
    out = m.iceot_block(ad.constant(x), params, spec).value
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_iceot_block_zero_input_zero_bias_gives_zero():
    spec = _attn_spec()
    params = m.init_params(spec, np.random.default_rng(12))
    for name in ("layer0.ffn_b1", "layer0.ffn_b2"):
        params[name].value[:] = 0.0
    out = m.iceot_block(ad.constant(np.zeros((1, 3, 4))), params, spec).value
    np.testing.assert_allclose(out, np.zeros((1, 3, 4)), atol=1e-15)


def test_iceot_block_matches_composition_of_sub_ops():
    spec = _attn_spec()
    rng = np.random.default_rng(13)
    params = m.init_params(spec, rng)
    x = rng.normal(size=(1, 3, 4))
    out = m.iceot_block(ad.constant(x), params, spec).value
    attn = m.convex_multihead_attention(ad.constant(x), params, spec).value
    x1 = x + attn
    hidden = np.maximum(x1 @ params["layer0.ffn_w1"].value + params["layer0.ffn_b1"].value, 0.0)
    expected = x1 + hidden @ params["layer0.ffn_w2"].value + params["layer0.ffn_b2"].value
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_iceot_forward_zero_params_outputs_zero():
    spec = _attn_spec(sequence_length=3, output_dim=2)
    params = _zero_params(spec)
    out = m.iceot_forward(np.random.default_rng(14).normal(size=(3, 2)), params, spec)
    np.testing.assert_array_equal(out.value, np.zeros(2))


def test_iceot_monotone_on_positive_half():
    spec = _attn_spec(sequence_length=3, output_dim=2)
    rng = np.random.default_rng(15)
    params = m.init_params(spec, rng)
    x = np.abs(rng.normal(size=(3, 2)))
    xhat = np.concatenate([x, np.zeros_like(x)], axis=-1)
    xhat2 = np.concatenate([2.0 * x, np.zeros_like(x)], axis=-1)
    out1 = m.forward_expanded(xhat, params, spec).value
    out2 = m.forward_expanded(xhat2, params, spec).value
    assert (out2 >= out1 - 1e-10).all()


def test_iclstm_cell_zero_params():
    spec = m.ModelSpec("iclstm", input_dim=2, hidden_dim=3, output_dim=1, sequence_length=2)
    params = _zero_params(spec)
    h, c = m.iclstm_cell(ad.constant(np.ones((1, 4))), ad.constant(np.ones((1, 3))),
                         ad.constant(np.ones((1, 3))), params)
    np.testing.assert_array_equal(h.value, np.zeros((1, 3)))
    np.testing.assert_array_equal(c.value, np.zeros((1, 3)))


def test_iclstm_cell_forget_passthrough():
    spec = m.ModelSpec("iclstm", input_dim=2, hidden_dim=3, output_dim=1, sequence_length=2)
    params = _zero_params(spec)
    params["b_f"].value[:] = 1.0  # forces f_t = relu(0 + 1) = 1
    c_prev = np.array([[0.3, -0.4, 2.0]])
    _, c = m.iclstm_cell(ad.constant(np.zeros((1, 4))), ad.constant(np.zeros((1, 3))),
                         ad.constant(c_prev), params)
    np.testing.assert_allclose(c.value, c_prev, atol=1e-15)


def test_iclstm_cell_matches_scalar_loop_oracle():
    spec = m.ModelSpec("iclstm", input_dim=2, hidden_dim=3, output_dim=1, sequence_length=2)
    rng = np.random.default_rng(16)
    params = m.init_params(spec, rng)
    xhat = rng.normal(size=(1, 4))
    h_prev = np.abs(rng.normal(size=(1, 3)))
    c_prev = np.abs(rng.normal(size=(1, 3)))
    h, c = m.iclstm_cell(ad.constant(xhat), ad.constant(h_prev), ad.constant(c_prev), params)

    base = np.zeros(3)
    for j in range(3):
        base[j] = (sum(xhat[0, a] * params["w_x"].value[a, j] for a in range(4))
                   + sum(h_prev[0, a] * params["w_h"].value[a, j] for a in range(3)))
    gates = {g: np.maximum(base * params[f"d_{g}"].value + params[f"b_{g}"].value, 0.0)
             for g in ("f", "i", "o", "c")}
    c_exp = gates["f"] * c_prev[0] + gates["i"] * gates["c"]
    h_exp = gates["o"] * np.maximum(c_exp, 0.0)
    np.testing.assert_allclose(c.value[0], c_exp, atol=1e-12)
    np.testing.assert_allclose(h.value[0], h_exp, atol=1e-12)


def test_icfnn_recurrence_base_case():
    spec = m.ModelSpec("icfnn", input_dim=1, hidden_dim=4, num_layers=1,
                       sequence_length=2, output_dim=1)
    params = m.init_params(spec, np.random.default_rng(17))
    params["b0"].value[:] = 0.0
    x = np.array([[0.7], [-0.2]])
    y = x.ravel()
    z1 = np.maximum(y @ params["w_y0"].value, 0.0)
    expected = z1 @ params["w_z1"].value + y @ params["w_y1"].value + params["b1"].value
    out = m.icfnn_forward(x, params, spec).value
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_icrnn_zero_weights_constant_output():
    spec = m.ModelSpec("icrnn", input_dim=2, hidden_dim=3, sequence_length=4, output_dim=2)
    params = _zero_params(spec)
    out = m.icrnn_forward(np.random.default_rng(18).normal(size=(4, 2)), params, spec).value
    np.testing.assert_array_equal(out, np.zeros(2))


def test_icrnn_matches_scalar_loop_oracle():
    spec = m.ModelSpec("icrnn", input_dim=2, hidden_dim=2, sequence_length=2, output_dim=1)
    rng = np.random.default_rng(19)
    params = m.init_params(spec, rng)
    x = rng.normal(size=(2, 2))
    xhat = np.concatenate([x, -x], axis=-1)
    h_prev, h = np.zeros(2), np.zeros(2)
    u_prev = np.zeros(4)
    for t in range(2):
        u_t = xhat[t]
        h_new = np.maximum(u_t @ params["u"].value + h @ params["w"].value
                           + u_prev @ params["d2"].value, 0.0)
        h_prev, h, u_prev = h, h_new, u_t
    expected = h @ params["v"].value + h_prev @ params["d1"].value + xhat[-1] @ params["d3"].value
    out = m.icrnn_forward(x, params, spec).value
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_lstm_matches_scalar_oracle_two_steps():
    spec = m.ModelSpec("lstm", input_dim=2, hidden_dim=2, sequence_length=2, output_dim=1)
    rng = np.random.default_rng(20)
    params = m.init_params(spec, rng)
    x = rng.normal(size=(2, 2))

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    h, c = np.zeros(2), np.zeros(2)
    for t in range(2):
        f = sig(x[t] @ params["w_f"].value + h @ params["u_f"].value + params["b_f"].value)
        i = sig(x[t] @ params["w_i"].value + h @ params["u_i"].value + params["b_i"].value)
        o = sig(x[t] @ params["w_o"].value + h @ params["u_o"].value + params["b_o"].value)
        g = np.tanh(x[t] @ params["w_c"].value + h @ params["u_c"].value + params["b_c"].value)
        c = f * c + i * g
        h = o * np.tanh(c)
    expected = h @ params["out_w"].value + params["out_b"].value
    np.testing.assert_allclose(m.lstm_forward(x, params, spec).value, expected, atol=1e-12)


def test_eot_forward_shapes_and_head_coverage():
    for heads in (1, 2):
        spec = m.ModelSpec("eot", input_dim=3, d_model=8, d_ff=16, num_heads=heads,
                           num_layers=2, sequence_length=4, output_dim=2)
        params = m.init_params(spec, np.random.default_rng(21))
        out = m.eot_forward(np.random.default_rng(22).normal(size=(5, 4, 3)), params, spec)
        assert out.value.shape == (5, 2)


def test_eot_layer_norm_bounds_activations():
    spec = m.ModelSpec("eot", input_dim=3, d_model=8, d_ff=16, sequence_length=4)
    params = m.init_params(spec, np.random.default_rng(23))
    big = m.eot_forward(1e3 * np.ones((4, 3)), params, spec).value
    assert np.all(np.isfinite(big))


def test_parameter_count_ordering_for_default_specs():
    iceot = m.ModelSpec("iceot", input_dim=15, output_dim=11, sequence_length=12)
    eot = m.ModelSpec("eot", input_dim=15, output_dim=11, sequence_length=12)
    lstm = m.ModelSpec("lstm", input_dim=15, output_dim=11, sequence_length=12)
    counts = {s.architecture: m.param_count(s) for s in (iceot, eot, lstm)}
    assert counts["iceot"] < counts["eot"] < counts["lstm"], counts


def test_forward_gradients_match_finite_differences_small_models():
    rng = np.random.default_rng(24)
    for arch in m.ARCHITECTURES:
        spec = m.ModelSpec(arch, input_dim=2, d_model=4, d_ff=6, hidden_dim=3,
                           sequence_length=3, output_dim=1)
        params = m.init_params(spec, rng)
        x0 = rng.normal(size=(3, 2)) * 0.5

        def f(node):
            return ad.reduce_sum(m.forward(node, params, spec))

        err = ad.finite_diff_check(f, x0)
        assert err < 1e-5, f"{arch}: fd error {err}"


def test_batched_equals_per_sequence():
    rng = np.random.default_rng(25)
    for arch in m.ARCHITECTURES:
        spec = m.ModelSpec(arch, input_dim=2, d_model=4, d_ff=6, hidden_dim=3,
                           sequence_length=3, output_dim=2)
        params = m.init_params(spec, rng)
        batch = rng.normal(size=(4, 3, 2))
        out = m.forward(batch, params, spec).value
        for i in range(4):
            np.testing.assert_allclose(out[i], m.forward(batch[i], params, spec).value,
                                       atol=1e-12)
