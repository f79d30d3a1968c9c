"""Forward passes for the six sequence architectures.

Four input-convex models (iceot, iclstm, icrnn, icfnn) keep their
multiplicative weights non-negative and their activations convex and
non-decreasing, so each output coordinate is a convex function of the
(flattened) input sequence. The expanded input [x, -x] restores the
ability to model non-monotone maps. Two unconstrained baselines (eot,
lstm) use standard softmax attention with layer normalization and
sigmoid/tanh gating; they are deliberately non-convex negative controls.

Every forward accepts a single sequence (T, d_in) or a batch (B, T, d_in)
and returns a Node of shape (output_dim,) or (B, output_dim).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter

ARCHITECTURES = ("iceot", "iclstm", "eot", "lstm", "icfnn", "icrnn")
CONVEX_ARCHITECTURES = ("iceot", "iclstm", "icfnn", "icrnn")
EXPANDED_INPUT_ARCHITECTURES = ("iceot", "iclstm", "icrnn")

_LN_EPS = 1e-5


class InvariantError(Exception):
    """A constrained parameter violates its invariant at forward time."""


@dataclass
class ModelSpec:
    """Architecture selector plus the hyperparameters that size it.

    d_model/d_ff/num_heads/num_layers govern the encoder variants,
    hidden_dim the recurrent and feed-forward ones. r and tau are the
    threshold and temperature of the convex attention-weight operator.
    """

    architecture: str
    input_dim: int
    output_dim: int = 1
    sequence_length: int = 12
    d_model: int = 64
    d_ff: int = 128
    num_heads: int = 1
    num_layers: int = 1
    hidden_dim: int = 128
    r: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for field in ("input_dim", "output_dim", "sequence_length", "d_model",
                      "d_ff", "num_heads", "num_layers", "hidden_dim"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# initialization

def _nonneg(rng, shape, scale) -> np.ndarray:
    return np.abs(rng.normal(0.0, scale, size=shape))


def _dense(rng, shape) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def init_params(spec: ModelSpec, rng) -> dict[str, Parameter]:
    """Fresh parameter set for ``spec``; non-negativity flags set per
    architecture so the optimizer knows what to project."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    d_in, d_m, d_ff = spec.input_dim, spec.d_model, spec.d_ff
    hid, d_out = spec.hidden_dim, spec.output_dim
    p: dict[str, Parameter] = {}

    def nn(name, shape, scale):
        p[name] = Parameter(name, _nonneg(rng, shape, scale), non_negative=True)

    def free(name, shape):
        p[name] = Parameter(name, _dense(rng, shape))

    def bias(name, shape):
        p[name] = Parameter(name, np.zeros(shape))

    if spec.architecture == "iceot":
        # Non-negative stacks amplify multiplicatively, so scales are tuned
        # for roughly unit per-layer gain and a small output head: an
        # oversized head gets slammed into the zero clamp early in training
        # and the whole constrained path loses its gradient.
        nn("embed_w", (2 * d_in, d_m), 1.0 / np.sqrt(2 * d_in))
        bias("embed_b", (d_m,))
        for layer in range(spec.num_layers):
            pre = f"layer{layer}."
            nn(pre + "w_x", (d_m, d_m), 1.0 / d_m)
            nn(pre + "d_q", (d_m,), 1.0)
            nn(pre + "d_k", (d_m,), 1.0)
            nn(pre + "d_v", (d_m,), 1.0)
            nn(pre + "ffn_w1", (d_m, d_ff), 1.0 / d_m)
            bias(pre + "ffn_b1", (d_ff,))
            nn(pre + "ffn_w2", (d_ff, d_m), 1.0 / d_ff)
            bias(pre + "ffn_b2", (d_m,))
        nn("out_w", (d_m, d_out), 0.2 / d_m)
        bias("out_b", (d_out,))
    elif spec.architecture == "iclstm":
        # Hidden recurrence sits deliberately near unit per-step gain: relu
        # gates are unbounded above, which is the long-sequence failure mode.
        nn("w_x", (2 * d_in, hid), 1.0 / np.sqrt(2 * d_in))
        nn("w_h", (hid, hid), 1.4 / hid)
        for gate in ("f", "i", "o", "c"):
            nn(f"d_{gate}", (hid,), 1.0)
            bias(f"b_{gate}", (hid,))
        nn("out_w", (hid, d_out), 0.2 / hid)
        bias("out_b", (d_out,))
    elif spec.architecture == "icrnn":
        nn("u", (2 * d_in, hid), 1.0 / np.sqrt(2 * d_in))
        nn("w", (hid, hid), 1.0 / hid)
        nn("d2", (2 * d_in, hid), 1.0 / np.sqrt(2 * d_in))
        nn("v", (hid, d_out), 0.2 / hid)
        nn("d1", (hid, d_out), 0.2 / hid)
        nn("d3", (2 * d_in, d_out), 0.2 / (2 * d_in))
    elif spec.architecture == "icfnn":
        # z_{i+1} = g(Wz_i z_i + Wy_i y + b_i), z_0 = 0; hidden-to-hidden
        # weights are the constrained ones, input taps stay free.
        flat = spec.sequence_length * d_in
        free("w_y0", (flat, hid))
        bias("b0", (hid,))
        for i in range(1, spec.num_layers):
            nn(f"w_z{i}", (hid, hid), 1.0 / hid)
            free(f"w_y{i}", (flat, hid))
            bias(f"b{i}", (hid,))
        nn(f"w_z{spec.num_layers}", (hid, d_out), 1.0 / np.sqrt(hid))
        free(f"w_y{spec.num_layers}", (flat, d_out))
        bias(f"b{spec.num_layers}", (d_out,))
    elif spec.architecture == "lstm":
        for gate in ("f", "i", "o", "c"):
            free(f"w_{gate}", (d_in, hid))
            free(f"u_{gate}", (hid, hid))
            bias(f"b_{gate}", (hid,))
        free("out_w", (hid, d_out))
        bias("out_b", (d_out,))
    elif spec.architecture == "eot":
        free("embed_w", (d_in, d_m))
        bias("embed_b", (d_m,))
        for layer in range(spec.num_layers):
            pre = f"layer{layer}."
            for proj in ("w_q", "w_k", "w_v", "w_o"):
                free(pre + proj, (d_m, d_m))
                bias(pre + proj.replace("w", "b"), (d_m,))
            for ln in ("ln1", "ln2"):
                p[pre + ln + "_g"] = Parameter(pre + ln + "_g", np.ones(d_m))
                bias(pre + ln + "_b", (d_m,))
            free(pre + "ffn_w1", (d_m, d_ff))
            bias(pre + "ffn_b1", (d_ff,))
            free(pre + "ffn_w2", (d_ff, d_m))
            bias(pre + "ffn_b2", (d_m,))
        free("out_w", (d_m, d_out))
        bias("out_b", (d_out,))
    return p


def param_count(spec: ModelSpec) -> int:
    params = init_params(spec, np.random.default_rng(0))
    return sum(p.value.size for p in params.values())


def _check_nonneg(params: dict[str, Parameter]) -> None:
    for p in params.values():
        if p.non_negative and p.value.size and p.value.min() < 0.0:
            raise InvariantError(f"constrained parameter {p.name!r} has negative entries")


# ---------------------------------------------------------------------------
# shared pieces

def expand_input(x) -> Node:
    """Row-wise concatenation [x, -x] along the feature axis."""
    x = ad.as_node(x)
    return ad.concat([x, ad.neg(x)], axis=-1)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), odd columns cos."""
    pe = np.zeros((length, d_model))
    positions = np.arange(length, dtype=np.float64)[:, None]
    half = np.arange(0, d_model, 2, dtype=np.float64)
    angle = positions / np.power(10000.0, half / d_model)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : pe[:, 1::2].shape[1]]
    return pe


def convex_r_softmax(z, r: float, tau: float) -> Node:
    """exp((z_i - r)/tau) normalized over the last axis.

    Computed with the usual max-subtraction for stability. The threshold r
    cancels algebraically in the ratio; it is applied anyway so the operator
    is exactly the published form, and kept as a configuration knob.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = ad.as_node(z)
    if not np.all(np.isfinite(z.value)):
        raise ad.NumericError("attention scores are not finite")
    shifted = ad.scale(ad.sub(z, ad.constant(np.float64(r))), 1.0 / tau)
    m = ad.reduce_max(shifted, axis=-1, keepdims=True)
    e = ad.exp(ad.sub(shifted, m))
    return ad.div(e, ad.reduce_sum(e, axis=-1, keepdims=True))


def _softmax(z, scale_factor: float) -> Node:
    z = ad.scale(z, scale_factor)
    m = ad.reduce_max(z, axis=-1, keepdims=True)
    e = ad.exp(ad.sub(z, m))
    return ad.div(e, ad.reduce_sum(e, axis=-1, keepdims=True))


def _heads(node: Node, num_heads: int, d_model: int):
    size = d_model // num_heads
    return [ad.narrow(node, -1, h * size, size) for h in range(num_heads)]


def convex_multihead_attention(x: Node, params, spec: ModelSpec, layer: int = 0) -> Node:
    """Shared non-negative projection, diagonal Q/K/V scalings, then
    row-stochastic mixing of the values. Bidirectional: no causal mask."""
    _check_nonneg(params)
    pre = f"layer{layer}."
    leaf = {k: params[pre + k].leaf() for k in ("w_x", "d_q", "d_k", "d_v")}
    x_proj = ad.matmul(x, leaf["w_x"])
    q = ad.mul(x_proj, leaf["d_q"])  # diagonal scaling == column-wise product
    k = ad.mul(x_proj, leaf["d_k"])
    v = ad.mul(x_proj, leaf["d_v"])
    outputs = []
    for qh, kh, vh in zip(_heads(q, spec.num_heads, spec.d_model),
                          _heads(k, spec.num_heads, spec.d_model),
                          _heads(v, spec.num_heads, spec.d_model)):
        weights = convex_r_softmax(ad.matmul(qh, ad.transpose(kh)), spec.r, spec.tau)
        outputs.append(ad.matmul(weights, vh))
    return outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=-1)


def iceot_block(x: Node, params, spec: ModelSpec, layer: int = 0) -> Node:
    """Attention and feed-forward sublayers with residuals; no normalization."""
    pre = f"layer{layer}."
    x1 = ad.add(x, convex_multihead_attention(x, params, spec, layer))
    hidden = ad.relu(ad.add(ad.matmul(x1, params[pre + "ffn_w1"].leaf()),
                            params[pre + "ffn_b1"].leaf()))
    ffn = ad.add(ad.matmul(hidden, params[pre + "ffn_w2"].leaf()),
                 params[pre + "ffn_b2"].leaf())
    return ad.add(x1, ffn)


def _ensure_batched(x) -> tuple[Node, bool]:
    x = ad.as_node(x)
    if x.value.ndim == 2:
        return ad.reshape(x, (1,) + x.value.shape), True
    if x.value.ndim == 3:
        return x, False
    raise ad.ShapeError(f"expected (T, d) or (B, T, d) input, got {x.value.shape}")


def _last_token(h: Node) -> Node:
    t = h.value.shape[1]
    last = ad.narrow(h, 1, t - 1, 1)
    return ad.reshape(last, (h.value.shape[0], h.value.shape[2]))


def _output(out: Node, squeeze: bool) -> Node:
    return ad.reshape(out, (out.value.shape[-1],)) if squeeze else out


# ---------------------------------------------------------------------------
# IC-EoT

def iceot_core(xhat: Node, params, spec: ModelSpec) -> Node:
    """Pipeline from the expanded input (B, T, 2*d_in) to (B, output_dim)."""
    _check_nonneg(params)
    t = xhat.value.shape[1]
    h = ad.add(ad.matmul(xhat, params["embed_w"].leaf()), params["embed_b"].leaf())
    h = ad.add(h, ad.constant(positional_encoding(t, spec.d_model)))
    for layer in range(spec.num_layers):
        h = iceot_block(h, params, spec, layer)
    return ad.add(ad.matmul(_last_token(h), params["out_w"].leaf()), params["out_b"].leaf())


def iceot_forward(x, params, spec: ModelSpec) -> Node:
    x, squeeze = _ensure_batched(x)
    return _output(iceot_core(expand_input(x), params, spec), squeeze)


# ---------------------------------------------------------------------------
# IC-LSTM

def iclstm_cell(xhat_t: Node, h_prev: Node, c_prev: Node, params) -> tuple[Node, Node]:
    """One step of the shared-weight, diagonally-scaled convex LSTM cell.

    All gates read the same non-negative affine base and differ only by
    their non-negative diagonal scaling and free bias; relu keeps every
    gate convex, non-decreasing and non-negative.
    """
    base = ad.add(ad.matmul(xhat_t, params["w_x"].leaf()),
                  ad.matmul(h_prev, params["w_h"].leaf()))
    gate = {g: ad.relu(ad.add(ad.mul(base, params[f"d_{g}"].leaf()),
                              params[f"b_{g}"].leaf()))
            for g in ("f", "i", "o", "c")}
    c_t = ad.add(ad.mul(gate["f"], c_prev), ad.mul(gate["i"], gate["c"]))
    h_t = ad.mul(gate["o"], ad.relu(c_t))
    return h_t, c_t


def iclstm_core(xhat: Node, params, spec: ModelSpec) -> Node:
    _check_nonneg(params)
    b, t = xhat.value.shape[0], xhat.value.shape[1]
    h = ad.constant(np.zeros((b, spec.hidden_dim)))
    c = ad.constant(np.zeros((b, spec.hidden_dim)))
    for step in range(t):
        x_t = ad.reshape(ad.narrow(xhat, 1, step, 1), (b, xhat.value.shape[2]))
        h, c = iclstm_cell(x_t, h, c, params)
    return ad.add(ad.matmul(h, params["out_w"].leaf()), params["out_b"].leaf())


def iclstm_forward(x, params, spec: ModelSpec) -> Node:
    x, squeeze = _ensure_batched(x)
    return _output(iclstm_core(expand_input(x), params, spec), squeeze)


# ---------------------------------------------------------------------------
# ICRNN

def icrnn_core(xhat: Node, params, spec: ModelSpec) -> Node:
    """h_t = g(U u_t + W h_{t-1} + D2 u_{t-1}); output reads h_T, h_{T-1}
    and the last expanded input through non-negative maps."""
    _check_nonneg(params)
    b, t = xhat.value.shape[0], xhat.value.shape[1]
    h = ad.constant(np.zeros((b, spec.hidden_dim)))
    h_prev = h
    u_prev = ad.constant(np.zeros((b, xhat.value.shape[2])))
    u_t = u_prev
    for step in range(t):
        u_t = ad.reshape(ad.narrow(xhat, 1, step, 1), (b, xhat.value.shape[2]))
        h_new = ad.relu(ad.add(ad.add(ad.matmul(u_t, params["u"].leaf()),
                                      ad.matmul(h, params["w"].leaf())),
                               ad.matmul(u_prev, params["d2"].leaf())))
        h_prev, h, u_prev = h, h_new, u_t
    return ad.add(ad.add(ad.matmul(h, params["v"].leaf()),
                         ad.matmul(h_prev, params["d1"].leaf())),
                  ad.matmul(u_t, params["d3"].leaf()))


def icrnn_forward(x, params, spec: ModelSpec) -> Node:
    x, squeeze = _ensure_batched(x)
    return _output(icrnn_core(expand_input(x), params, spec), squeeze)


# ---------------------------------------------------------------------------
# ICFNN

def icfnn_forward(x, params, spec: ModelSpec) -> Node:
    x, squeeze = _ensure_batched(x)
    _check_nonneg(params)
    b, t, d = x.value.shape
    y = ad.reshape(x, (b, t * d))
    z = ad.relu(ad.add(ad.matmul(y, params["w_y0"].leaf()), params["b0"].leaf()))
    for i in range(1, spec.num_layers):
        z = ad.relu(ad.add(ad.add(ad.matmul(z, params[f"w_z{i}"].leaf()),
                                  ad.matmul(y, params[f"w_y{i}"].leaf())),
                           params[f"b{i}"].leaf()))
    last = spec.num_layers
    out = ad.add(ad.add(ad.matmul(z, params[f"w_z{last}"].leaf()),
                        ad.matmul(y, params[f"w_y{last}"].leaf())),
                 params[f"b{last}"].leaf())
    return _output(out, squeeze)


# ---------------------------------------------------------------------------
# standard LSTM baseline

def lstm_forward(x, params, spec: ModelSpec) -> Node:
    x, squeeze = _ensure_batched(x)
    b, t, d = x.value.shape
    h = ad.constant(np.zeros((b, spec.hidden_dim)))
    c = ad.constant(np.zeros((b, spec.hidden_dim)))
    for step in range(t):
        x_t = ad.reshape(ad.narrow(x, 1, step, 1), (b, d))

        def gate(name, act):
            pre = ad.add(ad.add(ad.matmul(x_t, params[f"w_{name}"].leaf()),
                                ad.matmul(h, params[f"u_{name}"].leaf())),
                         params[f"b_{name}"].leaf())
            return act(pre)

        f_t = gate("f", ad.sigmoid)
        i_t = gate("i", ad.sigmoid)
        o_t = gate("o", ad.sigmoid)
        c_tilde = gate("c", ad.tanh)
        c = ad.add(ad.mul(f_t, c), ad.mul(i_t, c_tilde))
        h = ad.mul(o_t, ad.tanh(c))
    out = ad.add(ad.matmul(h, params["out_w"].leaf()), params["out_b"].leaf())
    return _output(out, squeeze)


# ---------------------------------------------------------------------------
# standard encoder baseline

def _layer_norm(x: Node, gamma: Parameter, beta: Parameter) -> Node:
    mu = ad.reduce_mean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.reduce_mean(ad.mul(centered, centered), axis=-1, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, ad.constant(np.float64(_LN_EPS)))))
    return ad.add(ad.mul(normed, gamma.leaf()), beta.leaf())


def eot_forward(x, params, spec: ModelSpec) -> Node:
    x, squeeze = _ensure_batched(x)
    t = x.value.shape[1]
    h = ad.add(ad.matmul(x, params["embed_w"].leaf()), params["embed_b"].leaf())
    h = ad.add(h, ad.constant(positional_encoding(t, spec.d_model)))
    d_head = spec.d_model // spec.num_heads
    for layer in range(spec.num_layers):
        pre = f"layer{layer}."
        q = ad.add(ad.matmul(h, params[pre + "w_q"].leaf()), params[pre + "b_q"].leaf())
        k = ad.add(ad.matmul(h, params[pre + "w_k"].leaf()), params[pre + "b_k"].leaf())
        v = ad.add(ad.matmul(h, params[pre + "w_v"].leaf()), params[pre + "b_v"].leaf())
        outs = []
        for qh, kh, vh in zip(_heads(q, spec.num_heads, spec.d_model),
                              _heads(k, spec.num_heads, spec.d_model),
                              _heads(v, spec.num_heads, spec.d_model)):
            weights = _softmax(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(d_head))
            outs.append(ad.matmul(weights, vh))
        attn = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
        attn = ad.add(ad.matmul(attn, params[pre + "w_o"].leaf()), params[pre + "b_o"].leaf())
        h = _layer_norm(ad.add(h, attn), params[pre + "ln1_g"], params[pre + "ln1_b"])
        hidden = ad.relu(ad.add(ad.matmul(h, params[pre + "ffn_w1"].leaf()),
                                params[pre + "ffn_b1"].leaf()))
        ffn = ad.add(ad.matmul(hidden, params[pre + "ffn_w2"].leaf()),
                     params[pre + "ffn_b2"].leaf())
        h = _layer_norm(ad.add(h, ffn), params[pre + "ln2_g"], params[pre + "ln2_b"])
    out = ad.add(ad.matmul(_last_token(h), params["out_w"].leaf()), params["out_b"].leaf())
    return _output(out, squeeze)


# ---------------------------------------------------------------------------
# dispatch

_FORWARDS = {
    "iceot": iceot_forward,
    "iclstm": iclstm_forward,
    "icrnn": icrnn_forward,
    "icfnn": icfnn_forward,
    "lstm": lstm_forward,
    "eot": eot_forward,
}

_EXPANDED_CORES = {
    "iceot": iceot_core,
    "iclstm": iclstm_core,
    "icrnn": icrnn_core,
}


def forward(x, params, spec: ModelSpec) -> Node:
    return _FORWARDS[spec.architecture](x, params, spec)


def forward_expanded(xhat, params, spec: ModelSpec) -> Node:
    """Run from an already-expanded input (T, 2*d_in) or (B, T, 2*d_in).

    Exists so monotonicity probes can move the +x half while holding the
    -x half fixed, which is the level where non-decreasingness is enforced.
    """
    if spec.architecture not in _EXPANDED_CORES:
        raise ValueError(f"{spec.architecture} does not use an expanded input")
    xhat = ad.as_node(xhat)
    squeeze = xhat.value.ndim == 2
    if squeeze:
        xhat = ad.reshape(xhat, (1,) + xhat.value.shape)
    return _output(_EXPANDED_CORES[spec.architecture](xhat, params, spec), squeeze)


def predict(x: np.ndarray, params, spec: ModelSpec) -> np.ndarray:
    """Forward pass returning plain values."""
    return forward(x, params, spec).value
