"""Layer building blocks expressed with the autodiff ops."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    layer_norm,
    masked_fill,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    swap_last,
    transpose,
)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def multi_head_self_attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                              mask: np.ndarray | None = None) -> Tensor:
    """Bi-directional self-attention over axis -2 of ``x`` (batch, seq, hidden).

    ``mask`` is (batch, seq) or (seq,) with 1 for real positions.  Padded
    keys get -inf logits, so padded content never reaches real positions.
    Expects ``{prefix}{q,k,v,o}_w`` / ``_b`` entries in ``params``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    batch, seq, hidden = x.shape
    if hidden % heads:
        raise ShapeError(f"hidden size {hidden} not divisible by {heads} heads")
    d = hidden // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, seq, heads, d)), (0, 2, 1, 3))

    q = split(linear(x, params[prefix + "q_w"], params[prefix + "q_b"]))
    k = split(linear(x, params[prefix + "k_w"], params[prefix + "k_b"]))
    v = split(linear(x, params[prefix + "v_w"], params[prefix + "v_b"]))
    scores = mul(matmul(q, swap_last(k)), 1.0 / np.sqrt(d))
    if mask is not None:
        m = np.asarray(mask).reshape(-1, seq)
        pad = (m == 0)[:, None, None, :]
        scores = masked_fill(scores, pad, -np.inf)
    attn = softmax(scores, axis=-1)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = linear(reshape(out, (batch, seq, hidden)), params[prefix + "o_w"], params[prefix + "o_b"])
    if squeeze:
        out = reshape(out, (seq, hidden))
    return out


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str, activation=relu) -> Tensor:
    h = activation(linear(x, params[prefix + "ff1_w"], params[prefix + "ff1_b"]))
    return linear(h, params[prefix + "ff2_w"], params[prefix + "ff2_b"])


def encoder_layer(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                  mask: np.ndarray | None = None, activation=relu) -> Tensor:
    """Post-norm transformer encoder block."""
    h = layer_norm(add(x, multi_head_self_attention(x, params, prefix, heads, mask)),
                   params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    return layer_norm(add(h, feed_forward(h, params, prefix, activation)),
                      params[prefix + "ln2_g"], params[prefix + "ln2_b"])


def sinusoidal_positions(seq: int, hidden: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(seq)[:, None]
    i = np.arange(hidden // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / hidden)
    out = np.zeros((seq, hidden))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : hidden - hidden // 2]
    return out.astype(dtype)
