"""Transformer building blocks on top of the autodiff tensors.

Attention masks are plain boolean numpy arrays with one flag per token
(True = valid).  A token flagged invalid receives exactly zero attention
weight from every query position: the masked softmax multiplies the
exponentiated logits by the mask, so masked content can never leak into an
output and never receives gradient.  Every sequence must keep at least one
valid key token.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, concat

# Per-token validity flags (True = attendable), broadcastable to the logits.
AttentionMask = np.ndarray


def full_mask(*shape: int) -> AttentionMask:
    return np.ones(shape, dtype=bool)


def empty_mask(*shape: int) -> AttentionMask:
    return np.zeros(shape, dtype=bool)


def masked_softmax(logits: Tensor, mask: AttentionMask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` with invalid positions pinned to exactly zero.

    The row maximum is taken over valid entries only and subtracted as a
    constant, so the result is stable and invariant to per-row shifts.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax requires at least one valid entry per row")
    valid_max = np.where(mask, logits.data, -np.inf).max(axis=axis, keepdims=True)
    mask_f = mask.astype(np.float64)
    # zero masked logits *before* exp so arbitrarily large masked content
    # cannot overflow; the second multiply pins their weight to exactly 0
    z = ((logits - valid_max) * mask_f).exp() * mask_f
    return z / z.sum(axis=axis, keepdims=True)


def softmax_rows(m) -> Tensor:
    """Row softmax of a matrix, computed with max-subtraction for stability."""
    t = m if isinstance(m, Tensor) else Tensor(m)
    if t.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    z = (t - t.data.max(axis=-1, keepdims=True)).exp()
    return z / z.sum(axis=-1, keepdims=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    return out if b is None else out + b


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, which keeps finite-difference
    # gradient checks clean
    c = math.sqrt(2.0 / math.pi)
    return x * 0.5 * ((c * (x + x * x * x * 0.044715)).tanh() + 1.0)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps) ** 0.5
    return x / norm


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gamma + beta


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor,
                         mask: AttentionMask, params: dict[str, Tensor],
                         n_heads: int) -> Tensor:
    """Multi-head attention of ``q_tokens`` over ``kv_tokens``.

    Shapes: q_tokens (B, Sq, D), kv_tokens (B, Sk, D), mask (B, Sk) or (Sk,).
    ``params`` holds wq/wk/wv/wo (D, D) and bq/bk/bv/bo (D,).  Masked kv
    tokens contribute exactly zero weight; output shape equals q_tokens'.
    """
    b_sz, s_q, dim = q_tokens.shape
    s_k = kv_tokens.shape[1]
    if kv_tokens.shape[0] != b_sz or kv_tokens.shape[2] != dim:
        raise ValueError("q/kv token dimensions do not match")
    if dim % n_heads != 0:
        raise ValueError("embedding dim must be divisible by head count")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (b_sz, s_k))
    if mask.shape != (b_sz, s_k):
        raise ValueError("mask length must match kv sequence length")
    d_head = dim // n_heads

    def split_heads(t: Tensor, s: int) -> Tensor:
        return t.reshape(b_sz, s, n_heads, d_head).transpose(0, 2, 1, 3)

    q = split_heads(linear(q_tokens, params["wq"], params["bq"]), s_q)
    k = split_heads(linear(kv_tokens, params["wk"], params["bk"]), s_k)
    v = split_heads(linear(kv_tokens, params["wv"], params["bv"]), s_k)

    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d_head))
    weights = masked_softmax(scores, mask[:, None, None, :], axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b_sz, s_q, dim)
    return linear(mixed, params["wo"], params["bo"])


def encoder_block(tokens: Tensor, mask: AttentionMask,
                  params: dict[str, Tensor], n_heads: int) -> Tensor:
    """Pre-norm transformer encoder layer: self-attention + gelu MLP."""
    normed = layer_norm(tokens, params["ln1_g"], params["ln1_b"])
    tokens = tokens + multi_head_attention(normed, normed, mask, params, n_heads)
    normed = layer_norm(tokens, params["ln2_g"], params["ln2_b"])
    hidden = gelu(linear(normed, params["w1"], params["b1"]))
    return tokens + linear(hidden, params["w2"], params["b2"])


# -- parameter initialization --------------------------------------------------

def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                  requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_attention(rng: np.random.Generator, dim: int) -> dict[str, Tensor]:
    params = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[name] = xavier(rng, dim, dim)
        params["b" + name[1]] = zeros(dim)
    return params


def init_encoder_block(rng: np.random.Generator, dim: int, ffn_dim: int) -> dict[str, Tensor]:
    params = init_attention(rng, dim)
    params["w1"] = xavier(rng, dim, ffn_dim)
    params["b1"] = zeros(ffn_dim)
    params["w2"] = xavier(rng, ffn_dim, dim)
    params["b2"] = zeros(dim)
    params["ln1_g"] = ones(dim)
    params["ln1_b"] = zeros(dim)
    params["ln2_g"] = ones(dim)
    params["ln2_b"] = zeros(dim)
    return params
