"""Transformer encoder/decoder blocks built on the autodiff tape.

Pre-norm residual blocks, learned absolute positions, ReLU feed-forward.
Decoder cross-attention projects queries and outputs only; encoder states
serve directly as keys and values, so its cost carries no per-key
projection term (the per-key work is score + weighted-sum only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flops
from .params import ParameterSet
from .tensor import (
    ShapeError,
    Tensor,
    add,
    layer_norm,
    masked_softmax,
    matmul,
    relu,
    reshape,
    swapaxes,
    embedding,
)


@dataclass
class TransformerConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")


@dataclass
class AttentionParams:
    wq: Tensor | None
    wk: Tensor | None
    wv: Tensor | None
    wo: Tensor | None


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, h = x.shape
    return swapaxes(reshape(x, (*lead, t, n_heads, h // n_heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    y = swapaxes(x, -3, -2)
    *lead, t, heads, d = y.shape
    return reshape(y, (*lead, t, heads * d))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams,
                         mask, n_heads: int) -> Tensor:
    """Scaled dot-product attention with per-head splitting.

    ``mask`` is boolean, True where a query may attend, broadcastable to
    the score shape [..., heads, Tq, Tk]. Projections in ``params`` may be
    None, in which case the corresponding input is used raw.
    """
    if q.shape[-1] % n_heads != 0:
        raise ShapeError(f"head count {n_heads} must divide width {q.shape[-1]}")
    qp = matmul(q, params.wq) if params.wq is not None else q
    kp = matmul(k, params.wk) if params.wk is not None else k
    vp = matmul(v, params.wv) if params.wv is not None else v
    qh = _split_heads(qp, n_heads)
    kh = _split_heads(kp, n_heads)
    vh = _split_heads(vp, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = matmul(qh, swapaxes(kh, -1, -2)) * scale
    weights = masked_softmax(scores, mask)
    ctx = _merge_heads(matmul(weights, vh))
    return matmul(ctx, params.wo) if params.wo is not None else ctx


# -- parameter registration ------------------------------------------------------


def register_embeddings(ps: ParameterSet, prefix: str, cfg: TransformerConfig) -> None:
    ps.add(f"{prefix}.tok_emb", (cfg.vocab_size, cfg.d_model), fan_in=cfg.d_model)
    ps.add(f"{prefix}.pos_emb", (cfg.max_len, cfg.d_model), fan_in=cfg.d_model)


def register_attention(ps: ParameterSet, prefix: str, d: int, cross: bool = False) -> None:
    ps.add(f"{prefix}.wq", (d, d))
    if not cross:
        ps.add(f"{prefix}.wk", (d, d))
        ps.add(f"{prefix}.wv", (d, d))
    ps.add(f"{prefix}.wo", (d, d))


def register_ffn(ps: ParameterSet, prefix: str, d: int, mult: int) -> None:
    ps.add(f"{prefix}.w1", (d, mult * d))
    ps.add(f"{prefix}.b1", (mult * d,), init="zeros")
    ps.add(f"{prefix}.w2", (mult * d, d))
    ps.add(f"{prefix}.b2", (d,), init="zeros")


def register_layer_norm(ps: ParameterSet, prefix: str, d: int) -> None:
    ps.add(f"{prefix}.gain", (d,), init="ones")
    ps.add(f"{prefix}.bias", (d,), init="zeros")


def register_encoder_layer(ps: ParameterSet, prefix: str, cfg: TransformerConfig) -> None:
    register_layer_norm(ps, f"{prefix}.ln1", cfg.d_model)
    register_attention(ps, f"{prefix}.attn", cfg.d_model)
    register_layer_norm(ps, f"{prefix}.ln2", cfg.d_model)
    register_ffn(ps, f"{prefix}.ffn", cfg.d_model, cfg.ffn_mult)


def register_decoder_layer(ps: ParameterSet, prefix: str, cfg: TransformerConfig) -> None:
    register_layer_norm(ps, f"{prefix}.ln1", cfg.d_model)
    register_attention(ps, f"{prefix}.self_attn", cfg.d_model)
    register_layer_norm(ps, f"{prefix}.ln2", cfg.d_model)
    register_attention(ps, f"{prefix}.cross_attn", cfg.d_model, cross=True)
    register_layer_norm(ps, f"{prefix}.ln3", cfg.d_model)
    register_ffn(ps, f"{prefix}.ffn", cfg.d_model, cfg.ffn_mult)


# -- forward pieces ---------------------------------------------------------------


def _attn_params(ps: ParameterSet, prefix: str, cross: bool = False) -> AttentionParams:
    return AttentionParams(
        wq=ps[f"{prefix}.wq"],
        wk=None if cross else ps[f"{prefix}.wk"],
        wv=None if cross else ps[f"{prefix}.wv"],
        wo=ps[f"{prefix}.wo"],
    )


def _ln(ps: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, ps[f"{prefix}.gain"], ps[f"{prefix}.bias"])


def _ffn(ps: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    with flops.kind("ffn"):
        h = relu(add(matmul(x, ps[f"{prefix}.w1"]), ps[f"{prefix}.b1"]))
        return add(matmul(h, ps[f"{prefix}.w2"]), ps[f"{prefix}.b2"])


def embed_tokens(ps: ParameterSet, prefix: str, tokens: np.ndarray) -> Tensor:
    """Token + absolute position embeddings for an id array [..., T]."""
    tokens = np.asarray(tokens, dtype=np.intp)
    tok = embedding(ps[f"{prefix}.tok_emb"], tokens)
    positions = np.arange(tokens.shape[-1], dtype=np.intp)
    pos = embedding(ps[f"{prefix}.pos_emb"], positions)
    return add(tok, pos)


def encoder_layer(ps: ParameterSet, prefix: str, x: Tensor, mask, cfg: TransformerConfig) -> Tensor:
    normed = _ln(ps, f"{prefix}.ln1", x)
    a = multi_head_attention(normed, normed, normed,
                             _attn_params(ps, f"{prefix}.attn"), mask, cfg.n_heads)
    x = add(x, a)
    return add(x, _ffn(ps, f"{prefix}.ffn", _ln(ps, f"{prefix}.ln2", x)))


def encoder_stack(ps: ParameterSet, prefix: str, states: Tensor, pad_mask: np.ndarray,
                  cfg: TransformerConfig, lo: int = 0, hi: int | None = None) -> Tensor:
    """Apply encoder layers [lo, hi). ``pad_mask`` is boolean [..., T]."""
    hi = cfg.n_layers if hi is None else hi
    mask = attention_mask_from_pad(pad_mask)
    for layer in range(lo, hi):
        states = encoder_layer(ps, f"{prefix}.l{layer}", states, mask, cfg)
    return states


def decoder_layer(ps: ParameterSet, prefix: str, x: Tensor, self_mask,
                  enc_states: Tensor, cross_mask, cfg: TransformerConfig) -> Tensor:
    normed = _ln(ps, f"{prefix}.ln1", x)
    a = multi_head_attention(normed, normed, normed,
                             _attn_params(ps, f"{prefix}.self_attn"), self_mask, cfg.n_heads)
    x = add(x, a)
    c = multi_head_attention(
        _ln(ps, f"{prefix}.ln2", x), enc_states, enc_states,
        _attn_params(ps, f"{prefix}.cross_attn", cross=True), cross_mask, cfg.n_heads,
    )
    x = add(x, c)
    return add(x, _ffn(ps, f"{prefix}.ffn", _ln(ps, f"{prefix}.ln3", x)))


def decoder_stack(ps: ParameterSet, prefix: str, states: Tensor, enc_states: Tensor,
                  enc_valid: np.ndarray, cfg: TransformerConfig) -> Tensor:
    """Causal decoder over one sequence [T, H] with cross-attention keys [K, H]."""
    t = states.shape[0]
    self_mask = np.tril(np.ones((t, t), dtype=bool))
    cross_mask = np.asarray(enc_valid, dtype=bool).reshape(1, -1)
    for layer in range(cfg.n_layers):
        states = decoder_layer(ps, f"{prefix}.l{layer}", states, self_mask,
                               enc_states, cross_mask, cfg)
    return states


def attention_mask_from_pad(pad_mask: np.ndarray) -> np.ndarray:
    """[..., T] validity mask -> broadcastable [..., 1, 1, T] key mask."""
    m = np.asarray(pad_mask, dtype=bool)
    return m[..., None, None, :]


def concat_encoded(states: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Flatten per-passage states [N, T, H] into decoder keys [N*T, H]."""
    n, t, h = states.shape
    flat = reshape(states, (n * t, h))
    return flat, np.asarray(pad_mask, dtype=bool).reshape(n * t)
