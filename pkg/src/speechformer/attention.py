"""Vanilla multi-head attention and ConvAttention.

ConvAttention shortens the key and value sequences with one strided 1D
convolution (stride = compression factor ``chi``) before the scaled
dot-product, so the score matrix is ``T x ceil(T / chi)`` instead of
``T x T``. The query side is untouched and the output keeps length ``T``.
The same convolution weight compresses K and V and is applied to every head.

All functions take ``[T, d]`` or batched ``[B, T, d]`` inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 32
    heads: int = 2
    chi: int = 4
    kernel: int = 8
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.chi < 1 or self.kernel < 1:
            raise ValueError(f"chi and kernel must be positive, got chi={self.chi} kernel={self.kernel}")
        if self.kernel < self.chi:
            raise ValueError(f"kernel={self.kernel} must be >= chi={self.chi}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class PaddingMask:
    """Valid length of every sequence in a padded batch."""

    lengths: tuple[int, ...]
    padded_length: int

    def __post_init__(self):
        if any(n < 1 or n > self.padded_length for n in self.lengths):
            raise ValueError(f"lengths {self.lengths} must lie in [1, {self.padded_length}]")

    @classmethod
    def full(cls, batch: int, length: int) -> "PaddingMask":
        return cls((length,) * batch, length)

    def valid(self) -> np.ndarray:
        """Boolean ``[B, T]``, true at real (unpadded) positions."""
        return np.arange(self.padded_length)[None, :] < np.asarray(self.lengths)[:, None]

    def time_mask(self) -> np.ndarray:
        """Float ``[B, T, 1]`` for zeroing padded frames."""
        return self.valid()[:, :, None].astype(np.float64)


def compression_padding(T: int, chi: int, kernel: int) -> tuple[int, int]:
    """Zero frames (left, right) so that a stride-``chi`` conv yields ``ceil(T/chi)`` frames.

    Left padding is fixed at zero so window ``j`` always covers frames
    ``j*chi .. j*chi+kernel-1`` whatever the padded batch length is.
    """
    t_out = -(-T // chi)
    return 0, max(0, (t_out - 1) * chi + kernel - T)


def compressed_lengths(mask: PaddingMask, chi: int) -> PaddingMask:
    """Mask after compression: window ``j`` is valid iff it overlaps a valid frame."""
    return PaddingMask(tuple(-(-n // chi) for n in mask.lengths), -(-mask.padded_length // chi))


def count_attention_elements(T: int, chi: int = 1) -> int:
    """Score-matrix elements (one head) of a ConvAttention encoder stack on ``T`` frames.

    Accounting follows the quadratic-in-``T/chi`` law: both axes of the score
    matrix are taken at the compressed rate, ``ceil(T/chi)**2``. With ``chi=1``
    this is vanilla self-attention, ``T**2``; with ``chi=4`` it equals the
    self-attention of an encoder after x4 subsampling.
    """
    if T < 1 or chi < 1:
        raise ValueError(f"T and chi must be positive, got T={T} chi={chi}")
    n = -(-T // chi)
    return n * n


def materialized_score_elements(t_query: int, t_key: int, heads: int) -> int:
    """Elements of the score tensor a single attention call actually builds."""
    return t_query * t_key * heads


def init_mha(rng: np.random.Generator, d_model: int) -> dict[str, np.ndarray]:
    limit = math.sqrt(6.0 / (2 * d_model))
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"w{name}"] = rng.uniform(-limit, limit, (d_model, d_model))
        p[f"b{name}"] = np.zeros(d_model)
    return p


def init_conv_attention(rng: np.random.Generator, cfg: AttentionConfig) -> dict[str, np.ndarray]:
    p = init_mha(rng, cfg.d_model)
    fan = cfg.kernel * cfg.head_dim
    limit = math.sqrt(6.0 / (2 * fan))
    p["conv_w"] = rng.uniform(-limit, limit, (cfg.kernel, cfg.head_dim, cfg.head_dim))
    p["conv_b"] = np.zeros(cfg.head_dim)
    return p


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    return x, False


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, d = x.shape
    return nx.transpose(nx.reshape(x, (B, T, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, key_valid: np.ndarray | None, causal: bool,
            dropout_p: float, rng) -> Tensor:
    """Scaled dot-product over ``[B, H, T, dh]`` heads; masked logits are -inf."""
    dh = q.shape[-1]
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    blocked = None
    if key_valid is not None and not key_valid.all():
        blocked = ~key_valid[:, None, None, :]
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        future = np.triu(np.ones((tq, tk), dtype=bool), k=1)[None, None]
        blocked = future if blocked is None else (blocked | future)
    if blocked is not None:
        scores = nx.masked_fill(scores, blocked, -np.inf)
    weights = nx.dropout(nx.softmax(scores, axis=-1), dropout_p, rng)
    return nx.matmul(weights, v)


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    params: dict[str, Tensor],
    heads: int,
    mask: PaddingMask | None = None,
    causal: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Standard multi-head attention; ``mask`` covers the key/value side."""
    q_in, squeeze = _batched(q_in)
    k_in, _ = _batched(k_in)
    v_in, _ = _batched(v_in)
    d = q_in.shape[-1]
    if k_in.shape[-1] != d or v_in.shape[-1] != d or d % heads:
        raise ValueError(f"attention width mismatch: q {q_in.shape}, k {k_in.shape}, v {v_in.shape}, heads {heads}")
    key_valid = None
    if mask is not None:
        if mask.padded_length > k_in.shape[1]:
            raise ValueError(f"mask length {mask.padded_length} exceeds key length {k_in.shape[1]}")
        key_valid = mask.valid()
    q = _split_heads(nx.linear(q_in, params["wq"], params["bq"]), heads)
    k = _split_heads(nx.linear(k_in, params["wk"], params["bk"]), heads)
    v = _split_heads(nx.linear(v_in, params["wv"], params["bv"]), heads)
    out = nx.linear(_merge_heads(_attend(q, k, v, key_valid, causal, dropout_p, rng)), params["wo"], params["bo"])
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def compress_sequence(x: Tensor, params: dict[str, Tensor], cfg: AttentionConfig,
                      mask: PaddingMask | None = None) -> Tensor:
    """Apply the shared K/V convolution to projected ``[B, H, T, dh]`` heads."""
    B, H, T, dh = x.shape
    if mask is not None:
        x = nx.mul(x, mask.valid()[:, None, :, None].astype(np.float64))
    pad = compression_padding(T, cfg.chi, cfg.kernel)
    return nx.conv1d(x, params["conv_w"], params.get("conv_b"), stride=cfg.chi, padding=pad)


def conv_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: dict[str, Tensor],
    cfg: AttentionConfig,
    mask: PaddingMask | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Self-attention whose keys and values are shortened by a strided conv.

    The conv runs after the K/V projections, one weight for K, V and all
    heads. Padded frames are zeroed before compression, and compressed
    positions whose window lies entirely in padding are masked out.
    """
    q_in, squeeze = _batched(q_in)
    kv_in, _ = _batched(kv_in)
    if q_in.shape[1] < 1:
        raise ValueError("conv_attention needs at least one frame")
    if q_in.shape[1] != kv_in.shape[1]:
        raise ValueError(f"conv_attention is self-attention: T_q={q_in.shape[1]} != T_kv={kv_in.shape[1]}")
    H = cfg.heads
    q = _split_heads(nx.linear(q_in, params["wq"], params["bq"]), H)
    k = compress_sequence(_split_heads(nx.linear(kv_in, params["wk"], params["bk"]), H), params, cfg, mask)
    v = compress_sequence(_split_heads(nx.linear(kv_in, params["wv"], params["bv"]), H), params, cfg, mask)
    key_valid = compressed_lengths(mask, cfg.chi).valid() if mask is not None else None
    out = nx.linear(_merge_heads(_attend(q, k, v, key_valid, False, cfg.dropout_p, rng)), params["wo"], params["bo"])
    return nx.reshape(out, out.shape[1:]) if squeeze else out
