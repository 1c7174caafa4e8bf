"""Residual attention blocks operating on (batch, view, time, h, w, channel) latents."""

from __future__ import annotations

import numpy as np

from .nn import Module, param, zeros, glorot, linear
from .tensor import (
    Tensor,
    ShapeError,
    broadcast_to,
    concat,
    reshape,
    softmax_lastdim,
    split,
    transpose,
)

MASKED_LOGIT = -1e9


def _heads(x: Tensor, heads: int) -> Tensor:
    """(..., N, heads*d) -> (..., heads, N, d)."""
    *lead, n, width = x.shape
    x = reshape(x, tuple(lead) + (n, heads, width // heads))
    k = len(lead)
    return transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge(x: Tensor) -> Tensor:
    *lead, heads, n, d = x.shape
    k = len(lead)
    x = transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(x, tuple(lead) + (n, heads * d))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values disagree in count")
    logits = (q @ transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (
        1.0 / np.sqrt(q.shape[-1])
    )
    if bias is not None:
        bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        if bias.shape[-2:] != logits.shape[-2:]:
            raise ShapeError(f"bias {bias.shape[-2:]} does not match logits {logits.shape[-2:]}")
        logits = logits + bias
    return softmax_lastdim(logits) @ v


class MultiHeadAttention(Module):
    """Projections for multi-head attention; ``zero_init`` zeros the value and output maps."""

    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        kv_width: int | None = None,
        zero_init: bool = False,
    ):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        kv_width = kv_width or width
        self.heads = heads
        self.width = width
        self.wq = glorot(rng, width, width)
        self.wk = glorot(rng, kv_width, width)
        if zero_init:
            self.wv = zeros(kv_width, width)
            self.wo = zeros(width, width)
        else:
            self.wv = glorot(rng, kv_width, width)
            self.wo = glorot(rng, width, width)

    def __call__(self, x: Tensor, context: Tensor, bias=None) -> Tensor:
        q = _heads(linear(x, self.wq), self.heads)
        k = _heads(linear(context, self.wk), self.heads)
        v = _heads(linear(context, self.wv), self.heads)
        if bias is not None:
            bias = bias if isinstance(bias, Tensor) else Tensor(bias)
            # one bias shared by every head
            bias = reshape(bias, bias.shape[:-2] + (1,) + bias.shape[-2:])
        out = scaled_dot_attention(q, k, v, bias)
        return linear(_merge(out), self.wo)


def _check_grid(H: Tensor) -> None:
    if H.ndim != 6:
        raise ShapeError(f"latent grid must be (B, V, T, h, w, C), got {H.shape}")


def _expand_tokens(tokens: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Broadcast (L, C) or (B, L, C) tokens to lead + (L, C)."""
    if tokens.ndim == 2:
        return broadcast_to(tokens, lead + tokens.shape)
    B = tokens.shape[0]
    t = reshape(tokens, (B,) + (1,) * (len(lead) - 1) + tokens.shape[1:])
    return broadcast_to(t, lead + tokens.shape[1:])


class PhysicsAttention(Module):
    """H_phys = H_c + alpha * Attn(queries H_c; keys/values [H_c; C_phys]), per view."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, zero_init: bool = False):
        self.attn = MultiHeadAttention(width, heads, rng, zero_init=zero_init)
        self.alpha = zeros(1)

    def __call__(self, H: Tensor, tokens: Tensor) -> Tensor:
        return physics_attention(H, tokens, self)


def physics_attention(H: Tensor, tokens: Tensor, block: PhysicsAttention) -> Tensor:
    _check_grid(H)
    B, V, T, h, w, C = H.shape
    if tokens.shape[-1] != C:
        raise ShapeError(f"physics token width {tokens.shape[-1]} != model width {C}")
    x = reshape(H, (B, V, T * h * w, C))
    ctx = concat([x, _expand_tokens(tokens, (B, V))], axis=-2)
    out = x + block.alpha * block.attn(x, ctx)
    return reshape(out, H.shape)


class TextCrossAttention(Module):
    """H = H_phys + alpha * Attn(queries H_phys; keys/values C_p)."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, zero_init: bool = False):
        self.attn = MultiHeadAttention(width, heads, rng, zero_init=zero_init)
        self.alpha = zeros(1)

    def __call__(self, H: Tensor, prompt: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return text_cross_attention(H, prompt, self, mask)


def _key_mask_bias(mask: np.ndarray | None, nq: int, lead: tuple[int, ...]):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    bias = np.where(m, 0.0, MASKED_LOGIT)  # (B, L)
    B, L = bias.shape
    bias = bias.reshape((B,) + (1,) * (len(lead) - 1) + (1, L))
    return Tensor(np.broadcast_to(bias, lead + (nq, L)).copy())


def text_cross_attention(H: Tensor, prompt: Tensor, block: TextCrossAttention, mask=None) -> Tensor:
    _check_grid(H)
    B, V, T, h, w, C = H.shape
    if prompt.shape[-1] != C:
        raise ShapeError(f"prompt token width {prompt.shape[-1]} != model width {C}")
    x = reshape(H, (B, V, T * h * w, C))
    ctx = _expand_tokens(prompt, (B, V))
    bias = _key_mask_bias(mask, T * h * w, (B, V))
    out = x + block.alpha * block.attn(x, ctx, bias)
    return reshape(out, H.shape)


class CrossViewAttention(Module):
    """All tokens of the four views at one timestep attend to each other, geometry bias added."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, zero_init: bool = False):
        self.attn = MultiHeadAttention(width, heads, rng, zero_init=zero_init)
        self.alpha = zeros(1)

    def __call__(self, H: Tensor, bias=None) -> Tensor:
        return cross_view_attention(H, bias, self)


def cross_view_attention(H: Tensor, bias, block: CrossViewAttention) -> Tensor:
    """``bias`` is (B, T, V*N, V*N) holding all 16 view-pair blocks, or None."""
    _check_grid(H)
    B, V, T, h, w, C = H.shape
    n = V * h * w
    x = reshape(transpose(H, (0, 2, 1, 3, 4, 5)), (B, T, n, C))
    if bias is not None:
        bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        if bias.shape[-2:] != (n, n):
            raise ShapeError(f"cross-view bias must cover all view pairs: expected {(n, n)}, got {bias.shape[-2:]}")
    out = x + block.alpha * block.attn(x, x, bias)
    out = reshape(out, (B, T, V, h, w, C))
    return transpose(out, (0, 2, 1, 3, 4, 5))


class GroupedTemporalAttention(Module):
    """Four channel groups, each with its own single-head attention along time."""

    def __init__(self, width: int, rng: np.random.Generator, groups: int = 4, zero_init: bool = False):
        if width % groups:
            raise ShapeError(f"width {width} not divisible into {groups} groups")
        self.groups = [MultiHeadAttention(width // groups, 1, rng, zero_init=zero_init) for _ in range(groups)]
        self.alpha = zeros(1)

    def __call__(self, H: Tensor) -> Tensor:
        return temporal_attention_grouped(H, self)


def temporal_attention_grouped(H: Tensor, block: GroupedTemporalAttention) -> Tensor:
    _check_grid(H)
    parts = split(H, len(block.groups), axis=-1)
    outs = []
    for part, attn in zip(parts, block.groups):
        x = transpose(part, (0, 1, 3, 4, 2, 5))  # time becomes the token axis
        y = x + block.alpha * attn(x, x)
        outs.append(transpose(y, (0, 1, 4, 2, 3, 5)))
    return concat(outs, axis=-1)


class VideoSynAttention(Module):
    """Joint attention over appearance, flow and prompt streams.

    Flow latents share positions with the appearance latents and enter
    through a zero-initialised channel projection, so a fresh block ignores
    them exactly; prompt tokens are appended as extra keys and values.
    """

    def __init__(self, width: int, flow_width: int, heads: int, rng: np.random.Generator, zero_init: bool = False):
        self.flow_proj = zeros(flow_width, width)
        self.attn = MultiHeadAttention(width, heads, rng, zero_init=zero_init)
        self.alpha = zeros(1)

    def __call__(self, H: Tensor, H_flow: Tensor, prompt: Tensor, mask=None) -> Tensor:
        return videosyn_attention(H, H_flow, prompt, self, mask)


def videosyn_attention(H: Tensor, H_flow: Tensor, prompt: Tensor, block: VideoSynAttention, mask=None) -> Tensor:
    """H, H_flow: (B, T, h, w, C / C_flow); prompt: (L, C) or (B, L, C)."""
    if H.shape[:-1] != H_flow.shape[:-1]:
        raise ShapeError(f"flow latent {H_flow.shape} does not align with {H.shape}")
    B, T, h, w, C = H.shape
    if prompt.shape[-1] != C or H_flow.shape[-1] != block.flow_proj.shape[0]:
        raise ShapeError("stream widths do not match the block")
    n = T * h * w
    x = reshape(H + linear(H_flow, block.flow_proj), (B, n, C))
    ctx = concat([x, _expand_tokens(prompt, (B,))], axis=-2)
    bias = None
    if mask is not None:
        m = np.concatenate([np.ones((B, n), dtype=bool), np.asarray(mask, dtype=bool)], axis=1)
        bias = _key_mask_bias(m, n, (B,))
    out = x + block.alpha * block.attn(x, ctx, bias)
    return reshape(out, H.shape)
