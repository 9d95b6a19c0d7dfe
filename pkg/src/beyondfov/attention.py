"""Windowed multi-head self-attention and the residual transformer block.

A feature map (H, W, C) is cut into non-overlapping N x N windows, optionally
after a cyclic roll of N//2 so alternating blocks exchange information across
window borders. Rolled ("shifted") windows mix tokens that are not spatial
neighbors; the standard cross-window mask keeps attention within regions that
were contiguous before the roll. Windows are independent, so one forward call
may process them in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

MASK_NEG = -1e9  # additive -inf surrogate for disallowed key positions


@dataclass(frozen=True)
class WindowGrid:
    """Partitioning scheme for an (H, W, C) map: window size and shift."""

    height: int
    width: int
    channels: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.height % self.window or self.width % self.window:
            raise ValueError(
                f"feature dims ({self.height}, {self.width}) not divisible by "
                f"window {self.window}; pad upstream")
        if self.shift not in (0, self.window // 2):
            raise ValueError(
                f"shift must be 0 or window//2={self.window // 2}, got {self.shift}")

    @property
    def n_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)

    @property
    def tokens_per_window(self) -> int:
        return self.window * self.window


@dataclass(frozen=True)
class AttentionParams:
    """Combined per-head projections; ``wq/wk/wv/wo`` are (C, C)."""

    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    num_heads: int

    def __post_init__(self):
        c = self.wq.shape[0]
        if c % self.num_heads:
            raise ValueError(f"{self.num_heads} heads do not divide C={c}")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.num_heads


def window_partition(x: T.Tensor, grid: WindowGrid) -> T.Tensor:
    """(H, W, C) -> (nW, N*N, C), rolling by -shift first."""
    h, w, c, n = grid.height, grid.width, grid.channels, grid.window
    if x.shape != (h, w, c):
        raise ValueError(f"expected {(h, w, c)} feature map, got {x.shape}")
    if grid.shift:
        x = T.roll2d(x, (-grid.shift, -grid.shift))
    x = T.reshape(x, (h // n, n, w // n, n, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (grid.n_windows, n * n, c))


def window_merge(windows: T.Tensor, grid: WindowGrid) -> T.Tensor:
    """Inverse of :func:`window_partition`, including the roll."""
    h, w, c, n = grid.height, grid.width, grid.channels, grid.window
    x = T.reshape(windows, (h // n, w // n, n, n, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    x = T.reshape(x, (h, w, c))
    if grid.shift:
        x = T.roll2d(x, (grid.shift, grid.shift))
    return x


def shifted_window_mask(grid: WindowGrid) -> np.ndarray | None:
    """Per-window (T, T) additive mask separating wrapped roll regions."""
    if grid.shift == 0:
        return None
    n, s = grid.window, grid.shift
    region = np.zeros((grid.height, grid.width), dtype=np.int32)
    tag = 0
    for hs in (slice(0, -n), slice(-n, -s), slice(-s, None)):
        for ws in (slice(0, -n), slice(-n, -s), slice(-s, None)):
            region[hs, ws] = tag
            tag += 1
    region = region.reshape(grid.height // n, n, grid.width // n, n)
    region = region.transpose(0, 2, 1, 3).reshape(grid.n_windows, n * n)
    differs = region[:, :, None] != region[:, None, :]
    return np.where(differs, MASK_NEG, 0.0).astype(np.float32)


def _validate_mask(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == MASK_NEG)):
        raise ValueError("mask entries must be 0 or the -inf surrogate")
    if not np.all((mask == 0).any(axis=-1)):
        raise ValueError("fully-masked query row; discard such tokens upstream")


def _split_heads(x: T.Tensor, tokens: int, heads: int, dim: int) -> T.Tensor:
    if len(x.shape) == 2:
        return T.transpose(T.reshape(x, (tokens, heads, dim)), (1, 0, 2))
    b = x.shape[0]
    return T.transpose(T.reshape(x, (b, tokens, heads, dim)), (0, 2, 1, 3))


def scaled_dot_attention(q: T.Tensor, k: T.Tensor, v: T.Tensor, num_heads: int,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Softmax(Q K^T / sqrt(d)) V with heads split from the channel axis.

    ``q`` is (T, C) or (B, T, C); ``k``/``v`` share every dim but T. ``mask``
    is additive over the (T, S) logits, broadcast across heads.
    """
    c = q.shape[-1]
    if c % num_heads:
        raise ValueError(f"{num_heads} heads do not divide C={c}")
    d = c // num_heads
    tq, s = q.shape[-2], k.shape[-2]
    qh = _split_heads(q, tq, num_heads, d)
    kh = _split_heads(k, s, num_heads, d)
    vh = _split_heads(v, s, num_heads, d)
    kt = T.transpose(kh, (0, 1, 3, 2) if len(kh.shape) == 4 else (0, 2, 1))
    logits = T.mul(T.matmul(qh, kt), T.Tensor(np.float32(1.0 / np.sqrt(d))))
    if mask is not None:
        _validate_mask(mask)
        m = mask
        if len(logits.shape) == 4 and m.ndim == 3:
            m = m[:, None, :, :]
        logits = T.add(logits, T.Tensor(m))
    weights = T.softmax(logits)
    out = T.matmul(weights, vh)
    if len(out.shape) == 3:
        out = T.reshape(T.transpose(out, (1, 0, 2)), (tq, c))
    else:
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (out.shape[0], tq, c))
    if return_weights:
        return out, weights
    return out


def multi_head_attention(q_in: T.Tensor, kv_in: T.Tensor, params: AttentionParams,
                         mask: np.ndarray | None = None) -> T.Tensor:
    """Projected multi-head attention; self-attention when q_in is kv_in."""
    c = params.wq.shape[0]
    if q_in.shape[-1] != c or kv_in.shape[-1] != c:
        raise ValueError(
            f"channel dims {q_in.shape[-1]}/{kv_in.shape[-1]} do not match "
            f"projection width {c}")
    q = T.matmul(q_in, params.wq)
    k = T.matmul(kv_in, params.wk)
    v = T.matmul(kv_in, params.wv)
    att = scaled_dot_attention(q, k, v, params.num_heads, mask)
    return T.matmul(att, params.wo)


def linear(x: T.Tensor, w: T.Tensor, b: T.Tensor | None = None) -> T.Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


@dataclass(frozen=True)
class SwinBlockParams:
    """One transformer block: pre-norm attention + pre-norm 4x MLP."""

    ln1_gamma: T.Tensor
    ln1_beta: T.Tensor
    attn: AttentionParams
    ln2_gamma: T.Tensor
    ln2_beta: T.Tensor
    mlp_w1: T.Tensor
    mlp_b1: T.Tensor
    mlp_w2: T.Tensor
    mlp_b2: T.Tensor


def swin_block(x: T.Tensor, params: SwinBlockParams, grid: WindowGrid) -> T.Tensor:
    """x + WindowAttn(LN(x)), then + MLP(LN(.)), shifts per ``grid``."""
    y = T.layer_norm(x, params.ln1_gamma, params.ln1_beta)
    windows = window_partition(y, grid)
    mask = shifted_window_mask(grid)
    att = multi_head_attention(windows, windows, params.attn, mask)
    x = T.add(x, window_merge(att, grid))
    y = T.layer_norm(x, params.ln2_gamma, params.ln2_beta)
    y = linear(T.gelu(linear(y, params.mlp_w1, params.mlp_b1)),
               params.mlp_w2, params.mlp_b2)
    return T.add(x, y)
