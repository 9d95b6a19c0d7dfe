"""Polar-aware cross attention between the two task branches.

Tokens of a feature grid are binned into concentric equal-width annuli around
the grid center. Within each ring, tokens of the receiving branch query
tokens of the source branch (projected per branch, then Q/K/V projections,
scaled dot-product attention, a bottleneck MLP, and a residual back onto the
projected receiving tokens). Attention never crosses ring boundaries, and
tokens beyond the outermost ring are discarded: they pass through bit-exact.

Directions: P2S updates the segmentation branch from the completion branch,
S2P the reverse, Bi runs both with independent parameters on the original
inputs. Rings are independent and may be processed in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import linear, scaled_dot_attention

DIRECTIONS = ("S2P", "P2S", "Bi")


@dataclass(frozen=True)
class PolarMaskSet:
    """Disjoint ring masks over an (height, width) token grid.

    ``radii`` are the outer boundaries r_1 < ... < r_count; ring i covers
    r_{i-1} < r <= r_i (the first ring is the closed central disc).
    ``ring_of_token`` maps each flat token index to its ring, -1 = discarded.
    """

    height: int
    width: int
    count: int
    r_max: float
    center: tuple[float, float]
    radii: np.ndarray
    ring_of_token: np.ndarray

    @property
    def masks(self) -> np.ndarray:
        """(count, H, W) binary maps, pairwise disjoint."""
        rings = self.ring_of_token.reshape(self.height, self.width)
        return np.stack([(rings == i).astype(np.uint8) for i in range(self.count)])

    def ring_indices(self, ring: int) -> np.ndarray:
        return np.flatnonzero(self.ring_of_token == ring)

    @property
    def discarded_indices(self) -> np.ndarray:
        return np.flatnonzero(self.ring_of_token < 0)


def generate_polar_masks(height: int, width: int, count: int, r_max: float,
                         center: tuple[float, float] | None = None) -> PolarMaskSet:
    """Equal-width annuli r_i = (i/count) * r_max around the grid center."""
    if count < 1:
        raise ValueError(f"mask count must be >= 1, got {count}")
    if r_max <= 0:
        raise ValueError(f"r_max must be positive, got {r_max}")
    if count > height * width:
        raise ValueError(
            f"mask count {count} exceeds token count {height * width}")
    if center is None:
        center = ((height - 1) / 2.0, (width - 1) / 2.0)
    ys, xs = np.mgrid[0:height, 0:width]
    radius = np.hypot(ys - center[0], xs - center[1]).ravel()
    radii = np.arange(1, count + 1, dtype=np.float64) * (r_max / count)
    ring = np.searchsorted(radii, radius, side="left")
    ring_of_token = np.where(ring < count, ring, -1).astype(np.int64)
    return PolarMaskSet(height, width, count, float(r_max),
                        (float(center[0]), float(center[1])), radii, ring_of_token)


@dataclass(frozen=True)
class PcaDirectionParams:
    """One direction's weights: branch projections, Q/K/V, bottleneck."""

    l_s_w: T.Tensor
    l_s_b: T.Tensor
    l_c_w: T.Tensor
    l_c_b: T.Tensor
    pq: T.Tensor
    pk: T.Tensor
    pv: T.Tensor
    bn_w1: T.Tensor
    bn_b1: T.Tensor
    bn_w2: T.Tensor
    bn_b2: T.Tensor


@dataclass(frozen=True)
class PcaParams:
    """Direction selector plus per-direction parameter sets.

    ``p2s`` must be present for directions P2S/Bi, ``s2p`` for S2P/Bi; Bi
    holds two independent sets.
    """

    direction: str
    num_heads: int
    p2s: PcaDirectionParams | None = None
    s2p: PcaDirectionParams | None = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(
                f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.direction in ("P2S", "Bi") and self.p2s is None:
            raise ValueError(f"direction {self.direction} needs p2s parameters")
        if self.direction in ("S2P", "Bi") and self.s2p is None:
            raise ValueError(f"direction {self.direction} needs s2p parameters")


def _fuse_into(recv_flat: T.Tensor, src_flat: T.Tensor, recv_w, recv_b,
               src_w, src_b, dp: PcaDirectionParams, masks: PolarMaskSet,
               num_heads: int) -> T.Tensor:
    """Per-ring masked cross attention; returns the updated receiving map."""
    indices = []
    values = []
    for ring in range(masks.count):
        idx = masks.ring_indices(ring)
        if idx.size == 0:
            continue  # empty annulus is skipped, not an error
        recv_star = linear(T.gather_rows(recv_flat, idx), recv_w, recv_b)
        src_star = linear(T.gather_rows(src_flat, idx), src_w, src_b)
        att = scaled_dot_attention(T.matmul(recv_star, dp.pq),
                                   T.matmul(src_star, dp.pk),
                                   T.matmul(src_star, dp.pv), num_heads)
        mixed = linear(T.gelu(linear(att, dp.bn_w1, dp.bn_b1)),
                       dp.bn_w2, dp.bn_b2)
        indices.append(idx)
        values.append(T.add(recv_star, mixed))
    if not indices:
        return recv_flat
    return T.index_put_rows(recv_flat, np.concatenate(indices),
                            T.concat(values, axis=0))


def pca_forward(z_s: T.Tensor, z_c: T.Tensor, masks: PolarMaskSet,
                params: PcaParams) -> tuple[T.Tensor, T.Tensor]:
    """Fuse segmentation features ``z_s`` and completion features ``z_c``.

    Returns (z_s_out, z_c_out). The branch that only supplies keys/values is
    returned untouched (the very same tensor); discarded tokens of the
    updated branch keep their input values bit-exact.
    """
    if z_s.shape != z_c.shape:
        raise ValueError(f"branch shapes differ: {z_s.shape} vs {z_c.shape}")
    h, w, c = z_s.shape
    if (h, w) != (masks.height, masks.width):
        raise ValueError(
            f"mask grid ({masks.height}, {masks.width}) does not match "
            f"features ({h}, {w})")
    s_flat = T.reshape(z_s, (h * w, c))
    c_flat = T.reshape(z_c, (h * w, c))

    z_s_out, z_c_out = z_s, z_c
    if params.direction in ("P2S", "Bi"):
        dp = params.p2s
        out = _fuse_into(s_flat, c_flat, dp.l_s_w, dp.l_s_b, dp.l_c_w, dp.l_c_b,
                         dp, masks, params.num_heads)
        z_s_out = T.reshape(out, (h, w, c))
    if params.direction in ("S2P", "Bi"):
        dp = params.s2p
        out = _fuse_into(c_flat, s_flat, dp.l_c_w, dp.l_c_b, dp.l_s_w, dp.l_s_b,
                         dp, masks, params.num_heads)
        z_c_out = T.reshape(out, (h, w, c))
    return z_s_out, z_c_out
