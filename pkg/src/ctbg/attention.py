"""Attention blocks: masked multi-head self-attention over set elements
and deformable cross-attention from queries into multi-scale scene maps.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import connected_components
from .nn import Linear, Module


def relation_aware_mask(n: int, pairs) -> np.ndarray:
    """Additive {0, -inf} mask letting attention act only inside the
    connected components induced by the proposal pairs.

    Undirected closure: (i, j) unlocks j's row toward i as well, and
    anything transitively linked.  The diagonal is always open.
    """
    labels = connected_components(n, pairs)
    same = labels[:, None] == labels[None, :]
    mask = np.where(same, 0.0, -np.inf).astype(ad.default_dtype())
    np.fill_diagonal(mask, 0.0)
    return mask


def validate_mask(mask: np.ndarray) -> bool:
    """Contract check used by tests: {0,-inf} entries, open symmetric diagonal."""
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        return False
    ok_values = np.all((mask == 0.0) | np.isneginf(mask))
    diag_open = np.all(np.diag(mask) == 0.0)
    symmetric = np.array_equal(mask, mask.T)
    return bool(ok_values and diag_open and symmetric)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.head_dim = dim // heads

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
        n, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (n, h, hd)), (1, 0, 2))

        q = split(self.query(x))
        k = split(self.key(x))
        v = split(self.value(x))
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
        weights = ad.softmax(logits, axis=-1, mask=mask)
        mixed = ad.matmul(weights, v)  # [h, n, hd]
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (n, d))
        out = self.out(merged)
        if return_weights:
            return out, weights.data
        return out


class DeformableCrossAttention(Module):
    """Queries sample the scene maps at learned offsets around their
    reference boxes and mix the samples with learned attention weights.

    Offsets are scaled by the reference box size, so a query looks around
    its own neighborhood regardless of box scale.  Offset and attention
    projections start at zero: the module begins by averaging samples
    taken exactly at the box center.

    Sampling commutes with the value projection (both are linear), so the
    raw channels are sampled first and projected after; the full maps are
    never projected.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        levels: int,
        points: int,
        in_channels: int,
        rng: np.random.Generator,
    ):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.offset = Linear(dim, heads * levels * points * 2, rng, zero_init=True)
        self.attn = Linear(dim, heads * levels * points, rng, zero_init=True)
        self.value = Linear(in_channels, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.levels = levels
        self.points = points
        self.in_channels = in_channels

    def __call__(
        self,
        queries: Tensor,
        centers: np.ndarray,
        sizes: np.ndarray,
        feature_maps: list[np.ndarray],
        return_internals: bool = False,
    ):
        m, d = queries.shape
        h, L, P, C = self.heads, self.levels, self.points, self.in_channels
        if len(feature_maps) != L:
            raise ValueError(f"expected {L} feature maps, got {len(feature_maps)}")
        hd = d // h
        dt = ad.default_dtype()

        off = ad.reshape(self.offset(queries), (m, h, L, P, 2))
        anchor = centers.astype(dt)[:, None, None, None, :]
        scale = sizes.astype(dt)[:, None, None, None, :]
        locs = ad.add(ad.mul(off, scale), anchor)  # scene coords, [m,h,L,P,2]

        sampled_levels = []
        for level, fmap in enumerate(feature_maps):
            Hl, Wl = fmap.shape[1], fmap.shape[2]
            pts = ad.index_axis(locs, level, axis=2)  # [m,h,P,2]
            to_pix = np.array([Wl, Hl], dtype=dt)
            pix = ad.add(ad.mul(pts, to_pix), np.array([-0.5, -0.5], dtype=dt))
            sampled_levels.append(ad.bilinear_sample(fmap, pix))  # [m,h,P,C]
        samp = ad.stack(sampled_levels, axis=2)  # [m,h,L,P,C]
        samp = ad.transpose(ad.reshape(samp, (m, h, L * P, C)), (1, 0, 2, 3))

        # per-head slice of the value projection: [C,d] -> [h,1,C,hd]
        w_heads = ad.reshape(
            ad.transpose(ad.reshape(self.value.weight, (C, h, hd)), (1, 0, 2)), (h, 1, C, hd)
        )
        b_heads = ad.reshape(self.value.bias, (h, 1, 1, hd))
        values = ad.add(ad.matmul(samp, w_heads), b_heads)  # [h,m,L*P,hd]

        attn = ad.softmax(ad.reshape(self.attn(queries), (m, h, L * P)), axis=-1)
        w = ad.reshape(ad.transpose(attn, (1, 0, 2)), (h, m, L * P, 1))
        mixed = ad.tensor_sum(ad.mul(values, w), axis=2)  # [h,m,hd]
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (m, d))
        out = self.out(merged)
        if return_internals:
            return out, {"locations": locs.data, "weights": attn.data}
        return out
