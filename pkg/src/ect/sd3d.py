"""SD3D token splitting: spatially continuous tiles x spectrally strided channel groups.

A feature map [C, H, W] is partitioned into n = C*s^2/c tokens of dimension
d = H*W*c/s^2.  Token (g, t) takes the strided channel set {g + j*(C/c)} on
the contiguous spatial tile t; splitting and alignment are exact inverse
index permutations (no arithmetic), so they compose to the identity bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ect import tensor as T
from ect.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class SplitSpec:
    """Geometry of one SD3D split: c channels per group, s x s spatial tiles."""

    c: int
    s: int
    H: int
    W: int
    C: int

    def __post_init__(self):
        if self.c <= 0 or self.s <= 0:
            raise ShapeError(f"split factors must be positive, got c={self.c}, s={self.s}")
        if self.C % self.c:
            raise ShapeError(f"C={self.C} not divisible by c={self.c}")
        if self.H % self.s:
            raise ShapeError(f"H={self.H} not divisible by s={self.s}")
        if self.W % self.s:
            raise ShapeError(f"W={self.W} not divisible by s={self.s}")

    @property
    def n_tokens(self) -> int:
        return self.C * self.s * self.s // self.c

    @property
    def token_dim(self) -> int:
        return self.H * self.W * self.c // (self.s * self.s)

    @property
    def tile_h(self) -> int:
        return self.H // self.s

    @property
    def tile_w(self) -> int:
        return self.W // self.s


@dataclass
class TokenGrid:
    """SD3D tokens as rows (n x d) plus the spec needed to invert the split."""

    tokens: Tensor
    spec: SplitSpec

    @property
    def n(self) -> int:
        return self.spec.n_tokens

    @property
    def d(self) -> int:
        return self.spec.token_dim


@lru_cache(maxsize=256)
def _split_index(spec: SplitSpec) -> np.ndarray:
    """Flat gather index: output element (token, pos) -> input offset in C*H*W."""
    c, s, H, W, C = spec.c, spec.s, spec.H, spec.W, spec.C
    G = C // c  # spectral group count; channels within a group are G apart
    hs, ws = H // s, W // s
    chan = (np.arange(G)[:, None] + np.arange(c)[None, :] * G)  # [G, c]
    yy = np.arange(hs)
    xx = np.arange(ws)
    idx = np.empty((spec.n_tokens, spec.token_dim), dtype=np.int64)
    for g in range(G):
        # token row layout: channel-major, then row-major over the tile
        plane = (chan[g][:, None, None] * (H * W)
                 + yy[None, :, None] * W
                 + xx[None, None, :])  # [c, hs, ws] before tile offset
        for ty in range(s):
            for tx in range(s):
                t = ty * s + tx
                idx[g * s * s + t] = (plane + (ty * hs) * W + (tx * ws)).reshape(-1)
    return idx


@lru_cache(maxsize=256)
def _align_index(spec: SplitSpec) -> np.ndarray:
    return np.argsort(_split_index(spec).reshape(-1), kind="stable")


def sd3d_split(fmap: Tensor, c: int, s: int) -> TokenGrid:
    """Split [C, H, W] into the n x d SD3D token matrix."""
    if fmap.ndim != 3:
        raise ShapeError(f"sd3d_split expects [C, H, W], got {fmap.shape}")
    C, H, W = fmap.shape
    spec = SplitSpec(c=c, s=s, H=H, W=W, C=C)
    idx = _split_index(spec)
    tokens = T.take_flat(fmap, idx, (spec.n_tokens, spec.token_dim))
    return TokenGrid(tokens=tokens, spec=spec)


def sd3d_align(grid: TokenGrid) -> Tensor:
    """Invert sd3d_split: restore the [C, H, W] feature map."""
    spec = grid.spec
    if grid.tokens.shape != (spec.n_tokens, spec.token_dim):
        raise ShapeError(
            f"token matrix {grid.tokens.shape} inconsistent with spec "
            f"({spec.n_tokens} x {spec.token_dim})"
        )
    inv = _align_index(spec)
    return T.take_flat(grid.tokens, inv, (spec.C, spec.H, spec.W))


def channel_shuffle(fmap: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: view (groups, C/groups), transpose, flatten."""
    if fmap.ndim != 3:
        raise ShapeError(f"channel_shuffle expects [C, H, W], got {fmap.shape}")
    C, H, W = fmap.shape
    if C % groups:
        raise ShapeError(f"C={C} not divisible by groups={groups}")
    perm = np.arange(C).reshape(groups, C // groups).T.reshape(-1)
    idx = perm[:, None] * (H * W) + np.arange(H * W)[None, :]
    return T.take_flat(fmap, idx, (C, H, W))
