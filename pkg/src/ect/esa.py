"""Exhaustive Self-Attention: USSA cosine attention fused with the DLRM
low-rank dependence map over SD3D tokens, plus positional encoding, FFN,
and the two residual block variants (Cross: between tokens, Inter: within
tokens).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ect import tensor as T
from ect.layers import ChannelLayerNorm, Conv1d, Conv2d, Linear, Module, _param
from ect.sd3d import SplitSpec, TokenGrid, channel_shuffle, sd3d_align, sd3d_split
from ect.tensor import ShapeError, Tensor


@dataclass
class EsaConfig:
    """Hyperparameters of one attention block.

    Cross default: c=4, s=2, k=12 (attention between the n tokens).
    Inter default: c=16, s=4, k=8 (attention within each token, over its
    c strided channel slices).
    """

    variant: str  # "cross" | "inter"
    channels: int
    c: int
    s: int
    k: int
    heads: int = 1
    tau_init: float = 1.0
    use_dlrm: bool = True

    def __post_init__(self):
        if self.variant not in ("cross", "inter"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.channels % self.c:
            raise ShapeError(f"channels={self.channels} not divisible by c={self.c}")
        if self.variant == "cross":
            if self.c % self.heads:
                raise ShapeError(f"c={self.c} not divisible by heads={self.heads}")
            n = self.channels * self.s * self.s // self.c
            if self.k > n:
                raise ShapeError(f"low-rank factor k={self.k} exceeds token count n={n}")
        else:
            if self.k > self.c:
                raise ShapeError(f"low-rank factor k={self.k} exceeds attention axis c={self.c}")

    @property
    def n_tokens_per_channelset(self) -> int:
        return self.channels * self.s * self.s // self.c


def ussa(q: Tensor, k: Tensor, tau: Tensor) -> Tensor:
    """Cosine-similarity attention with learnable temperature.

    q, k: [..., n, d_h] with tokens as rows.  Returns the row-stochastic
    attention map [..., n, n]; rows index queries.
    """
    qn = T.l2_normalize_rows(q)
    kn = T.l2_normalize_rows(k)
    sim = T.matmul(qn, T.swap_last2(kn))
    return T.softmax(T.mul(sim, tau), axis=-1)


def dlrm(qf: Tensor, kf: Tensor) -> Tensor:
    """Low-rank dependence map D = Qf Kf^T from two LRF outputs [..., n, k].

    Rows of Qf/Kf live on the k-simplex, so entries of D lie in (0, 1] and
    rank(D) <= k.
    """
    if qf.shape[-1] != kf.shape[-1]:
        raise ShapeError(f"LRF rank mismatch: {qf.shape[-1]} vs {kf.shape[-1]}")
    return T.matmul(qf, T.swap_last2(kf))


class PositionalEncoding(Module):
    """Dynamic positional encoding: residual add of two grouped 3x3 convs.

    Group size equals the SD3D spectral factor c (groups = C/c), so the
    encoder's receptive structure mirrors the split; c=1 degenerates to
    depthwise.
    """

    def __init__(self, channels: int, c: int, rng: np.random.Generator):
        super().__init__()
        groups = channels // c
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1, groups=groups)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, groups=groups)

    def forward(self, x: Tensor) -> Tensor:
        pos = self.conv2.forward_chw(T.gelu(self.conv1.forward_chw(x)))
        return T.add(x, pos)


class LowRankFeatures(Module):
    """LRF: 3D token restore -> 2x2 adaptive pool -> conv1d along the
    attention axis (kernel 3, pad 1) -> softmax over the k axis."""

    def __init__(self, cfg: EsaConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        in_ch = 4 * cfg.c if cfg.variant == "cross" else 4
        self.conv = Conv1d(in_ch, cfg.k, 3, rng, padding=1)

    def forward(self, grid: TokenGrid) -> Tensor:
        cfg, spec = self.cfg, grid.spec
        n, c = spec.n_tokens, spec.c
        hs, ws = spec.tile_h, spec.tile_w
        if hs < 2 or ws < 2:
            raise ShapeError(f"token tile {hs}x{ws} smaller than the 2x2 pooling grid")
        planes = T.reshape(grid.tokens, (n, c, hs, ws))
        pooled = T.adaptive_avg_pool2d(planes, 2, 2)  # [n, c, 2, 2]
        if cfg.variant == "cross":
            feats = T.reshape(pooled, (n, 4 * c))
            seq = T.reshape(T.transpose(feats, (1, 0)), (1, 4 * c, n))
            out = self.conv.forward(seq)  # [1, k, n]
            qf = T.transpose(T.reshape(out, (cfg.k, n)), (1, 0))  # [n, k]
        else:
            feats = T.transpose(T.reshape(pooled, (n, c, 4)), (0, 2, 1))  # [n, 4, c]
            out = self.conv.forward(feats)  # [n, k, c]
            qf = T.swap_last2(out)  # [n, c, k]
        return T.softmax(qf, axis=-1)


class Ffn(Module):
    """1x1 expand -> GELU -> 3x3 depthwise -> GELU -> 1x1 contract."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 4):
        super().__init__()
        hidden = channels * expansion
        self.expand = Conv2d(channels, hidden, 1, rng)
        self.depthwise = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.contract = Conv2d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = T.gelu(self.expand.forward_chw(x))
        y = T.gelu(self.depthwise.forward_chw(y))
        return self.contract.forward_chw(y)


class Esa(Module):
    """Exhaustive Self-Attention over a [C, H, W] feature map."""

    def __init__(self, cfg: EsaConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        self.pos_enc = PositionalEncoding(C, cfg.c, rng)
        self.wq = Conv2d(C, C, 1, rng)
        self.wk = Conv2d(C, C, 1, rng)
        self.wv = Conv2d(C, C, 1, rng)
        self.tau = _param(np.full(cfg.heads, cfg.tau_init))
        mix = cfg.n_tokens_per_channelset if cfg.variant == "cross" else cfg.c
        self.proj = Linear(mix, rng)
        if cfg.use_dlrm:
            self.lrf_q = LowRankFeatures(cfg, rng)
            self.lrf_k = LowRankFeatures(cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        C, H, W = x.shape
        if C != cfg.channels:
            raise ShapeError(f"expected {cfg.channels} channels, got {C}")
        x = self.pos_enc.forward(x)
        q = sd3d_split(self.wq.forward_chw(x), cfg.c, cfg.s)
        k = sd3d_split(self.wk.forward_chw(x), cfg.c, cfg.s)
        v = sd3d_split(self.wv.forward_chw(x), cfg.c, cfg.s)
        if cfg.variant == "cross":
            fused = self._attend_cross(q, k, v)
        else:
            fused = self._attend_inter(q, k, v)
        y = sd3d_align(TokenGrid(tokens=fused, spec=q.spec))
        return channel_shuffle(y, C // cfg.c)

    def _attend_cross(self, q: TokenGrid, k: TokenGrid, v: TokenGrid) -> Tensor:
        cfg = self.cfg
        n, d = q.n, q.d
        d_h = d // cfg.heads
        parts = []
        for h in range(cfg.heads):
            qh = T.narrow(q.tokens, 1, h * d_h, d_h)
            kh = T.narrow(k.tokens, 1, h * d_h, d_h)
            vh = T.narrow(v.tokens, 1, h * d_h, d_h)
            attn = ussa(qh, kh, T.narrow(self.tau, 0, h, 1))
            parts.append(T.matmul(attn, vh))
        fused = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        mixed = self.proj.forward(fused)  # n x n token-mixing linear
        if not cfg.use_dlrm:
            return mixed
        dep = dlrm(self.lrf_q.forward(q), self.lrf_k.forward(k))
        return T.matmul(dep, mixed)

    def _attend_inter(self, q: TokenGrid, k: TokenGrid, v: TokenGrid) -> Tensor:
        cfg = self.cfg
        n, d = q.n, q.d
        c = cfg.c
        hw = d // c
        if hw % cfg.heads:
            raise ShapeError(f"sub-token dim {hw} not divisible by heads={cfg.heads}")
        hw_h = hw // cfg.heads
        qs = T.reshape(q.tokens, (n, c, hw))
        ks = T.reshape(k.tokens, (n, c, hw))
        vs = T.reshape(v.tokens, (n, c, hw))
        parts = []
        for h in range(cfg.heads):
            qh = T.narrow(qs, 2, h * hw_h, hw_h)
            kh = T.narrow(ks, 2, h * hw_h, hw_h)
            vh = T.narrow(vs, 2, h * hw_h, hw_h)
            attn = ussa(qh, kh, T.narrow(self.tau, 0, h, 1))  # [n, c, c]
            parts.append(T.matmul(attn, vh))
        fused = parts[0] if len(parts) == 1 else T.concat(parts, axis=2)
        mixed = self.proj.forward(fused)  # c x c sub-token mixing per token
        if cfg.use_dlrm:
            dep = dlrm(self.lrf_q.forward(q), self.lrf_k.forward(k))  # [n, c, c]
            mixed = T.matmul(dep, mixed)
        return T.reshape(mixed, (n, d))


class Esab(Module):
    """Pre-norm residual block: X1 = X + ESA(LN(X)); X2 = X1 + FFN(LN(X1))."""

    def __init__(self, cfg: EsaConfig, rng: np.random.Generator, ffn_expansion: int = 4):
        super().__init__()
        self.norm1 = ChannelLayerNorm(cfg.channels)
        self.esa = Esa(cfg, rng)
        self.norm2 = ChannelLayerNorm(cfg.channels)
        self.ffn = Ffn(cfg.channels, rng, expansion=ffn_expansion)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.esa.forward(self.norm1.forward(x)))
        return T.add(x, self.ffn.forward(self.norm2.forward(x)))
