"""The ECT macro architecture: multi-stage U-shape with ESAB_C encoder/decoder
levels, an ESAB_I bottleneck, skip fusion, a long input residual, plus exact
parameter counting, analytic FLOP accounting, and binary checkpoints with
partial loading for the two-stage training strategy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ect import tensor as T
from ect.esa import Esab, EsaConfig
from ect.layers import Conv2d, ConvTranspose2d, Module
from ect.tensor import NumericsError, ShapeError, Tensor

CKPT_MAGIC = b"ECTCKPT1"


@dataclass(frozen=True)
class BlockSpec:
    c: int
    s: int
    k: int


@dataclass
class EctConfig:
    stages: int = 2
    base_channels: int = 32
    levels: int = 2
    esab_per_level: int = 1
    ffn_expansion: int = 4
    cross: BlockSpec = field(default_factory=lambda: BlockSpec(c=4, s=2, k=12))
    inter: BlockSpec = field(default_factory=lambda: BlockSpec(c=16, s=4, k=8))
    in_channels: int = 3
    out_channels: int = 31
    use_sd3d: bool = True
    use_dlrm: bool = True
    tau_init: float = 1.0

    @property
    def pad_multiple(self) -> int:
        # Stage bodies must divide cleanly through every downsample and split,
        # and the bottleneck's per-token spatial dim must divide by its head
        # count (2^levels): padding each extent to an extra factor of
        # 2^ceil(levels/2) makes the spatial product divisible by 2^levels.
        down = 2 ** self.levels
        head_factor = 2 ** ((self.levels + 1) // 2)
        return down * max(self.cross.s, self.inter.s) * head_factor

    def cross_cfg(self, channels: int, heads: int) -> EsaConfig:
        blk = self.cross
        if not self.use_sd3d:
            # spectral-wise self-attention baseline: one token per channel
            blk, heads = BlockSpec(c=1, s=1, k=min(self.cross.k, channels)), 1
        return EsaConfig("cross", channels=channels, c=blk.c, s=blk.s, k=blk.k,
                         heads=heads, tau_init=self.tau_init, use_dlrm=self.use_dlrm)

    def inter_cfg(self, channels: int, heads: int) -> EsaConfig:
        blk = self.inter if self.use_sd3d else BlockSpec(c=1, s=1, k=1)
        return EsaConfig("inter", channels=channels, c=blk.c, s=blk.s, k=blk.k,
                         heads=heads, tau_init=self.tau_init, use_dlrm=self.use_dlrm)


def tiny_config(stages: int = 1, use_sd3d: bool = True, use_dlrm: bool = True) -> EctConfig:
    """Desk-scale config for gradient checks and smoke training.

    Single level keeps the bottleneck's per-head attention rows longer than
    one element; length-1 rows make cosine attention degenerate to sign(x),
    which finite differences cannot probe."""
    return EctConfig(stages=stages, base_channels=8, levels=1,
                     cross=BlockSpec(c=4, s=2, k=4),
                     inter=BlockSpec(c=8, s=2, k=4),
                     use_sd3d=use_sd3d, use_dlrm=use_dlrm)


class _BlockList(Module):
    def __init__(self, blocks):
        super().__init__()
        for i, b in enumerate(blocks):
            setattr(self, str(i), b)
        self._blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for b in self._blocks:
            x = b.forward(x)
        return x


class Stage(Module):
    """One U-shaped module: embed, encoder levels, bottleneck, decoder levels, map."""

    def __init__(self, cfg: EctConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        C = cfg.base_channels
        self.embed = Conv2d(cfg.out_channels, C, 3, rng, padding=1)
        enc, down = [], []
        ch, heads = C, 1
        for _ in range(cfg.levels):
            enc.append(_BlockList([Esab(cfg.cross_cfg(ch, heads), rng, cfg.ffn_expansion)
                                   for _ in range(cfg.esab_per_level)]))
            down.append(Conv2d(ch, ch * 2, 4, rng, stride=2, padding=1))
            ch, heads = ch * 2, heads * 2
        self.enc = _BlockList(enc)
        self.down = _BlockList(down)
        self.bottleneck = Esab(cfg.inter_cfg(ch, heads), rng, cfg.ffn_expansion)
        up, fuse, dec = [], [], []
        for _ in range(cfg.levels):
            up.append(ConvTranspose2d(ch, ch // 2, rng))
            ch, heads = ch // 2, heads // 2
            fuse.append(Conv2d(ch * 2, ch, 1, rng))
            dec.append(_BlockList([Esab(cfg.cross_cfg(ch, heads), rng, cfg.ffn_expansion)
                                   for _ in range(cfg.esab_per_level)]))
        self.up = _BlockList(up)
        self.fuse = _BlockList(fuse)
        self.dec = _BlockList(dec)
        self.map = Conv2d(C, cfg.out_channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        z = self.embed.forward_chw(x)
        skips = []
        for lv in range(cfg.levels):
            z = self.enc._blocks[lv].forward(z)
            skips.append(z)
            z = self.down._blocks[lv].forward_chw(z)
        z = self.bottleneck.forward(z)
        for lv in range(cfg.levels):
            z = self.up._blocks[lv].forward_chw(z)
            z = T.concat([z, skips[-1 - lv]], axis=0)
            z = self.fuse._blocks[lv].forward_chw(z)
            z = self.dec._blocks[lv].forward(z)
        return self.map.forward_chw(z)


class EctModel(Module):
    def __init__(self, cfg: EctConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.head = Conv2d(cfg.in_channels, cfg.out_channels, 3, rng, padding=1)
        self.stages = _BlockList([Stage(cfg, rng) for _ in range(cfg.stages)])

    def forward(self, rgb: Tensor) -> Tensor:
        """[3, H, W] -> [31, H, W] for any extents (reflect-pad to multiple, crop back)."""
        if rgb.ndim != 3 or rgb.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"expected [{self.cfg.in_channels}, H, W] input, got {rgb.shape}")
        if not np.all(np.isfinite(rgb.data)):
            raise NumericsError("non-finite input image")
        _, H, W = rgb.shape
        m = self.cfg.pad_multiple
        ph = (-H) % m
        pw = (-W) % m
        x = rgb
        if ph or pw:
            # symmetric-ish reflect pad; tensor op keeps the tape intact
            x = T.reflect_pad2d(x, (ph + 1) // 2, (pw + 1) // 2)
            x = T.narrow(T.narrow(x, 1, 0, H + ph), 2, 0, W + pw)
        z0 = self.head.forward_chw(x)
        z = z0
        for stage in self.stages._blocks:
            z = stage.forward(z)
        out = T.add(z, z0)  # long-range residual from the head conv
        if ph or pw:
            oy, ox = (ph + 1) // 2, (pw + 1) // 2
            out = T.narrow(T.narrow(out, 1, oy, H), 2, ox, W)
        return out


def build(cfg: EctConfig, seed: int = 0) -> EctModel:
    return EctModel(cfg, np.random.default_rng(seed))


def count_params(model: Module) -> int:
    return model.count_params()


# -- FLOP accounting ------------------------------------------------------

def _conv_flops(cin, cout, k, hout, wout, groups=1, bias=True):
    mac = cout * (cin // groups) * k * k * hout * wout
    return 2 * mac + (cout * hout * wout if bias else 0)


def _esab_flops(cfg: EsaConfig, H: int, W: int, lines: list) -> int:
    C, c, s, k, heads = cfg.channels, cfg.c, cfg.s, cfg.k, cfg.heads
    total = 0
    groups = C // c
    total += 2 * _conv_flops(C, C, 3, H, W, groups=groups)          # pos-enc convs
    total += 3 * _conv_flops(C, C, 1, H, W)                          # Q, K, V projections
    n_tok = C * s * s // c
    d = H * W * c // (s * s)
    if cfg.variant == "cross":
        n, axis_d, batch = n_tok, d // heads, 1
    else:
        n, axis_d, batch = c, (d // c) // heads, n_tok
    attn = batch * heads * (2 * 2 * n * n * axis_d)                  # QK^T and A V
    mix = batch * 2 * n * n * (axis_d * heads)                       # token-mixing linear
    total += attn + mix
    if cfg.use_dlrm:
        in_ch = 4 * c if cfg.variant == "cross" else 4
        length = n_tok if cfg.variant == "cross" else c
        lrf_batch = 1 if cfg.variant == "cross" else n_tok
        total += 2 * lrf_batch * 2 * k * in_ch * 3 * length          # two conv1d passes
        total += batch * 2 * n * n * k                               # D = Qf Kf^T
        total += batch * 2 * n * n * (axis_d * heads)                # D applied
    total += _conv_flops(C, 4 * C, 1, H, W)                          # FFN expand
    total += _conv_flops(4 * C, 4 * C, 3, H, W, groups=4 * C)        # FFN depthwise
    total += _conv_flops(4 * C, C, 1, H, W)                          # FFN contract
    lines.append(f"esab_{cfg.variant} C={C} at {H}x{W}: {total}")
    return total


def count_flops(model: EctModel, H: int, W: int) -> tuple[int, str]:
    """Analytic multiply-accumulate count (x2) for one forward at H x W.

    Returns (flops, formula sheet).  H, W are taken after padding.
    """
    cfg = model.cfg
    m = cfg.pad_multiple
    H += (-H) % m
    W += (-W) % m
    lines = [f"input {H}x{W} (after pad to multiple of {m})"]
    total = _conv_flops(cfg.in_channels, cfg.out_channels, 3, H, W)
    lines.append(f"head conv: {total}")
    per_stage = 0
    C = cfg.base_channels
    per_stage += _conv_flops(cfg.out_channels, C, 3, H, W)
    ch, heads, h, w = C, 1, H, W
    for lv in range(cfg.levels):
        per_stage += cfg.esab_per_level * _esab_flops(cfg.cross_cfg(ch, heads), h, w, lines)
        per_stage += _conv_flops(ch, ch * 2, 4, h // 2, w // 2)
        ch, heads, h, w = ch * 2, heads * 2, h // 2, w // 2
    per_stage += _esab_flops(cfg.inter_cfg(ch, heads), h, w, lines)
    for lv in range(cfg.levels):
        h, w = h * 2, w * 2
        per_stage += _conv_flops(ch, ch // 2, 2, h, w)               # transpose conv
        ch, heads = ch // 2, heads // 2
        per_stage += _conv_flops(ch * 2, ch, 1, h, w)                # skip fusion
        per_stage += cfg.esab_per_level * _esab_flops(cfg.cross_cfg(ch, heads), h, w, lines)
    per_stage += _conv_flops(C, cfg.out_channels, 3, H, W)
    lines.append(f"per stage: {per_stage}")
    total += cfg.stages * per_stage
    lines.append(f"total ({cfg.stages} stages): {total}")
    return total, "\n".join(lines)


# -- checkpointing --------------------------------------------------------

def save_checkpoint(model: Module, path: str) -> None:
    """Versioned binary: magic, entry count, then (name, shape, f32 LE data)."""
    entries = list(model.named_params())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, p in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.ndim))
            for ext in p.shape:
                f.write(struct.pack("<I", ext))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


class CheckpointError(IOError):
    pass


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"bad magic in {path!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(shape)
            out[name] = data
    return out


def load_checkpoint(model: Module, path: str) -> None:
    """Load every parameter; names and shapes must match exactly."""
    entries = read_checkpoint(path)
    params = dict(model.named_params())
    missing = set(params) - set(entries)
    extra = set(entries) - set(params)
    if missing or extra:
        raise CheckpointError(f"registry mismatch: missing={sorted(missing)[:5]}, extra={sorted(extra)[:5]}")
    for name, arr in entries.items():
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: model {p.shape}, file {arr.shape}")
        p.data[...] = arr.astype(p.data.dtype)


def load_partial(model: Module, path: str) -> int:
    """Load every checkpoint entry whose name exists in the model (e.g. the
    stage-0 subtree of a 1-stage pretrain); returns the loaded tensor count."""
    entries = read_checkpoint(path)
    params = dict(model.named_params())
    loaded = 0
    for name, arr in entries.items():
        p = params.get(name)
        if p is None:
            continue
        if p.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: model {p.shape}, file {arr.shape}")
        p.data[...] = arr.astype(p.data.dtype)
        loaded += 1
    if loaded == 0:
        raise CheckpointError("no checkpoint entry matched any model parameter (naming drift?)")
    return loaded
