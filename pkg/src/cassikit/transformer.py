"""Windowed-attention denoiser with local and non-local token mixing.

A three-level U-shaped network of identical blocks.  Each block applies, in
order: layer norm, local window attention, layer norm, non-local window
attention, layer norm, and a gated feed-forward — each of the three
sub-modules adds its own input back (the residual closes over the normalized
features, matching the update equations the block implements).

Local attention partitions the plane into MxM pixel windows; tokens are
pixels, attention is an (M^2 x M^2) matrix per window and head, and the
per-head channel width is C/heads.  Non-local attention partitions the plane
into an NxN grid and flattens each cell into a single token of width
H*W*C/N^2, so its attention matrix is (N^2 x N^2) per head regardless of the
image size; the per-head width is H*W*C/(heads*N^2).  Q, K, V all come from
a pointwise conv followed by a depthwise 3x3 conv; both attention variants
add a learned (zero-initialized) position bias to the logits before softmax
and finish with a pointwise output projection.

The denoiser conditions on the stage's fidelity weight eta by appending one
constant eta-valued channel to its input before the embedding conv, and it
predicts a residual: output = input + R.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cassi import HsiCube
from .errors import ParameterError, ShapeError
from .params import Initializer, ParamStore
from .tensor import (Tensor, add, as_tensor, concat, conv2d, conv_transpose2d,
                     gelu, layer_norm, matmul, mul, reshape, softmax_lastdim,
                     transpose)

GDFN_EXPANSION = 2
SECTIONS = ("enc1", "enc2", "mid", "dec2", "dec1")


@dataclass(frozen=True)
class LnltConfig:
    """Architecture hyperparameters.

    Level widths are (C, 2C, 4C) with per-level head counts `heads`.
    `local_window` is M (pixels per window side); `nonlocal_grid` is N
    (grid cells per image side).  Inputs must have H and W divisible by
    4*M and 4*N so that every level tiles exactly after two downsamplings.
    """

    base_channels: int = 32
    blocks_per_level: int = 1
    heads: tuple = (1, 2, 4)
    local_window: int = 8
    nonlocal_grid: int = 8

    def __post_init__(self):
        if self.base_channels < 1 or self.blocks_per_level < 1:
            raise ParameterError("base_channels and blocks_per_level must be >= 1")
        if len(self.heads) != 3 or any(h < 1 for h in self.heads):
            raise ParameterError(f"heads must be three positive counts, got {self.heads}")
        if self.local_window < 1 or self.nonlocal_grid < 1:
            raise ParameterError("window sizes must be >= 1")
        for level, h in enumerate(self.heads):
            width = self.base_channels * (1 << level)
            if width % h:
                raise ParameterError(f"level {level} width {width} not divisible by {h} heads")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (1 << level)


def settings_to_config(settings) -> LnltConfig:
    """Accept either an LnltConfig or the hqs-side settings mirror."""
    if isinstance(settings, LnltConfig):
        return settings
    return LnltConfig(base_channels=settings.base_channels,
                      blocks_per_level=settings.blocks_per_level,
                      heads=tuple(settings.heads),
                      local_window=settings.local_window,
                      nonlocal_grid=settings.nonlocal_grid)


@dataclass(frozen=True)
class QkvWeights:
    point_w: Tensor
    point_b: Tensor
    depth_w: Tensor
    depth_b: Tensor


@dataclass(frozen=True)
class MsaWeights:
    q: QkvWeights
    k: QkvWeights
    v: QkvWeights
    pos: Tensor
    proj_w: Tensor
    proj_b: Tensor


@dataclass(frozen=True)
class GdfnWeights:
    b1_point_w: Tensor
    b1_point_b: Tensor
    b1_depth_w: Tensor
    b1_depth_b: Tensor
    b2_point_w: Tensor
    b2_point_b: Tensor
    b2_depth_w: Tensor
    b2_depth_b: Tensor
    proj_w: Tensor
    proj_b: Tensor


@dataclass(frozen=True)
class BlockWeights:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    local: MsaWeights
    ln2_gamma: Tensor
    ln2_beta: Tensor
    nonlocal_: MsaWeights
    ln3_gamma: Tensor
    ln3_beta: Tensor
    gdfn: GdfnWeights


@dataclass(frozen=True)
class LnltWeights:
    embed_w: Tensor
    embed_b: Tensor
    sections: dict
    down1_w: Tensor
    down1_b: Tensor
    down2_w: Tensor
    down2_b: Tensor
    up2_w: Tensor
    up2_b: Tensor
    fuse2_w: Tensor
    fuse2_b: Tensor
    up1_w: Tensor
    up1_b: Tensor
    fuse1_w: Tensor
    fuse1_b: Tensor
    out_w: Tensor
    out_b: Tensor


_LEVEL_OF_SECTION = {"enc1": 0, "enc2": 1, "mid": 2, "dec2": 1, "dec1": 0}


def _register_msa(init: Initializer, prefix: str, c: int, heads: int, tokens: int) -> None:
    for name in ("q", "k", "v"):
        init.conv(f"{prefix}.{name}.point", 1, 1, c, c)
        init.conv(f"{prefix}.{name}.depth", 3, 3, 1, c)
    init.zeros(f"{prefix}.pos", (heads, tokens, tokens))
    init.conv(f"{prefix}.proj", 1, 1, c, c)


def _register_block(init: Initializer, prefix: str, c: int, heads: int, cfg: LnltConfig) -> None:
    m2 = cfg.local_window ** 2
    n2 = cfg.nonlocal_grid ** 2
    e = GDFN_EXPANSION * c
    init.layer_norm(f"{prefix}.ln1", c)
    _register_msa(init, f"{prefix}.local", c, heads, m2)
    init.layer_norm(f"{prefix}.ln2", c)
    _register_msa(init, f"{prefix}.nonlocal", c, heads, n2)
    init.layer_norm(f"{prefix}.ln3", c)
    init.conv(f"{prefix}.gdfn.b1.point", 1, 1, c, e)
    init.conv(f"{prefix}.gdfn.b1.depth", 3, 3, 1, e)
    init.conv(f"{prefix}.gdfn.b2.point", 1, 1, c, e)
    init.conv(f"{prefix}.gdfn.b2.depth", 3, 3, 1, e)
    init.conv(f"{prefix}.gdfn.proj", 1, 1, e, c)


def register_lnlt_params(init: Initializer, cfg: LnltConfig, n_bands: int) -> None:
    """Register denoiser weights in a fixed, documented order."""
    c = cfg.base_channels
    init.conv("lnlt.embed", 3, 3, n_bands + 1, c)
    for section in SECTIONS:
        level = _LEVEL_OF_SECTION[section]
        width = cfg.level_channels(level)
        for b in range(cfg.blocks_per_level):
            _register_block(init, f"lnlt.{section}.{b}", width, cfg.heads[level], cfg)
        if section == "enc1":
            init.conv("lnlt.down1", 4, 4, c, 2 * c)
        elif section == "enc2":
            init.conv("lnlt.down2", 4, 4, 2 * c, 4 * c)
        elif section == "mid":
            init.conv_transpose("lnlt.up2", 2, 4 * c, 2 * c)
            init.conv("lnlt.fuse2", 1, 1, 4 * c, 2 * c)
        elif section == "dec2":
            init.conv_transpose("lnlt.up1", 2, 2 * c, c)
            init.conv("lnlt.fuse1", 1, 1, 2 * c, c)
    init.conv("lnlt.out", 3, 3, c, n_bands)


def _msa_weights(store: ParamStore, prefix: str) -> MsaWeights:
    def qkv(name):
        return QkvWeights(point_w=store[f"{prefix}.{name}.point.w"],
                          point_b=store[f"{prefix}.{name}.point.b"],
                          depth_w=store[f"{prefix}.{name}.depth.w"],
                          depth_b=store[f"{prefix}.{name}.depth.b"])

    return MsaWeights(q=qkv("q"), k=qkv("k"), v=qkv("v"), pos=store[f"{prefix}.pos"],
                      proj_w=store[f"{prefix}.proj.w"], proj_b=store[f"{prefix}.proj.b"])


def _block_weights(store: ParamStore, prefix: str) -> BlockWeights:
    return BlockWeights(
        ln1_gamma=store[f"{prefix}.ln1.gamma"], ln1_beta=store[f"{prefix}.ln1.beta"],
        local=_msa_weights(store, f"{prefix}.local"),
        ln2_gamma=store[f"{prefix}.ln2.gamma"], ln2_beta=store[f"{prefix}.ln2.beta"],
        nonlocal_=_msa_weights(store, f"{prefix}.nonlocal"),
        ln3_gamma=store[f"{prefix}.ln3.gamma"], ln3_beta=store[f"{prefix}.ln3.beta"],
        gdfn=GdfnWeights(
            b1_point_w=store[f"{prefix}.gdfn.b1.point.w"], b1_point_b=store[f"{prefix}.gdfn.b1.point.b"],
            b1_depth_w=store[f"{prefix}.gdfn.b1.depth.w"], b1_depth_b=store[f"{prefix}.gdfn.b1.depth.b"],
            b2_point_w=store[f"{prefix}.gdfn.b2.point.w"], b2_point_b=store[f"{prefix}.gdfn.b2.point.b"],
            b2_depth_w=store[f"{prefix}.gdfn.b2.depth.w"], b2_depth_b=store[f"{prefix}.gdfn.b2.depth.b"],
            proj_w=store[f"{prefix}.gdfn.proj.w"], proj_b=store[f"{prefix}.gdfn.proj.b"]))


def lnlt_weights(store: ParamStore, settings, n_bands: int) -> LnltWeights:
    """Build the nested weight view for the given architecture settings."""
    cfg = settings_to_config(settings)
    sections = {
        section: [
            _block_weights(store, f"lnlt.{section}.{b}")
            for b in range(cfg.blocks_per_level)
        ]
        for section in SECTIONS
    }
    w = LnltWeights(
        embed_w=store["lnlt.embed.w"], embed_b=store["lnlt.embed.b"], sections=sections,
        down1_w=store["lnlt.down1.w"], down1_b=store["lnlt.down1.b"],
        down2_w=store["lnlt.down2.w"], down2_b=store["lnlt.down2.b"],
        up2_w=store["lnlt.up2.w"], up2_b=store["lnlt.up2.b"],
        fuse2_w=store["lnlt.fuse2.w"], fuse2_b=store["lnlt.fuse2.b"],
        up1_w=store["lnlt.up1.w"], up1_b=store["lnlt.up1.b"],
        fuse1_w=store["lnlt.fuse1.w"], fuse1_b=store["lnlt.fuse1.b"],
        out_w=store["lnlt.out.w"], out_b=store["lnlt.out.b"])
    if w.embed_w.shape[2] != n_bands + 1:
        raise ShapeError(f"embed conv expects {w.embed_w.shape[2] - 1} bands, got {n_bands}")
    return w


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def qkv_project(x: Tensor, w: QkvWeights) -> Tensor:
    """Pointwise conv then depthwise 3x3 conv (padding 1, shape-preserving)."""
    t = conv2d(x, w.point_w, w.point_b)
    c = t.shape[-1]
    return conv2d(t, w.depth_w, w.depth_b, padding=1, groups=c)


def _to_windows(t: Tensor, m: int) -> Tensor:
    """[H, W, C] -> [T, M^2, C] row-major windows, row-major pixels inside."""
    h, w, c = t.shape
    t = reshape(t, (h // m, m, w // m, m, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, ((h // m) * (w // m), m * m, c))


def _from_windows(t: Tensor, h: int, w: int, m: int) -> Tensor:
    c = t.shape[-1]
    t = reshape(t, (h // m, w // m, m, m, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, (h, w, c))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """[T, L, C] -> [T, heads, L, C/heads] (contiguous channel chunks)."""
    tt, ll, c = t.shape
    t = reshape(t, (tt, ll, heads, c // heads))
    return transpose(t, (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    tt, heads, ll, d = t.shape
    t = transpose(t, (0, 2, 1, 3))
    return reshape(t, (tt, ll, heads * d))


def local_msa(x: Tensor, w: MsaWeights, window: int, heads: int,
              return_attn: bool = False):
    """Per-window multi-head self-attention over pixel tokens.

    Attention logits are Q K^T / sqrt(C/heads) plus the learned position
    bias; the projected result adds the input back.  The attention tensor
    has shape [windows, heads, M^2, M^2].
    """
    h, wdt, c = x.shape
    m = window
    if h % m or wdt % m:
        raise ShapeError(f"extents {(h, wdt)} not divisible by window {m}")
    if c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    if w.pos.shape != (heads, m * m, m * m):
        raise ShapeError(f"position bias {w.pos.shape} != {(heads, m * m, m * m)}")
    d = c // heads
    q = _split_heads(_to_windows(qkv_project(x, w.q), m), heads)
    k = _split_heads(_to_windows(qkv_project(x, w.k), m), heads)
    v = _split_heads(_to_windows(qkv_project(x, w.v), m), heads)
    logits = add(mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d)), w.pos)
    attn = softmax_lastdim(logits)
    mixed = _from_windows(_merge_heads(matmul(attn, v)), h, wdt, m)
    out = add(conv2d(mixed, w.proj_w, w.proj_b), x)
    if return_attn:
        return out, attn.detach().copy_array()
    return out


def _to_grid_tokens(t: Tensor, n: int) -> Tensor:
    """[H, W, C] -> [N^2, H*W*C/N^2]: each grid cell flattens to one token."""
    h, w, c = t.shape
    t = reshape(t, (n, h // n, n, w // n, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, (n * n, (h // n) * (w // n) * c))


def _from_grid_tokens(t: Tensor, h: int, w: int, c: int, n: int) -> Tensor:
    t = reshape(t, (n, n, h // n, w // n, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, (h, w, c))


def nonlocal_msa(x: Tensor, w: MsaWeights, grid: int, heads: int,
                 return_attn: bool = False):
    """Multi-head self-attention over grid-cell tokens.

    The token count is N^2 independent of image size; token width is
    H*W*C/N^2 and the per-head width H*W*C/(heads*N^2).  The attention
    tensor has shape [heads, N^2, N^2].
    """
    h, wdt, c = x.shape
    n = grid
    if h % n or wdt % n:
        raise ShapeError(f"extents {(h, wdt)} not divisible by grid {n}")
    token_width = (h // n) * (wdt // n) * c
    if token_width % heads:
        raise ShapeError(f"token width {token_width} not divisible by {heads} heads")
    if w.pos.shape != (heads, n * n, n * n):
        raise ShapeError(f"position bias {w.pos.shape} != {(heads, n * n, n * n)}")
    d = token_width // heads
    def tokens(proj):
        t = _to_grid_tokens(proj, n)
        t = reshape(t, (n * n, heads, d))
        return transpose(t, (1, 0, 2))
    q = tokens(qkv_project(x, w.q))
    k = tokens(qkv_project(x, w.k))
    v = tokens(qkv_project(x, w.v))
    logits = add(mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d)), w.pos)
    attn = softmax_lastdim(logits)
    mixed = transpose(matmul(attn, v), (1, 0, 2))
    mixed = _from_grid_tokens(reshape(mixed, (n * n, token_width)), h, wdt, c, n)
    out = add(conv2d(mixed, w.proj_w, w.proj_b), x)
    if return_attn:
        return out, attn.detach().copy_array()
    return out


def gdfn(x: Tensor, w: GdfnWeights) -> Tensor:
    """Gated feed-forward: two parallel pointwise+depthwise branches, one
    GELU-gated, multiplied, projected back, plus the input."""
    c1 = w.b1_point_w.shape[3]
    b1 = conv2d(conv2d(x, w.b1_point_w, w.b1_point_b), w.b1_depth_w, w.b1_depth_b,
                padding=1, groups=c1)
    b2 = conv2d(conv2d(x, w.b2_point_w, w.b2_point_b), w.b2_depth_w, w.b2_depth_b,
                padding=1, groups=c1)
    gated = mul(gelu(b1), b2)
    return add(conv2d(gated, w.proj_w, w.proj_b), x)


def block_forward(x: Tensor, w: BlockWeights, cfg: LnltConfig, heads: int,
                  collector=None, tag: str = "") -> Tensor:
    """One denoiser block: LN -> local MSA -> LN -> non-local MSA -> LN -> GDFN."""
    t = layer_norm(x, w.ln1_gamma, w.ln1_beta)
    if collector is not None:
        t, attn = local_msa(t, w.local, cfg.local_window, heads, return_attn=True)
        collector[f"{tag}.local"] = attn
    else:
        t = local_msa(t, w.local, cfg.local_window, heads)
    u = layer_norm(t, w.ln2_gamma, w.ln2_beta)
    if collector is not None:
        u, attn = nonlocal_msa(u, w.nonlocal_, cfg.nonlocal_grid, heads, return_attn=True)
        collector[f"{tag}.nonlocal"] = attn
    else:
        u = nonlocal_msa(u, w.nonlocal_, cfg.nonlocal_grid, heads)
    s = layer_norm(u, w.ln3_gamma, w.ln3_beta)
    return gdfn(s, w.gdfn)


def lnlt_denoise(x: HsiCube, eta, weights: LnltWeights, settings,
                 collect_attention: bool = False):
    """Denoise a cube conditioned on eta; returns input + predicted residual.

    With `collect_attention=True` also returns {tag: attention array} for
    every attention module (local: [windows, heads, M^2, M^2]; non-local:
    [heads, N^2, N^2]).
    """
    cfg = settings_to_config(settings)
    h, wdt, n_bands = x.shape
    if h % (4 * cfg.local_window) or wdt % (4 * cfg.local_window) \
            or h % (4 * cfg.nonlocal_grid) or wdt % (4 * cfg.nonlocal_grid):
        raise ShapeError(
            f"extents {(h, wdt)} must be divisible by 4*window and 4*grid "
            f"({4 * cfg.local_window}, {4 * cfg.nonlocal_grid})")
    eta_t = as_tensor(eta)
    if eta_t.data.size != 1:
        raise ShapeError(f"eta must be a scalar, got shape {eta_t.shape}")
    collector: dict | None = {} if collect_attention else None

    chan = mul(Tensor(np.ones((h, wdt, 1))), eta_t)
    x0 = conv2d(concat([x.data, chan], axis=2), weights.embed_w, weights.embed_b, padding=1)

    def run_section(t, section):
        level = _LEVEL_OF_SECTION[section]
        for i, bw in enumerate(weights.sections[section]):
            t = block_forward(t, bw, cfg, cfg.heads[level], collector, f"{section}.{i}")
        return t

    e1 = run_section(x0, "enc1")
    e2 = run_section(conv2d(e1, weights.down1_w, weights.down1_b, stride=2, padding=1), "enc2")
    m = run_section(conv2d(e2, weights.down2_w, weights.down2_b, stride=2, padding=1), "mid")
    u2 = conv_transpose2d(m, weights.up2_w, weights.up2_b, stride=2)
    d2 = run_section(conv2d(concat([u2, e2], axis=2), weights.fuse2_w, weights.fuse2_b), "dec2")
    u1 = conv_transpose2d(d2, weights.up1_w, weights.up1_b, stride=2)
    d1 = run_section(conv2d(concat([u1, e1], axis=2), weights.fuse1_w, weights.fuse1_b), "dec1")
    res = conv2d(d1, weights.out_w, weights.out_b, padding=1)
    out = HsiCube(add(x.data, res))
    if collect_attention:
        return out, collector
    return out


def attention_to_cubes(maps: dict) -> dict:
    """Reshape collected attention for cube-container dumps.

    Local maps [T, h, L, L] become [L, L, T*h] planes; non-local maps
    [h, L, L] become [L, L, h].
    """
    cubes = {}
    for tag, arr in maps.items():
        if arr.ndim == 4:
            t, heads, l1, l2 = arr.shape
            cubes[tag] = np.ascontiguousarray(arr.reshape(t * heads, l1, l2).transpose(1, 2, 0))
        elif arr.ndim == 3:
            cubes[tag] = np.ascontiguousarray(arr.transpose(1, 2, 0))
        else:
            raise ShapeError(f"unexpected attention rank {arr.ndim} for {tag!r}")
    return cubes
