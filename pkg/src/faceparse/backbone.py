"""Cross-window shuffle transformer backbone producing a 4-stage pyramid.

Stage i emits channels C*multiplier[i] at 1/4, 1/8, 1/16 and 1/32 of the
input resolution. Blocks alternate plain window attention with shuffled
window attention so information crosses window borders; a depthwise 3x3
residual connects neighbouring windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor


@dataclass
class BackboneConfig:
    base_channels: int = 96
    channel_multipliers: tuple[int, ...] = (1, 2, 3, 4)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    window_size: int = 4
    heads: tuple[int, ...] = (1, 2, 3, 4)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if len(self.channel_multipliers) != 4 or len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("channel_multipliers, depths and heads must each have 4 entries")
        if self.window_size < 1:
            raise ConfigError("window_size must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        for i in range(4):
            if self.stage_channels(i) % self.heads[i] != 0:
                raise ConfigError(
                    f"stage {i} channels {self.stage_channels(i)} not divisible "
                    f"by heads {self.heads[i]}"
                )

    def stage_channels(self, i: int) -> int:
        return self.base_channels * self.channel_multipliers[i]

    @property
    def input_divisor(self) -> int:
        # patch embed (4x) * three merges (2^3) * window partition
        return 4 * self.window_size * 8

    def check_input(self, h: int, w: int) -> None:
        d = self.input_divisor
        if h % d != 0 or w % d != 0:
            raise ConfigError(
                f"input {h}x{w} must be divisible by {d} "
                f"(patch embed * merges * window {self.window_size})"
            )

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "depths": list(self.depths),
            "window_size": self.window_size,
            "heads": list(self.heads),
            "mlp_ratio": self.mlp_ratio,
        }


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


# ---------------------------------------------------------------------------
# spatial shuffle permutation
# ---------------------------------------------------------------------------

def _check_grid(h: int, w_grid: int, w: int) -> None:
    if h % w != 0 or w_grid % w != 0:
        raise ConfigError(f"grid {h}x{w_grid} not divisible by window {w}")


def spatial_shuffle(x: Tensor, w: int) -> Tensor:
    """Permute positions: index a*(n/w)+b -> b*w+a along both spatial axes."""
    n, c, h, wg = x.shape
    _check_grid(h, wg, w)
    y = T.reshape(x, (n, c, w, h // w, wg))
    y = T.transpose(y, (0, 1, 3, 2, 4))
    y = T.reshape(y, (n, c, h, wg))
    y = T.reshape(y, (n, c, h, w, wg // w))
    y = T.transpose(y, (0, 1, 2, 4, 3))
    return T.reshape(y, (n, c, h, wg))


def spatial_unshuffle(x: Tensor, w: int) -> Tensor:
    """Exact inverse of :func:`spatial_shuffle`."""
    n, c, h, wg = x.shape
    _check_grid(h, wg, w)
    y = T.reshape(x, (n, c, h // w, w, wg))
    y = T.transpose(y, (0, 1, 3, 2, 4))
    y = T.reshape(y, (n, c, h, wg))
    y = T.reshape(y, (n, c, h, wg // w, w))
    y = T.transpose(y, (0, 1, 2, 4, 3))
    return T.reshape(y, (n, c, h, wg))


# ---------------------------------------------------------------------------
# layout helpers
# ---------------------------------------------------------------------------

def nchw_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def tokens_to_nchw(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return T.transpose(T.reshape(t, (n, h, w, c)), (0, 3, 1, 2))


def window_partition(x: Tensor, ws: int) -> Tensor:
    """[N,C,h,w] -> [N*windows, ws*ws, C] tokens per non-overlapping window."""
    n, c, h, w = x.shape
    _check_grid(h, w, ws)
    y = T.transpose(x, (0, 2, 3, 1))
    y = T.reshape(y, (n, h // ws, ws, w // ws, ws, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (n * (h // ws) * (w // ws), ws * ws, c))


def window_merge(tokens: Tensor, ws: int, n: int, h: int, w: int) -> Tensor:
    c = tokens.shape[-1]
    y = T.reshape(tokens, (n, h // ws, w // ws, ws, ws, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (n, h, w, c))
    return T.transpose(y, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class WindowAttention(Module):
    """Multi-head attention within ws x ws windows, per-head relative bias."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.window = window
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        t = window * window
        self.rel_bias = Parameter(np.zeros((heads, t, t)))

    def forward(self, tokens: Tensor) -> Tensor:
        b, t, c = tokens.shape

        def heads_view(x):
            x = T.reshape(x, (b, t, self.heads, self.head_dim))
            return T.transpose(x, (0, 2, 1, 3))

        q = heads_view(self.q(tokens))
        k = heads_view(self.k(tokens))
        v = heads_view(self.v(tokens))
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
        scores = T.add(scores, self.rel_bias)
        attn = T.softmax(scores, -1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, c))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class ShuffleBlock(Module):
    """Pre-norm residual: WMSA (optionally shuffled), depthwise 3x3, MLP."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float,
                 rng: np.random.Generator):
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng)
        self.dwconv = Conv2d(dim, dim, 3, rng, padding=1, groups=dim, init_std=0.02)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)), rng)

    def forward(self, x: Tensor, shuffled: bool) -> Tensor:
        n, c, h, w = x.shape
        y = tokens_to_nchw(self.norm1(nchw_to_tokens(x)), h, w)
        if shuffled:
            y = spatial_shuffle(y, self.window)
        y = window_merge(self.attn(window_partition(y, self.window)),
                         self.window, n, h, w)
        if shuffled:
            y = spatial_unshuffle(y, self.window)
        x = T.add(x, y)
        x = T.add(x, self.dwconv(x))
        t = self.mlp(self.norm2(nchw_to_tokens(x)))
        return T.add(x, tokens_to_nchw(t, h, w))


class PatchMerge(Module):
    """Concatenate 2x2 neighbourhoods (4*C channels) and project to C_out."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.proj = Conv2d(4 * c_in, c_out, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"patch_merge needs even extents, got {h}x{w}")
        y = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
        y = T.transpose(y, (0, 3, 5, 1, 2, 4))
        y = T.reshape(y, (n, 4 * c, h // 2, w // 2))
        return self.proj(y)


class PatchEmbed(Module):
    """4x spatial reduction: one 4x4 stride-4 convolution."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.proj = Conv2d(3, channels, 4, rng, stride=4)

    def forward(self, image: Tensor) -> Tensor:
        return self.proj(image)


class ShuffleBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.stage_channels(0), rng)
        self.stages = [
            [ShuffleBlock(cfg.stage_channels(i), cfg.heads[i], cfg.window_size,
                          cfg.mlp_ratio, rng)
             for _ in range(cfg.depths[i])]
            for i in range(4)
        ]
        self.merges = [
            PatchMerge(cfg.stage_channels(i), cfg.stage_channels(i + 1), rng)
            for i in range(3)
        ]

    def named_parameters(self, prefix: str = ""):
        yield from self.patch_embed.named_parameters(f"{prefix}patch_embed.")
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}stages.{i}.{j}.")
        for i, m in enumerate(self.merges):
            yield from m.named_parameters(f"{prefix}merges.{i}.")

    def forward(self, image: Tensor) -> FeaturePyramid:
        n, c, h, w = image.shape
        if c != 3:
            raise ConfigError(f"backbone expects 3-channel input, got {c}")
        self.cfg.check_input(h, w)
        x = self.patch_embed(image)
        feats = []
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                x = blk(x, shuffled=(j % 2 == 1))
            feats.append(x)
            if i < 3:
                x = self.merges[i](x)
        return FeaturePyramid(*feats)
