"""Feature alignment decoder: PPM context, learned-offset warping, seg head.

Low-resolution pyramid levels are projected to a common width, upsampled to
the stage-1 resolution, warped by a predicted 2-channel offset field and
summed. The offset predictor's final convolution is zero-initialized, so a
fresh decoder is exactly the unaligned resize-and-sum baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .errors import ConfigError
from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class DecoderConfig:
    common_dim: int = 64
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    num_classes: int = 19
    head_channels: int = 64

    def __post_init__(self):
        self.ppm_bins = tuple(self.ppm_bins)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.common_dim < 1 or self.head_channels < 1:
            raise ConfigError("common_dim and head_channels must be positive")
        if not self.ppm_bins or any(b < 1 for b in self.ppm_bins):
            raise ConfigError("ppm_bins must be positive")
        if list(self.ppm_bins) != sorted(set(self.ppm_bins)):
            raise ConfigError("ppm_bins must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "common_dim": self.common_dim,
            "ppm_bins": list(self.ppm_bins),
            "num_classes": self.num_classes,
            "head_channels": self.head_channels,
        }


class PyramidPooling(Module):
    """Multi-bin adaptive average pooling fused back onto the input."""

    def __init__(self, in_channels: int, out_channels: int, bins: tuple[int, ...],
                 rng: np.random.Generator):
        self.bins = bins
        branch_dim = out_channels // len(bins)
        self.branches = [Conv2d(in_channels, branch_dim, 1, rng) for _ in bins]
        self.fuse = Conv2d(in_channels + branch_dim * len(bins), out_channels, 3,
                           rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if max(self.bins) > min(h, w):
            raise ConfigError(f"ppm bins {self.bins} exceed feature extent {h}x{w}")
        parts = [x]
        for b, conv in zip(self.bins, self.branches):
            pooled = conv(T.adaptive_avg_pool(x, b, b))
            parts.append(T.bilinear_resize(pooled, h, w))
        return self.fuse(T.concat(parts, axis=1))


class FeatureAlign(Module):
    """Warp an upsampled low-resolution feature by a learned offset field."""

    def __init__(self, low_channels: int, dim: int, rng: np.random.Generator):
        self.project = Conv2d(low_channels, dim, 1, rng)
        self.offset_hidden = Conv2d(2 * dim, dim, 3, rng, padding=1)
        # zero init: a fresh module predicts the identity warp
        self.offset_out = Conv2d(dim, 2, 3, rng, padding=1, zero_init=True)

    def forward(self, high: Tensor, low: Tensor) -> tuple[Tensor, Tensor]:
        h, w = high.shape[2], high.shape[3]
        if low.shape[2] > h or low.shape[3] > w:
            raise ConfigError(
                f"low-resolution feature {low.shape} larger than target {high.shape}"
            )
        up = T.bilinear_resize(self.project(low), h, w)
        delta = self.offset_out(T.gelu(self.offset_hidden(T.concat([high, up], axis=1))))
        aligned = T.bilinear_sample(up, delta)
        return aligned, delta


class AlignDecoder(Module):
    def __init__(self, stage_channels: tuple[int, int, int, int], cfg: DecoderConfig,
                 rng: np.random.Generator):
        d = cfg.common_dim
        self.cfg = cfg
        self.project1 = Conv2d(stage_channels[0], d, 1, rng)
        self.ppm = PyramidPooling(stage_channels[3], d, cfg.ppm_bins, rng)
        self.align4 = FeatureAlign(d, d, rng)
        self.align3 = FeatureAlign(stage_channels[2], d, rng)
        self.align2 = FeatureAlign(stage_channels[1], d, rng)
        self.head_conv = Conv2d(d, cfg.head_channels, 3, rng, padding=1)
        self.head_out = Conv2d(cfg.head_channels, cfg.num_classes, 1, rng)

    def fuse(self, pyr: FeaturePyramid) -> tuple[Tensor, list[Tensor]]:
        p1 = self.project1(pyr.f1)
        context = self.ppm(pyr.f4)
        a4, d4 = self.align4(p1, context)
        a3, d3 = self.align3(p1, pyr.f3)
        a2, d2 = self.align2(p1, pyr.f2)
        fused = T.add(T.add(T.add(p1, a2), a3), a4)
        return fused, [d2, d3, d4]

    def head(self, fused: Tensor, out_h: int, out_w: int) -> Tensor:
        x = self.head_out(T.gelu(self.head_conv(fused)))
        return T.bilinear_resize(x, out_h, out_w)

    def forward(self, pyr: FeaturePyramid, out_h: int, out_w: int
                ) -> tuple[Tensor, list[Tensor]]:
        """Return class logits at (out_h, out_w) plus the offset fields."""
        fused, deltas = self.fuse(pyr)
        return self.head(fused, out_h, out_w), deltas


def dump_offset_field(path, delta: Tensor) -> None:
    """Debug dump: raw little-endian float64 [2,H,W] raster plus a JSON sidecar."""
    import json
    from pathlib import Path

    path = Path(path)
    arr = np.ascontiguousarray(delta.data[0] if delta.ndim == 4 else delta.data,
                               dtype="<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"shape": list(arr.shape), "dtype": "<f8",
                    "planes": ["dx", "dy"]}))
