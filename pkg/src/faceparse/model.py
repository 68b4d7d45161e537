"""Full parser: backbone pyramid feeding the alignment decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, ShuffleBackbone
from .decoder import AlignDecoder, DecoderConfig
from .nn import Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "decoder": self.decoder.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(**d.get("backbone", {})),
            decoder=DecoderConfig(**d.get("decoder", {})),
            seed=d.get("seed", 0),
        )


class FaceParser(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = ShuffleBackbone(cfg.backbone, rng)
        stage_channels = tuple(cfg.backbone.stage_channels(i) for i in range(4))
        self.decoder = AlignDecoder(stage_channels, cfg.decoder, rng)

    def forward(self, image: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Image [N,3,H,W] -> (logits [N,K,H,W], offset fields at F1 scale)."""
        h, w = image.shape[2], image.shape[3]
        pyramid = self.backbone(image)
        return self.decoder(pyramid, h, w)
