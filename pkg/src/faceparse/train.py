"""SGD training loop with warmup/plateau/cosine schedule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import DatasetManifest, load_frame
from .errors import ConfigError, DataError, NonFiniteError
from .model import FaceParser, ModelConfig
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 150
    warmup_epochs: int = 10
    cycle_start_epoch: int = 100
    peak_lr: float = 7e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 6
    crop_size: int = 672
    seed: int = 0
    ignore_index: int = 255

    def __post_init__(self):
        if not (0 < self.warmup_epochs < self.cycle_start_epoch < self.epochs):
            raise ConfigError(
                f"need 0 < warmup ({self.warmup_epochs}) < cycle start "
                f"({self.cycle_start_epoch}) < epochs ({self.epochs})"
            )
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.batch_size < 1 or self.crop_size < 1:
            raise ConfigError("batch_size and crop_size must be positive")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Learning rate: linear ramp to peak, plateau, then half-cosine to 0.

    Phase boundaries are warmup_epochs / cycle_start_epoch / epochs. Accepts
    real-valued epochs in [0, epochs]; the value at ``epochs`` itself is the
    cosine limit 0.
    """
    if epoch < 0 or epoch > cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.peak_lr * (epoch + 1) / cfg.warmup_epochs
    if epoch < cfg.cycle_start_epoch:
        return cfg.peak_lr
    span = cfg.epochs - cfg.cycle_start_epoch
    return 0.5 * cfg.peak_lr * (1.0 + math.cos(math.pi * (epoch - cfg.cycle_start_epoch) / span))


class SGD:
    """Momentum SGD with decoupled weight decay."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, buf in zip(self.params, self.buffers):
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    checkpoint_path: Path
    losses: list[float]
    lrs: list[float]


def train(manifest: DatasetManifest, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path) -> TrainResult:
    """Train on every manifest frame; writes checkpoint and loss curve.

    Deterministic for a fixed (seed, config, data) triple: data order comes
    from a dedicated generator and every numeric kernel is deterministic.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = [f for f in manifest.all_frames() if f.mask is not None]
    if not frames:
        raise DataError("training requires at least one frame with a mask")

    # toy-scale corpus: load everything once up front
    images, masks = [], []
    for fr in frames:
        img, mask = load_frame(fr, cfg.crop_size)
        images.append(img)
        masks.append(mask)
    images = np.stack(images)
    masks = np.stack(masks)

    model = FaceParser(model_cfg)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)

    losses: list[float] = []
    lrs: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = order_rng.permutation(len(frames))
        for lo in range(0, len(frames), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = Tensor(images[idx])
            target = masks[idx]
            opt.zero_grad()
            try:
                logits, _ = model(batch)
                loss = T.cross_entropy_loss(logits, target, cfg.ignore_index)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3e}): {e}"
                ) from None
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            lrs.append(lr)
            step += 1

    ckpt_path = out_dir / "checkpoint.fpk"
    save_checkpoint(ckpt_path, model_cfg, model.state_dict())
    curve = {"losses": losses, "lrs": lrs}
    (out_dir / "loss_curve.json").write_text(json.dumps(curve))
    return TrainResult(ckpt_path, losses, lrs)
