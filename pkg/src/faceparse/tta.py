"""Test-time augmentation: multi-scale, horizontal flip, model ensemble.

Probability maps (softmax outputs) from every model x scale x flip pass are
resized back to the input extents, un-flipped with the configured left/right
class swaps, and averaged; the final map is the per-pixel argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_frame, read_image, write_mask
from .errors import ConfigError
from .model import FaceParser
from .tensor import Tensor, bilinear_resize_array


@dataclass
class TTAConfig:
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    hflip: bool = True
    flip_label_swaps: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.flip_label_swaps = tuple((int(a), int(b)) for a, b in self.flip_label_swaps)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be positive")
        seen: set[int] = set()
        for a, b in self.flip_label_swaps:
            if a == b or a in seen or b in seen:
                raise ConfigError(f"flip_label_swaps must be disjoint pairs, got {self.flip_label_swaps}")
            seen.update((a, b))


DEGENERATE_TTA = TTAConfig(scales=(1.0,), hflip=False)


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _pad_to_multiple(image: np.ndarray, divisor: int) -> np.ndarray:
    h, w = image.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


def _forward_probs(model: FaceParser, image: np.ndarray) -> np.ndarray:
    """One padded forward pass; returns [K,h,w] probabilities at input size."""
    h, w = image.shape[-2:]
    padded = _pad_to_multiple(image, model.cfg.backbone.input_divisor)
    logits, _ = model(Tensor(padded[None]))
    probs = _softmax(logits.data[0], axis=0)
    return probs[:, :h, :w]


def predict_tta(image: np.ndarray, models: list[FaceParser], cfg: TTAConfig
                ) -> tuple[np.ndarray, np.ndarray]:
    """Image [3,H,W] in [0,1] -> (argmax mask [H,W], mean probabilities [K,H,W])."""
    if not models:
        raise ConfigError("predict_tta needs at least one model")
    h, w = image.shape[-2:]
    total: np.ndarray | None = None
    count = 0
    for model in models:
        for scale in cfg.scales:
            sh = max(1, int(round(h * scale)))
            sw = max(1, int(round(w * scale)))
            scaled = image if (sh, sw) == (h, w) else bilinear_resize_array(image, sh, sw)
            for flipped in ((False, True) if cfg.hflip else (False,)):
                inp = scaled[:, :, ::-1] if flipped else scaled
                probs = _forward_probs(model, np.ascontiguousarray(inp))
                if (sh, sw) != (h, w):
                    probs = bilinear_resize_array(probs, h, w)
                if flipped:
                    probs = probs[:, :, ::-1].copy()
                    for a, b in cfg.flip_label_swaps:
                        probs[[a, b]] = probs[[b, a]]
                total = probs if total is None else total + probs
                count += 1
    mean = total / count
    return mean.argmax(axis=0), mean


def predict_manifest(models: list[FaceParser], manifest: DatasetManifest,
                     out_dir: str | Path, cfg: TTAConfig) -> list[Path]:
    """Write one indexed mask raster per frame under out_dir/<video_id>/.

    Frames with a crop box are predicted on the crop and pasted back into a
    background-filled full-size canvas.
    """
    out_dir = Path(out_dir)
    written = []
    for video in manifest.videos:
        for frame in video.frames:
            image, _ = load_frame(frame)
            mask, _ = predict_tta(image, models, cfg)
            if frame.crop is not None:
                full = read_image(frame.image)
                canvas = np.zeros(full.shape[-2:], dtype=np.int64)
                x, y, cw, ch = frame.crop
                canvas[y:y + ch, x:x + cw] = mask
                mask = canvas
            path = out_dir / video.video_id / f"{frame.name}.png"
            write_mask(path, mask)
            written.append(path)
    return written
