"""Dataset manifest loading and raster interchange.

A manifest is a JSON document::

    {
      "videos": [
        {"id": "vid0",
         "frames": [{"image": "img.png", "mask": "mask.png",
                     "crop": [x, y, w, h]}]}   # crop optional
      ],
      "palette": {"0": "background", "1": "skin", ...}
    }

Relative paths resolve against the manifest's directory. Masks are
single-channel 8-bit indexed rasters; images standard RGB rasters. The
optional crop box is applied before any resizing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


@dataclass
class FrameRecord:
    image: Path
    mask: Path | None
    crop: tuple[int, int, int, int] | None = None  # x, y, w, h

    @property
    def name(self) -> str:
        return self.image.stem


@dataclass
class VideoRecord:
    video_id: str
    frames: list[FrameRecord]


@dataclass
class DatasetManifest:
    videos: list[VideoRecord]
    palette: dict[int, str]

    @property
    def num_classes(self) -> int:
        return max(self.palette) + 1

    def all_frames(self) -> list[FrameRecord]:
        return [f for v in self.videos for f in v.frames]


def read_image(path: Path) -> np.ndarray:
    """RGB raster -> float64 [3,H,W] in [0,1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise DataError(f"image file missing: {path}") from None
    return arr.transpose(2, 0, 1)


def read_mask(path: Path) -> np.ndarray:
    """Single-channel 8-bit index raster -> int [H,W]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P"):
                raise DataError(f"mask {path} must be single-channel 8-bit, got mode {img.mode}")
            return np.asarray(img.convert("L"), dtype=np.int64)
    except FileNotFoundError:
        raise DataError(f"mask file missing: {path}") from None


def write_mask(path: Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise DataError("mask values must fit in 8 bits")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def write_image(path: Path, image: np.ndarray) -> None:
    """float [3,H,W] in [0,1] -> RGB raster."""
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def _parse_crop(raw, where: str) -> tuple[int, int, int, int]:
    if (not isinstance(raw, (list, tuple)) or len(raw) != 4
            or not all(isinstance(v, int) for v in raw)):
        raise DataError(f"{where}: crop must be [x, y, w, h] integers, got {raw!r}")
    x, y, w, h = raw
    if w < 1 or h < 1 or x < 0 or y < 0:
        raise DataError(f"{where}: malformed crop box {raw}")
    return x, y, w, h


def load_manifest(path: str | Path, validate_masks: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; raises DataError naming the offender."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest missing: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from None
    base = path.parent
    if "videos" not in doc or "palette" not in doc:
        raise DataError(f"manifest {path} must contain 'videos' and 'palette'")
    try:
        palette = {int(k): str(v) for k, v in doc["palette"].items()}
    except (ValueError, AttributeError):
        raise DataError(f"manifest {path}: palette keys must be integer pixel values") from None
    if any(k < 0 or k > 255 for k in palette):
        raise DataError(f"manifest {path}: palette values must be 8-bit indices")

    videos = []
    for vid in doc["videos"]:
        frames = []
        for fr in vid.get("frames", []):
            where = f"video {vid.get('id')} frame {fr.get('image')}"
            image = base / fr["image"]
            mask = base / fr["mask"] if fr.get("mask") else None
            if not image.exists():
                raise DataError(f"{where}: image file missing: {image}")
            if mask is not None and not mask.exists():
                raise DataError(f"{where}: mask file missing: {mask}")
            crop = _parse_crop(fr["crop"], where) if fr.get("crop") else None
            if crop is not None:
                with Image.open(image) as img:
                    iw, ih = img.size
                x, y, w, h = crop
                if x + w > iw or y + h > ih:
                    raise DataError(f"{where}: crop {crop} exceeds image {iw}x{ih}")
            if mask is not None and validate_masks:
                values = np.unique(read_mask(mask))
                unknown = [int(v) for v in values if int(v) not in palette]
                if unknown:
                    raise DataError(
                        f"{where}: mask contains value {unknown[0]} outside the palette"
                    )
            frames.append(FrameRecord(image, mask, crop))
        videos.append(VideoRecord(str(vid["id"]), frames))
    return DatasetManifest(videos, palette)


def _apply_crop(arr: np.ndarray, crop: tuple[int, int, int, int]) -> np.ndarray:
    x, y, w, h = crop
    return arr[..., y:y + h, x:x + w]


def load_frame(frame: FrameRecord, crop_size: int | None = None
               ) -> tuple[np.ndarray, np.ndarray | None]:
    """Load (image [3,H,W] float, mask [H,W] int) with crop and resize applied."""
    image = read_image(frame.image)
    mask = read_mask(frame.mask) if frame.mask is not None else None
    if frame.crop is not None:
        image = _apply_crop(image, frame.crop)
        if mask is not None:
            mask = _apply_crop(mask, frame.crop)
    if crop_size is not None and image.shape[-2:] != (crop_size, crop_size):
        pil = Image.fromarray((image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8))
        pil = pil.resize((crop_size, crop_size), Image.BILINEAR)
        image = np.asarray(pil, dtype=np.float64).transpose(2, 0, 1) / 255.0
        if mask is not None:
            mpil = Image.fromarray(mask.astype(np.uint8), mode="L")
            mpil = mpil.resize((crop_size, crop_size), Image.NEAREST)
            mask = np.asarray(mpil, dtype=np.int64)
    return image, mask
