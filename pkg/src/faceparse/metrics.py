"""Video segmentation metrics: region J, boundary F, temporal decay, mIoU.

Definitions follow the DAVIS evaluation conventions. Per class and per
video, J and F are computed frame-by-frame; the aggregate J&F mean averages
(J+F)/2 over every (video, class) pair, and decay compares the first and
last temporal quartiles of each per-frame series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError


@dataclass
class EvalConfig:
    num_classes: int
    boundary_tolerance_px: int | None = None  # None: ceil(0.008 * image diagonal)
    ignore_background: bool = True            # drop class 0 from J/F (not from mIoU)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


def _check_extents(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape or pred.ndim != 2:
        raise DataError(f"mask extents differ: pred {pred.shape} vs gt {gt.shape}")


def default_tolerance(shape: tuple[int, int]) -> int:
    return int(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def region_j(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Jaccard overlap of the class-k masks; both empty counts as 1."""
    _check_extents(pred, gt)
    p = pred == k
    g = gt == k
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g)) / union


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """1-pixel-wide boundary: mask pixels with a 4-neighbour outside the mask.

    Pixels touching the image border count as boundary (outside is background).
    """
    mask = mask.astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def boundary_f(pred: np.ndarray, gt: np.ndarray, k: int,
               tolerance_px: int | None = None) -> float:
    """Boundary F-measure with distance-map matching at the given tolerance."""
    _check_extents(pred, gt)
    if tolerance_px is None:
        tolerance_px = default_tolerance(pred.shape)
    pb = mask_boundary(pred == k)
    gb = mask_boundary(gt == k)
    np_b = int(np.count_nonzero(pb))
    ng_b = int(np.count_nonzero(gb))
    if np_b == 0 and ng_b == 0:
        return 1.0
    if np_b == 0 or ng_b == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float(np.count_nonzero(dist_to_gt[pb] <= tolerance_px)) / np_b
    recall = float(np.count_nonzero(dist_to_pred[gb] <= tolerance_px)) / ng_b
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def decay(per_frame_scores) -> float:
    """Mean of the first temporal quartile minus mean of the last.

    Quartile size is ceil(n/4). With fewer than 4 frames the series is split
    into halves of size ceil(n/2) instead. Positive values mean degradation.
    """
    scores = [float(s) for s in per_frame_scores]
    n = len(scores)
    if n == 0:
        raise DataError("decay needs at least one frame score")
    q = math.ceil(n / 4) if n >= 4 else math.ceil(n / 2)
    return float(np.mean(scores[:q]) - np.mean(scores[-q:]))


def miou(preds, gts, num_classes: int) -> float:
    """Corpus-level mean IoU over classes present in the ground truth."""
    if len(preds) != len(gts):
        raise DataError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    present = np.zeros(num_classes, dtype=bool)
    for pred, gt in zip(preds, gts):
        _check_extents(pred, gt)
        for k in np.union1d(np.unique(pred), np.unique(gt)):
            k = int(k)
            p = pred == k
            g = gt == k
            inter[k] += int(np.count_nonzero(p & g))
            union[k] += int(np.count_nonzero(p | g))
        present[np.unique(gt)] = True
    ious = [inter[k] / union[k] for k in range(num_classes) if present[k]]
    if not ious:
        raise DataError("no classes present in ground truth")
    return float(np.mean(ious))


@dataclass
class VideoResult:
    video_id: str
    frames: list[str]
    j_series: dict[int, list[float]] = field(default_factory=dict)  # class -> per-frame J
    f_series: dict[int, list[float]] = field(default_factory=dict)


@dataclass
class EvalReport:
    miou: float
    jf_mean: float
    j_decay: float
    f_decay: float
    per_class: dict[int, dict[str, float]]
    per_video: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "jf_mean": self.jf_mean,
            "j_decay": self.j_decay,
            "f_decay": self.f_decay,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "per_video": dict(sorted(self.per_video.items())),
        }


def evaluate_video(video_id: str, frame_names: list[str], preds, gts,
                   cfg: EvalConfig) -> VideoResult:
    """Per-frame J/F series for every evaluated class of one video."""
    if len(preds) != len(gts) or len(preds) != len(frame_names):
        raise DataError(f"video {video_id}: prediction/ground-truth counts differ")
    classes = set()
    for gt in gts:
        classes.update(int(k) for k in np.unique(gt))
    if cfg.ignore_background:
        classes.discard(0)
    result = VideoResult(video_id, list(frame_names))
    for k in sorted(classes):
        if k >= cfg.num_classes:
            raise DataError(f"video {video_id}: label {k} >= num_classes {cfg.num_classes}")
        result.j_series[k] = [region_j(p, g, k) for p, g in zip(preds, gts)]
        result.f_series[k] = [
            boundary_f(p, g, k, cfg.boundary_tolerance_px) for p, g in zip(preds, gts)
        ]
    return result


def aggregate(results: list[VideoResult], all_preds, all_gts,
              cfg: EvalConfig) -> EvalReport:
    # terms are reduced in sorted (video, class) order so the aggregates are
    # exactly invariant to manifest ordering
    terms: dict[tuple[str, int], tuple[float, float, float, float, float]] = {}
    for res in results:
        for k in res.j_series:
            j_mean = float(np.mean(res.j_series[k]))
            f_mean = float(np.mean(res.f_series[k]))
            terms[(res.video_id, k)] = (
                0.5 * (j_mean + f_mean), decay(res.j_series[k]),
                decay(res.f_series[k]), j_mean, f_mean,
            )
    ordered = [terms[key] for key in sorted(terms)]
    jf_terms = [t[0] for t in ordered]
    j_decays = [t[1] for t in ordered]
    f_decays = [t[2] for t in ordered]
    per_class_acc: dict[int, list[tuple[float, float]]] = {}
    per_video: dict[str, dict[str, float]] = {}
    for (video_id, k) in sorted(terms):
        jf, jd, fd, j_mean, f_mean = terms[(video_id, k)]
        per_class_acc.setdefault(k, []).append((j_mean, f_mean))
    for res in results:
        vid = [terms[(res.video_id, k)] for k in sorted(res.j_series)]
        if vid:
            per_video[res.video_id] = {
                "jf_mean": float(np.mean([t[0] for t in vid])),
                "j_decay": float(np.mean([t[1] for t in vid])),
                "f_decay": float(np.mean([t[2] for t in vid])),
            }
    if not jf_terms:
        raise DataError("nothing to evaluate: no foreground classes in ground truth")
    per_class = {
        k: {
            "j_mean": float(np.mean([j for j, _ in pairs])),
            "f_mean": float(np.mean([f for _, f in pairs])),
            "jf": float(np.mean([(j + f) / 2 for j, f in pairs])),
        }
        for k, pairs in per_class_acc.items()
    }
    return EvalReport(
        miou=miou(all_preds, all_gts, cfg.num_classes),
        jf_mean=float(np.mean(jf_terms)),
        j_decay=float(np.mean(j_decays)),
        f_decay=float(np.mean(f_decays)),
        per_class=per_class,
        per_video=per_video,
    )


def evaluate_sequences(videos: list[tuple[str, list[str], list, list]],
                       cfg: EvalConfig) -> EvalReport:
    """Evaluate [(video_id, frame_names, preds, gts), ...] into one report."""
    results = []
    all_preds, all_gts = [], []
    for video_id, frame_names, preds, gts in videos:
        results.append(evaluate_video(video_id, frame_names, preds, gts, cfg))
        all_preds.extend(preds)
        all_gts.extend(gts)
    return aggregate(results, all_preds, all_gts, cfg)


def evaluate_dataset(pred_dir, manifest, cfg: EvalConfig | None = None) -> EvalReport:
    """Score predictions under ``pred_dir/<video_id>/<frame>.png`` against a manifest."""
    from pathlib import Path

    from .data import read_mask

    pred_dir = Path(pred_dir)
    if cfg is None:
        cfg = EvalConfig(num_classes=manifest.num_classes)
    sequences = []
    for video in manifest.videos:
        names, preds, gts = [], [], []
        for frame in video.frames:
            if frame.mask is None:
                raise DataError(f"video {video.video_id} frame {frame.name} has no ground truth")
            pred_path = pred_dir / video.video_id / f"{frame.name}.png"
            if not pred_path.exists():
                raise DataError(
                    f"missing prediction for video {video.video_id} frame {frame.name}: {pred_path}"
                )
            names.append(frame.name)
            preds.append(read_mask(pred_path))
            gts.append(read_mask(frame.mask))
        sequences.append((video.video_id, names, preds, gts))
    return evaluate_sequences(sequences, cfg)
