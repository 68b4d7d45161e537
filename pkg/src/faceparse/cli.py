"""Command-line interface: train, predict, evaluate, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import FaceParseError


def _parse_swaps(values: list[str]) -> tuple[tuple[int, int], ...]:
    pairs = []
    for v in values:
        a, _, b = v.partition(":")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


def cmd_train(args) -> int:
    from .data import load_manifest
    from .model import ModelConfig
    from .train import TrainConfig, train

    cfg_path = Path(args.config)
    doc = json.loads(cfg_path.read_text())
    base = cfg_path.parent
    manifest = load_manifest(base / doc["manifest"])
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    train_cfg = TrainConfig(**doc.get("train", {}))
    out_dir = base / doc.get("out", "runs")
    result = train(manifest, model_cfg, train_cfg, out_dir)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"final loss: {result.losses[-1]:.6f} over {len(result.losses)} steps")
    return 0


def cmd_predict(args) -> int:
    from .checkpoint import load_model
    from .data import load_manifest
    from .tta import TTAConfig, predict_manifest

    models = [load_model(p) for p in args.checkpoint]
    manifest = load_manifest(args.manifest, validate_masks=False)
    cfg = TTAConfig(
        scales=tuple(args.scales),
        hflip=args.flip,
        flip_label_swaps=_parse_swaps(args.swap),
    )
    written = predict_manifest(models, manifest, args.out, cfg)
    print(f"wrote {len(written)} masks to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import load_manifest
    from .metrics import EvalConfig, evaluate_dataset

    manifest = load_manifest(args.manifest)
    cfg = EvalConfig(
        num_classes=manifest.num_classes,
        boundary_tolerance_px=args.tolerance,
        ignore_background=not args.include_background,
    )
    report = evaluate_dataset(args.pred, manifest, cfg)
    text = json.dumps(report.to_dict(), indent=2)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(text)
    print(f"mIoU {report.miou:.4f}  J&F {report.jf_mean:.4f}  "
          f"J-decay {report.j_decay:.4f}  F-decay {report.f_decay:.4f}")
    print(f"report written to {args.report}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(num_seeds=args.seeds, base_seed=args.seed)
    worst = max(report.values())
    for name, err in sorted(report.items()):
        print(f"{name:20s} max relative error {err:.3e}")
    print(f"overall max relative error: {worst:.3e}")
    if worst >= 1e-3:
        print("FAILED: gradient mismatch above 1e-3", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceparse",
        description="Shuffle-transformer face parsing: training, TTA inference, "
                    "video metrics, gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predicted masks for a manifest")
    p.add_argument("--checkpoint", required=True, nargs="+",
                   help="one or more checkpoints (ensembled)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=float, nargs="+", default=[1.0])
    p.add_argument("--flip", action="store_true")
    p.add_argument("--swap", action="append", default=[], metavar="A:B",
                   help="class index pair swapped on horizontal flip")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--tolerance", type=int, default=None,
                   help="boundary match tolerance in pixels")
    p.add_argument("--include-background", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FaceParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
