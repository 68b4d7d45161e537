"""End-to-end acceptance criteria.

Each test covers one release gate and prints a single PASS line on success;
tolerances here are contractual and must not be loosened.
"""

import time

import numpy as np
import pytest

from faceparse import tensor as T
from faceparse.backbone import BackboneConfig, ShuffleBackbone, spatial_shuffle
from faceparse.checkpoint import load_checkpoint, load_model
from faceparse.decoder import AlignDecoder, DecoderConfig, FeatureAlign
from faceparse.gradcheck import run_gradcheck
from faceparse.metrics import (EvalConfig, boundary_f, decay, evaluate_sequences,
                               miou, region_j)
from faceparse.model import FaceParser
from faceparse.tensor import Tensor, bilinear_resize_array
from faceparse.train import SGD, TrainConfig, lr_at, train
from faceparse.tta import DEGENERATE_TTA, predict_tta

from oracles import boundary_f_loop, iou_loop, miou_loop
from synth import make_dataset, overfit_train_config, toy_model_config


def ok(line):
    print(f"ACCEPTANCE PASS: {line}")


def test_01_gradients_match_finite_differences():
    start = time.time()
    report = run_gradcheck(num_seeds=20, base_seed=0)
    elapsed = time.time() - start
    worst = max(report.values())
    assert worst < 1e-3, f"worst relative error {worst:.3e} in {report}"
    assert elapsed < 120.0, f"gradcheck took {elapsed:.1f}s"
    ok(f"gradcheck: 20 seeds, {len(report)} checks, max rel err {worst:.2e}, "
       f"{elapsed:.1f}s")


def test_02_pyramid_shapes_for_random_configs():
    rng = np.random.default_rng(100)
    checked = 0
    while checked < 50:
        c = int(rng.integers(1, 9)) * 2
        w = int(rng.choice([1, 2]))
        size_h = 32 * w * int(rng.integers(1, 4))
        size_w = 32 * w * int(rng.integers(1, 4))
        heads = tuple(int(rng.choice([1, 2])) for _ in range(4))
        if any(c * (i + 1) % h for i, h in enumerate(heads)):
            continue
        cfg = BackboneConfig(base_channels=c, depths=(1, 1, 1, 1),
                             window_size=w, heads=heads)
        bb = ShuffleBackbone(cfg, rng)
        n = int(rng.integers(1, 3))
        pyr = bb(Tensor(rng.normal(size=(n, 3, size_h, size_w))))
        for i, f in enumerate(pyr.as_list()):
            div = 4 * 2 ** i
            assert f.shape == (n, c * (i + 1), size_h // div, size_w // div), (
                f"config {cfg} stage {i + 1}: got {f.shape}")
        checked += 1
    ok(f"pyramid shapes exact for {checked} random configurations")


def test_03_spatial_shuffle_is_a_bijection():
    cases = 0
    for w in (1, 2, 4, 8):
        for h in range(w, 65, w):
            for wd in range(w, 65, 2 * w):
                idx = np.arange(h * wd, dtype=np.float64).reshape(1, 1, h, wd)
                out = spatial_shuffle(Tensor(idx), w).data.ravel()
                assert np.array_equal(np.sort(out), np.arange(h * wd))
                cases += 1
    ok(f"spatial shuffle bijective on {cases} grids up to 64x64")


def test_04_fresh_decoder_is_bitwise_unaligned_baseline():
    stage_channels = (8, 16, 24, 32)
    cfg = DecoderConfig(common_dim=16, ppm_bins=(1, 2), num_classes=4,
                        head_channels=16)
    rng = np.random.default_rng(200)
    dec = AlignDecoder(stage_channels, cfg, np.random.default_rng(201))
    feats = [Tensor(rng.normal(size=(2, c, 16 >> i, 16 >> i)))
             for i, c in enumerate(stage_channels)]
    from faceparse.backbone import FeaturePyramid
    logits, deltas = dec(FeaturePyramid(*feats), 64, 64)
    assert all(np.array_equal(d.data, np.zeros_like(d.data)) for d in deltas)

    p1 = dec.project1(feats[0])
    a4 = T.bilinear_resize(dec.align4.project(dec.ppm(feats[3])), 16, 16)
    a3 = T.bilinear_resize(dec.align3.project(feats[2]), 16, 16)
    a2 = T.bilinear_resize(dec.align2.project(feats[1]), 16, 16)
    baseline = dec.head(T.add(T.add(T.add(p1, a2), a3), a4), 64, 64)
    assert np.array_equal(logits.data, baseline.data)
    ok("zero-offset decoder bit-identical to unaligned resize-and-sum baseline")


def test_05_overfits_toy_dataset(tmp_path):
    manifest = make_dataset(tmp_path / "ds")
    start = time.time()
    result = train(manifest, toy_model_config(), overfit_train_config(),
                   tmp_path / "run")
    elapsed = time.time() - start
    assert elapsed < 600.0, f"training took {elapsed:.0f}s"
    assert len(result.losses) == 200
    drop = 1.0 - result.losses[-1] / result.losses[0]
    assert drop >= 0.90, f"loss only dropped {drop:.1%}"

    model = load_model(result.checkpoint_path)
    preds, gts = [], []
    from faceparse.data import load_frame
    for frame in manifest.all_frames():
        image, mask = load_frame(frame)
        preds.append(predict_tta(image, [model], DEGENERATE_TTA)[0])
        gts.append(mask)
    score = miou(preds, gts, 4)
    assert score >= 0.95, f"train-set mIoU {score:.3f}"
    ok(f"overfit: loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f} "
       f"({drop:.1%} drop), mIoU {score:.3f}, {elapsed:.0f}s")


def test_06_offsets_learn_a_known_translation():
    rng = np.random.default_rng(300)
    fa = FeatureAlign(8, 8, np.random.default_rng(301))
    fa.project.weight.data = np.eye(8).reshape(8, 8, 1, 1)
    fa.project.bias.data[:] = 0.0
    target = bilinear_resize_array(rng.normal(size=(8, 4, 4)), 16, 16)[None]
    low = np.zeros_like(target)
    low[..., 2:] = target[..., :-2]  # content shifted 2 px to the right
    opt = SGD([p for _, p in fa.named_parameters()], momentum=0.9, weight_decay=0.0)
    delta = None
    for _ in range(60):
        aligned, delta = fa(Tensor(target), Tensor(low))
        diff = T.add(aligned, T.neg(Tensor(target)))
        T.reduce_mean(T.mul(diff, diff)).backward()
        opt.step(0.5)
        opt.zero_grad()
    mean_dx = float(delta.data[:, 0].mean())
    mean_dy = float(delta.data[:, 1].mean())
    assert mean_dx > 0.5, f"mean dx {mean_dx:.3f} (expected > 0.5 toward +x)"
    assert abs(mean_dy) < abs(mean_dx), f"dy {mean_dy:.3f} dominates dx {mean_dx:.3f}"
    ok(f"offset field recovered translation: mean dx {mean_dx:+.2f} px, "
       f"dy {mean_dy:+.2f} px")


def test_07_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(400)
    pairs = 0
    for _ in range(100):
        shape = (int(rng.integers(4, 9)), int(rng.integers(4, 9)))
        pred = rng.integers(0, 3, size=shape)
        gt = rng.integers(0, 3, size=shape)
        for k in range(3):
            assert region_j(pred, gt, k) == pytest.approx(iou_loop(pred, gt, k))
            assert boundary_f(pred, gt, k, 1) == pytest.approx(
                boundary_f_loop(pred, gt, k, 1.0))
        assert miou([pred], [gt], 3) == pytest.approx(miou_loop([pred], [gt], 3))
        pairs += 1

    gts = [rng.integers(0, 3, size=(8, 8)) for _ in range(5)]
    report = evaluate_sequences([("v0", [f"f{t}" for t in range(5)],
                                  [g.copy() for g in gts], gts)],
                                EvalConfig(num_classes=3))
    assert report.jf_mean == 1.0 and report.miou == 1.0
    assert report.j_decay == 0.0 and report.f_decay == 0.0
    assert decay([1.0] * 8) == 0.0
    ok(f"metrics match oracles on {pairs} random mask pairs; "
       "perfect predictions score J&F 1.0, decay 0.0")


def test_08_learning_rate_schedule_checkpoints():
    cfg = TrainConfig()  # epochs 150, warmup 10, cycle start 100, peak 7e-3
    expected = {9: 7e-3, 100: 7e-3, 125: 3.5e-3, 150: 0.0}
    for epoch, value in expected.items():
        got = lr_at(epoch, cfg)
        assert abs(got - value) < 1e-12, f"lr({epoch}) = {got!r}, want {value!r}"
    ok("lr schedule: 7e-3 at epochs 9 and 100, 3.5e-3 at 125, 0 at 150 "
       "(within 1e-12)")


def test_09_inference_and_training_are_deterministic(tmp_path):
    model = FaceParser(toy_model_config())
    image = np.random.default_rng(500).uniform(size=(3, 64, 64))
    mask, probs = predict_tta(image, [model], DEGENERATE_TTA)
    logits, _ = model(Tensor(image[None]))
    e = np.exp(logits.data[0] - logits.data[0].max(axis=0, keepdims=True))
    assert np.array_equal(probs, e / e.sum(axis=0, keepdims=True))
    assert np.array_equal(mask, logits.data[0].argmax(axis=0))

    manifest = make_dataset(tmp_path / "ds")
    cfg = TrainConfig(epochs=3, warmup_epochs=1, cycle_start_epoch=2,
                      peak_lr=0.02, batch_size=8, crop_size=64, seed=3)
    a = train(manifest, toy_model_config(), cfg, tmp_path / "a")
    b = train(manifest, toy_model_config(), cfg, tmp_path / "b")
    assert a.losses == b.losses
    sa = load_checkpoint(a.checkpoint_path)[1]
    sb = load_checkpoint(b.checkpoint_path)[1]
    assert sa.keys() == sb.keys()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    ok("degenerate TTA bit-identical to plain forward; identical seeds give "
       "bit-identical training runs")
