import json

import numpy as np
import pytest

from faceparse import tensor as T
from faceparse.backbone import FeaturePyramid
from faceparse.decoder import (AlignDecoder, DecoderConfig, FeatureAlign,
                               PyramidPooling, dump_offset_field)
from faceparse.errors import ConfigError
from faceparse.tensor import Tensor
from faceparse.train import SGD

from oracles import fd_grad


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


STAGE_CHANNELS = (8, 16, 24, 32)
CFG = DecoderConfig(common_dim=16, ppm_bins=(1, 2), num_classes=4, head_channels=16)


def toy_pyramid(n=1, base=16, seed=0):
    rng = np.random.default_rng(seed)
    feats = [Tensor(rng.normal(size=(n, c, base >> i, base >> i)))
             for i, c in enumerate(STAGE_CHANNELS)]
    return FeaturePyramid(*feats)


class TestConfig:
    def test_bins_must_increase(self):
        with pytest.raises(ConfigError):
            DecoderConfig(ppm_bins=(2, 2))
        with pytest.raises(ConfigError):
            DecoderConfig(ppm_bins=(3, 1))

    def test_round_trip(self):
        assert DecoderConfig(**CFG.to_dict()) == CFG


class TestPyramidPooling:
    def test_output_shape(self):
        ppm = PyramidPooling(6, 8, (1, 2), np.random.default_rng(0))
        out = ppm(Tensor(rand((2, 6, 4, 4))))
        assert out.shape == (2, 8, 4, 4)

    def test_bin_one_branch_sees_global_mean(self):
        # with an identity-summing 1x1 branch conv, the bin-1 branch is the
        # per-channel global mean broadcast over the grid
        ppm = PyramidPooling(3, 2, (1,), np.random.default_rng(1))
        ppm.branches[0].weight.data[:] = 0.0
        ppm.branches[0].weight.data[0, 0, 0, 0] = 1.0
        ppm.branches[0].weight.data[1, 1, 0, 0] = 1.0
        ppm.branches[0].bias.data[:] = 0.0
        x = rand((1, 3, 4, 4), 2)
        pooled = ppm.branches[0](T.adaptive_avg_pool(Tensor(x), 1, 1))
        assert pooled.data[0, 0, 0, 0] == pytest.approx(x[0, 0].mean())
        assert pooled.data[0, 1, 0, 0] == pytest.approx(x[0, 1].mean())

    def test_bin_larger_than_grid_rejected(self):
        ppm = PyramidPooling(4, 4, (1, 4), np.random.default_rng(0))
        with pytest.raises(ConfigError, match="bins"):
            ppm(Tensor(rand((1, 4, 2, 2))))

    def test_all_params_receive_grad(self):
        ppm = PyramidPooling(4, 4, (1, 2), np.random.default_rng(3))
        out = ppm(Tensor(rand((1, 4, 4, 4), 4)))
        T.reduce_sum(T.mul(out, out)).backward()
        for name, p in ppm.named_parameters():
            assert p.grad is not None and np.abs(p.grad).max() > 0, name


class TestFeatureAlign:
    def test_fresh_module_is_identity_warp(self):
        fa = FeatureAlign(3, 4, np.random.default_rng(0))
        high = Tensor(rand((1, 4, 8, 8), 1))
        low = Tensor(rand((1, 3, 4, 4), 2))
        aligned, delta = fa(high, low)
        up = T.bilinear_resize(fa.project(low), 8, 8)
        assert np.array_equal(delta.data, np.zeros((1, 2, 8, 8)))
        assert np.array_equal(aligned.data, up.data)

    def test_low_already_at_target_resolution(self):
        fa = FeatureAlign(3, 4, np.random.default_rng(0))
        high = Tensor(rand((1, 4, 6, 6), 3))
        low = Tensor(rand((1, 3, 6, 6), 4))
        aligned, _ = fa(high, low)
        assert np.array_equal(aligned.data, fa.project(low).data)

    def test_low_larger_than_target_rejected(self):
        fa = FeatureAlign(3, 4, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            fa(Tensor(rand((1, 4, 4, 4))), Tensor(rand((1, 3, 8, 8))))

    def test_offset_conv_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        fa = FeatureAlign(3, 4, np.random.default_rng(6))
        # move the offsets off zero (and off integer kinks) before checking
        fa.offset_out.weight.data = 0.01 * rng.normal(size=fa.offset_out.weight.shape)
        fa.offset_out.bias.data[:] = [0.31, 0.27]
        high = Tensor(rand((1, 4, 6, 6), 7))
        low = Tensor(rand((1, 3, 3, 3), 8))

        def loss_value():
            aligned, _ = fa(high.detach(), low.detach())
            return float(T.reduce_sum(T.mul(aligned, aligned)).data)

        aligned, _ = fa(high, low)
        T.reduce_sum(T.mul(aligned, aligned)).backward()
        for param in (fa.offset_hidden.weight, fa.offset_out.weight,
                      fa.offset_out.bias, fa.project.weight):
            num = fd_grad(loss_value, param.data, step=1e-5)
            denom = max(np.abs(num).max(), np.abs(param.grad).max(), 1e-12)
            assert np.abs(num - param.grad).max() / denom < 1e-5

    def test_offsets_move_under_optimization(self):
        # a target translated by 2 px should pull the predicted field off zero
        rng = np.random.default_rng(11)
        fa = FeatureAlign(8, 8, np.random.default_rng(12))
        fa.project.weight.data = np.eye(8).reshape(8, 8, 1, 1)
        fa.project.bias.data[:] = 0.0
        target = T.bilinear_resize(Tensor(rng.normal(size=(1, 8, 4, 4))), 16, 16).data
        low = np.zeros_like(target)
        low[..., 2:] = target[..., :-2]
        opt = SGD([p for _, p in fa.named_parameters()], momentum=0.9,
                  weight_decay=0.0)
        delta = None
        for _ in range(20):
            aligned, delta = fa(Tensor(target), Tensor(low))
            diff = T.add(aligned, T.neg(Tensor(target)))
            T.reduce_mean(T.mul(diff, diff)).backward()
            opt.step(0.5)
            opt.zero_grad()
        assert np.abs(delta.data).mean() > 0.0


class TestAlignDecoder:
    def test_logit_shape_and_batch(self):
        dec = AlignDecoder(STAGE_CHANNELS, CFG, np.random.default_rng(0))
        for n in (1, 2):
            logits, deltas = dec(toy_pyramid(n=n, seed=n), 64, 64)
            assert logits.shape == (n, 4, 64, 64)
            assert [d.shape for d in deltas] == [(n, 2, 16, 16)] * 3

    def test_fresh_decoder_equals_unaligned_baseline(self):
        # zero-initialized offset heads make the decoder bit-identical to a
        # plain project-resize-sum decoder built from the same weights
        dec = AlignDecoder(STAGE_CHANNELS, CFG, np.random.default_rng(1))
        pyr = toy_pyramid(seed=3)
        logits, _ = dec(pyr, 64, 64)

        p1 = dec.project1(pyr.f1)
        a4 = T.bilinear_resize(dec.align4.project(dec.ppm(pyr.f4)), 16, 16)
        a3 = T.bilinear_resize(dec.align3.project(pyr.f3), 16, 16)
        a2 = T.bilinear_resize(dec.align2.project(pyr.f2), 16, 16)
        fused = T.add(T.add(T.add(p1, a2), a3), a4)
        baseline = dec.head(fused, 64, 64)
        assert np.array_equal(logits.data, baseline.data)

    def test_no_dead_parameters_after_offset_perturbation(self):
        rng = np.random.default_rng(7)
        dec = AlignDecoder(STAGE_CHANNELS, CFG, np.random.default_rng(8))
        for fa in (dec.align2, dec.align3, dec.align4):
            fa.offset_out.weight.data = 0.01 * rng.normal(size=fa.offset_out.weight.shape)
            fa.offset_out.bias.data[:] = [0.31, 0.27]
        logits, deltas = dec(toy_pyramid(seed=9), 64, 64)
        loss = T.reduce_sum(T.mul(logits, logits))
        for d in deltas:
            loss = T.add(loss, T.reduce_sum(T.mul(d, d)))
        loss.backward()
        dead = [n for n, p in dec.named_parameters()
                if p.grad is None or np.abs(p.grad).max() == 0.0]
        assert dead == []


class TestDumpOffsetField:
    def test_raster_round_trip(self, tmp_path):
        delta = Tensor(rand((1, 2, 4, 4), 13))
        path = tmp_path / "fields" / "delta.bin"
        dump_offset_field(path, delta)
        raw = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(2, 4, 4)
        assert np.array_equal(raw, delta.data[0])
        meta = json.loads(path.with_suffix(".bin.json").read_text())
        assert meta == {"shape": [2, 4, 4], "dtype": "<f8", "planes": ["dx", "dy"]}
