"""
SELFCAL-WSOD — Saliency Network Tests
Decoder fusion, output shapes, encoder initialization and dataset inference.

Run: pytest tests/ -v
"""

import numpy as np
import pytest
import torch

from selfcal_wsod.core.errors import ConfigError, SaliencyNetError
from selfcal_wsod.modules.saliency_net import (
    Decoder, build_saliency_net, decode, infer, load_saliency, predict,
)
from selfcal_wsod.schemas.models import CheckpointMeta, DecoderConfig, ModelRole
from selfcal_wsod.services.checkpoint_service import save_checkpoint

DECODER = DecoderConfig(mid_channels=8)


def _net(seed=0):
    torch.manual_seed(seed)
    return build_saliency_net("tiny", DECODER)


# ─────────────────────────────────────────────────────────────
# DECODER
# ─────────────────────────────────────────────────────────────

class TestDecode:
    def test_zero_fuse_layer_gives_one_half(self):
        model = _net()
        torch.nn.init.zeros_(model.decoder.fuse.weight)
        torch.nn.init.zeros_(model.decoder.fuse.bias)
        out = predict(torch.rand(2, 3, 32, 32), model)
        assert torch.allclose(out, torch.full_like(out, 0.5), atol=1e-6)

    def test_incompatible_sizes(self):
        decoder = Decoder((4, 4, 4), DECODER)
        with pytest.raises(SaliencyNetError) as exc:
            decode(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 3, 3), torch.rand(1, 4, 2, 2), decoder, (32, 32))
        assert exc.value.code == "INCOMPATIBLE_SIZES"

    def test_accepts_power_of_two_strides(self):
        decoder = Decoder((4, 4, 4), DECODER)
        out = decode(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 2, 2), torch.rand(1, 4, 1, 1), decoder, (20, 24))
        assert out.shape == (1, 1, 20, 24)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0


class TestSaliencyNet:
    @pytest.mark.parametrize("size", [32, 64, 96])
    def test_output_matches_input_size(self, size):
        out = predict(torch.rand(2, 3, size, size), _net())
        assert out.shape == (2, 1, size, size)

    def test_unsupported_input_size(self):
        with pytest.raises(SaliencyNetError) as exc:
            predict(torch.rand(1, 3, 48, 48), _net())
        assert exc.value.code == "INCOMPATIBLE_SIZES"

    def test_random_init_is_near_one_half(self):
        out = predict(torch.rand(1, 3, 64, 64), _net(3))
        assert 0.3 <= float(out.mean()) <= 0.7

    def test_trains_on_a_single_image(self):
        model = _net().train()
        images = torch.rand(1, 3, 32, 32)
        assert model.encoder(images)[-1].shape == (1, 64, 1, 1)
        model(images).mean().backward()
        assert model.encoder.blocks[0][0].weight.grad is not None

    def test_predict_needs_a_model(self):
        with pytest.raises(SaliencyNetError) as exc:
            predict(torch.rand(1, 3, 32, 32), None)
        assert exc.value.code == "MODEL_NOT_INITIALIZED"

    def test_fuse_gradient_matches_finite_differences(self):
        model = _net(1).double().eval()
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        model(x).mean().backward()
        weight = model.decoder.fuse.weight
        analytic = weight.grad.clone()
        h = 1e-6
        with torch.no_grad():
            for idx in [(0, 0, 1, 1), (0, 5, 0, 2), (0, 17, 2, 0)]:
                weight[idx] += h
                up = float(model(x).mean())
                weight[idx] -= 2 * h
                down = float(model(x).mean())
                weight[idx] += h
                numeric = (up - down) / (2 * h)
                assert abs(numeric - float(analytic[idx])) <= 1e-4 * abs(numeric) + 1e-10


# ─────────────────────────────────────────────────────────────
# CHECKPOINTS & INFERENCE
# ─────────────────────────────────────────────────────────────

from selfcal_wsod.modules.classifier_cam import load_classifier
from selfcal_wsod.modules.datasets import load_manifest, load_mask


def _saliency_ckpt(path):
    meta = CheckpointMeta(role=ModelRole.SALIENCY, backbone="tiny", input_size=32, mid_channels=8)
    return save_checkpoint(_net(2).state_dict(), meta, path)


class TestCheckpoints:
    def test_encoder_from_classifier(self, classifier_ckpt):
        model = _net()
        assert model.init_encoder_from(classifier_ckpt)
        backbone = load_classifier(classifier_ckpt)[0].backbone.state_dict()
        encoder = model.encoder.state_dict()
        assert all(torch.equal(encoder[k], backbone[k]) for k in backbone)

    def test_mismatched_encoder_is_left_alone(self, tmp_path):
        source = _saliency_ckpt(tmp_path / "saliency.pt")  # no "backbone." keys
        model = _net()
        before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
        assert model.init_encoder_from(source) is False
        assert all(torch.equal(before[k], v) for k, v in model.encoder.state_dict().items())

    def test_load_rejects_classifier(self, classifier_ckpt):
        with pytest.raises(SaliencyNetError) as exc:
            load_saliency(classifier_ckpt)
        assert exc.value.code == "WRONG_CHECKPOINT_ROLE"

    def test_load_restores_weights(self, tmp_path):
        model, meta = load_saliency(_saliency_ckpt(tmp_path / "saliency.pt"))
        assert meta.mid_channels == 8
        assert torch.equal(model.decoder.fuse.weight, _net(2).decoder.fuse.weight)


class TestInfer:
    def test_one_png_per_image_at_native_size(self, tiny_dataset, tmp_path):
        manifest = load_manifest(tiny_dataset / "test.csv")
        written = infer(manifest, _saliency_ckpt(tmp_path / "saliency.pt"), tmp_path / "pred")
        assert sorted(p.stem for p in written) == sorted(e.stem for e in manifest.entries)
        pred = load_mask(written[0])
        assert pred.shape == (32, 32)
        assert 0.0 <= pred.min() and pred.max() <= 1.0

    def test_input_size_override(self, tiny_dataset, tmp_path):
        manifest = load_manifest(tiny_dataset / "test.csv")
        ckpt = _saliency_ckpt(tmp_path / "saliency.pt")
        written = infer(manifest, ckpt, tmp_path / "pred", size=64)
        assert load_mask(written[0]).shape == (32, 32)

    def test_deterministic(self, tiny_dataset, tmp_path):
        manifest = load_manifest(tiny_dataset / "test.csv")
        ckpt = _saliency_ckpt(tmp_path / "saliency.pt")
        a = infer(manifest, ckpt, tmp_path / "a")
        b = infer(manifest, ckpt, tmp_path / "b")
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
        assert np.array_equal(load_mask(a[0]), load_mask(b[0]))

    @pytest.mark.parametrize("size", [80, 300])
    def test_rejects_sizes_off_the_stride(self, tiny_dataset, tmp_path, size):
        manifest = load_manifest(tiny_dataset / "test.csv")
        ckpt = _saliency_ckpt(tmp_path / "saliency.pt")
        with pytest.raises(ConfigError) as exc:
            infer(manifest, ckpt, tmp_path / "pred", size=size)
        assert exc.value.code == "INVALID_INPUT_SIZE"
        assert not (tmp_path / "pred").exists()
