"""
SELFCAL-WSOD — Self-calibration Tests
λ schedules, the label blend, the blended BCE loss and the stage-2 training loop
(determinism, resume, label-store bookkeeping).

Run: pytest tests/ -v
"""

import numpy as np
import pytest
import torch

from selfcal_wsod.core.errors import CalibrationError
from selfcal_wsod.modules import self_calibration
from selfcal_wsod.modules.self_calibration import (
    bce, calibration_seeds, calibration_step, lambda_at, sc_loss, sc_loss_with_logits, train_saliency,
    update_labels,
)
from selfcal_wsod.schemas.models import LambdaMode, LambdaPolicy

# ─────────────────────────────────────────────────────────────
# λ SCHEDULES
# ─────────────────────────────────────────────────────────────

SCHEDULED = LambdaPolicy(mode=LambdaMode.SCHEDULED)


class TestLambdaAt:
    def test_fixed(self):
        policy = LambdaPolicy(fixed_value=0.6)
        assert [lambda_at(n, 25, policy) for n in (1, 13, 25)] == [0.6, 0.6, 0.6]

    def test_scheduled_reaches_one_at_the_last_epoch(self):
        assert lambda_at(25, 25, SCHEDULED) == 1.0
        assert lambda_at(1, 4, SCHEDULED) == pytest.approx(0.5)

    def test_scheduled_is_monotone(self):
        values = [lambda_at(n, 25, SCHEDULED) for n in range(1, 26)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_capped(self):
        policy = LambdaPolicy(mode=LambdaMode.SCHEDULED_CAPPED, cap=0.6)
        values = [lambda_at(n, 10, policy) for n in range(1, 11)]
        assert max(values) == 0.6
        assert values[0] == pytest.approx(0.1 ** 0.5)

    @pytest.mark.parametrize("n,N", [(0, 5), (6, 5), (1, 0)])
    def test_epoch_out_of_range(self, n, N):
        with pytest.raises(CalibrationError) as exc:
            lambda_at(n, N, SCHEDULED)
        assert exc.value.code == "EPOCH_OUT_OF_RANGE"


class TestLambdaPolicyParse:
    @pytest.mark.parametrize("flag,mode,attr,value", [
        ("fixed:0.6", LambdaMode.FIXED, "fixed_value", 0.6),
        ("fixed:0", LambdaMode.FIXED, "fixed_value", 0.0),
        ("scheduled", LambdaMode.SCHEDULED, "exponent", 0.5),
        ("scheduled:2", LambdaMode.SCHEDULED, "exponent", 2.0),
        ("capped:0.6", LambdaMode.SCHEDULED_CAPPED, "cap", 0.6),
    ])
    def test_flags(self, flag, mode, attr, value):
        policy = LambdaPolicy.parse(flag)
        assert policy.mode == mode
        assert getattr(policy, attr) == value

    @pytest.mark.parametrize("flag", ["linear", "fixed:abc", "fixed:1.5"])
    def test_rejected(self, flag):
        with pytest.raises(ValueError):
            LambdaPolicy.parse(flag)

    def test_describe_roundtrip(self):
        for flag in ("fixed:0.6", "scheduled:0.5", "capped:0.6"):
            assert LambdaPolicy.parse(flag).describe() == flag


# ─────────────────────────────────────────────────────────────
# BLEND & LOSS
# ─────────────────────────────────────────────────────────────

def _fixture(seed, shape=(2, 1, 8, 8)):
    gen = torch.Generator().manual_seed(seed)
    p = torch.rand(shape, generator=gen, dtype=torch.float64) * 0.98 + 0.01
    y1 = (torch.rand(shape, generator=gen, dtype=torch.float64) > 0.5).to(torch.float64)
    p_prime = torch.rand(shape, generator=gen, dtype=torch.float64)
    lam = float(torch.rand(1, generator=gen))
    return p, y1, p_prime, lam


class TestUpdateLabels:
    def test_endpoints_are_exact(self):
        _, y1, p_prime, _ = _fixture(0)
        assert torch.equal(update_labels(y1, p_prime, 0.0), y1)
        assert torch.equal(update_labels(y1, p_prime, 1.0), p_prime)

    def test_numpy_arrays(self):
        out = update_labels(np.ones((2, 2)), np.zeros((2, 2)), 0.6)
        assert np.allclose(out, 0.4)

    def test_affine_in_lambda(self):
        _, y1, p_prime, _ = _fixture(1)
        mid = update_labels(y1, p_prime, 0.5)
        assert torch.allclose(mid, 0.5 * (update_labels(y1, p_prime, 0.0) + update_labels(y1, p_prime, 1.0)))

    def test_invalid_lambda(self):
        with pytest.raises(CalibrationError) as exc:
            update_labels(torch.zeros(2), torch.zeros(2), 1.5)
        assert exc.value.code == "INVALID_LAMBDA"

    def test_shape_mismatch(self):
        with pytest.raises(CalibrationError) as exc:
            update_labels(torch.zeros(2, 2), torch.zeros(4), 0.5)
        assert exc.value.code == "SHAPE_MISMATCH"


class TestScLoss:
    def test_equals_bce_against_the_blend(self):
        for seed in range(100):
            p, y1, p_prime, lam = _fixture(seed)
            expected = bce(p, update_labels(y1, p_prime, lam))
            assert float(sc_loss(p, y1, p_prime, lam)) == pytest.approx(float(expected), abs=1e-6)

    def test_lambda_zero_is_plain_bce(self):
        p, y1, p_prime, _ = _fixture(3)
        assert torch.equal(sc_loss(p, y1, p_prime, 0.0), bce(p, y1))

    def test_affine_in_lambda(self):
        p, y1, p_prime, _ = _fixture(4)
        values = [float(sc_loss(p, y1, p_prime, lam)) for lam in (0.0, 0.3, 0.6, 1.0)]
        slope = values[-1] - values[0]
        for lam, value in zip((0.3, 0.6), values[1:3]):
            assert value == pytest.approx(values[0] + lam * slope, abs=1e-9)

    def test_clamps_saturated_predictions(self):
        p = torch.tensor([0.0, 1.0], dtype=torch.float64)
        loss = sc_loss(p, torch.tensor([1.0, 0.0], dtype=torch.float64), torch.zeros(2, dtype=torch.float64), 0.5)
        assert torch.isfinite(loss)

    def test_logit_gradient_is_p_minus_target(self):
        for seed in range(5):
            p, y1, p_prime, lam = _fixture(seed)
            logits = torch.logit(p).clone().requires_grad_(True)
            sc_loss(torch.sigmoid(logits), y1, p_prime, lam, reduction="sum").backward()
            target = update_labels(y1, p_prime, lam)
            assert torch.allclose(logits.grad, torch.sigmoid(logits.detach()) - target, atol=1e-5)

    def test_with_logits_matches_and_has_the_same_gradient(self):
        p, y1, p_prime, lam = _fixture(7)
        logits = torch.logit(p).clone().requires_grad_(True)
        loss = sc_loss_with_logits(logits, y1, p_prime, lam, reduction="sum")
        loss.backward()
        assert float(loss) == pytest.approx(float(sc_loss(p, y1, p_prime, lam, reduction="sum")), rel=1e-6)
        target = update_labels(y1, p_prime, lam)
        assert torch.allclose(logits.grad, torch.sigmoid(logits.detach()) - target, atol=1e-5)

    def test_logit_gradient_matches_finite_differences(self):
        p, y1, p_prime, lam = _fixture(11)
        logits = torch.logit(p).clone().requires_grad_(True)
        sc_loss(torch.sigmoid(logits), y1, p_prime, lam, reduction="sum").backward()
        analytic = logits.grad
        h = 1e-6
        flat = logits.detach().clone().reshape(-1)
        for i in (0, 17, 63, 100):
            up, down = flat.clone(), flat.clone()
            up[i] += h
            down[i] -= h
            f_up = float(sc_loss(torch.sigmoid(up.reshape(p.shape)), y1, p_prime, lam, reduction="sum"))
            f_down = float(sc_loss(torch.sigmoid(down.reshape(p.shape)), y1, p_prime, lam, reduction="sum"))
            numeric = (f_up - f_down) / (2 * h)
            assert abs(numeric - float(analytic.reshape(-1)[i])) <= 1e-4 * abs(numeric) + 1e-9

    def test_non_finite_input(self):
        p, y1, p_prime, lam = _fixture(0)
        p[0, 0, 0, 0] = float("nan")
        with pytest.raises(CalibrationError) as exc:
            sc_loss(p, y1, p_prime, lam)
        assert exc.value.code == "NON_FINITE_INPUT"

    def test_invalid_reduction(self):
        p, y1, _, _ = _fixture(0)
        with pytest.raises(CalibrationError) as exc:
            bce(p, y1, reduction="max")
        assert exc.value.code == "INVALID_REDUCTION"


# ─────────────────────────────────────────────────────────────
# CALIBRATION STEP
# ─────────────────────────────────────────────────────────────

from selfcal_wsod.modules.datasets import load_image, load_manifest
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.modules.saliency_net import build_saliency_net
from selfcal_wsod.schemas.models import AffinityConfig, DecoderConfig, StoreMeta, TrainConfig
from selfcal_wsod.utils.tensor_ops import image_to_tensor

DECODER = DecoderConfig(mid_channels=8)
AFFINITY = AffinityConfig(iterations=2, dilations=[1, 2])


def _train_cfg(lam="fixed:0.6", epochs=2, **extra):
    return TrainConfig(max_epochs=epochs, batch_size=4, input_size=32, lr=1e-3,
                       lambda_policy=lam, **extra)


def _batch(tiny_dataset, store, count=4):
    manifest = load_manifest(tiny_dataset / "train.csv")
    entries = [e for e in manifest.entries if e.stem in store][:count]
    images = torch.cat([image_to_tensor(load_image(manifest.resolve(e.image_path), 32)) for e in entries])
    return images, [e.stem for e in entries]


def _regions(size=32):
    image = torch.zeros(1, 3, size, size)
    image[:, 0, :, : size // 2] = 0.9
    image[:, 2, :, size // 2:] = 0.9
    mask = torch.zeros(1, 1, size, size)
    mask[..., : size // 2] = 1.0
    return image, mask


class TestCalibrationSeeds:
    def test_flat_prediction_falls_back_to_y1(self):
        image, mask = _regions()
        seeds = calibration_seeds(torch.full_like(mask, 0.5), image, mask, _train_cfg(), AFFINITY)
        assert torch.equal(seeds, mask)

    def test_bright_prediction_is_not_all_foreground(self):
        image, mask = _regions()
        pred = 0.55 + 0.4 * mask
        seeds = calibration_seeds(pred, image, torch.zeros_like(mask), _train_cfg(), AFFINITY)
        assert float(seeds.mean()) < 0.6
        assert float((seeds * mask).sum()) / float(mask.sum()) >= 0.95

    def test_each_image_decides_on_its_own(self):
        image, mask = _regions()
        pred = torch.cat([torch.full_like(mask, 0.5), 0.1 + 0.8 * mask])
        y1 = torch.cat([1 - mask, 1 - mask])
        seeds = calibration_seeds(pred, image.expand(2, -1, -1, -1), y1, _train_cfg(), AFFINITY)
        assert torch.equal(seeds[0], 1 - mask[0])
        assert float((seeds[1] * mask[0]).sum()) / float(mask.sum()) >= 0.95

    def test_range_setting_is_bounded(self):
        with pytest.raises(ValueError):
            _train_cfg(seed_min_range=1.0)


class TestCalibrationStep:
    def _run(self, tiny_dataset, store, lam):
        torch.manual_seed(0)
        model = build_saliency_net("tiny", DECODER)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        images, stems = _batch(tiny_dataset, store)
        loss, used = calibration_step(images, stems, model, optimizer, store, 1, _train_cfg(lam), AFFINITY)
        return loss, used, stems

    def test_blend_lands_in_the_store(self, tiny_dataset, y1_store):
        before = y1_store.original_hash()
        loss, lam, stems = self._run(tiny_dataset, y1_store, "fixed:0.6")
        assert lam == 0.6
        assert np.isfinite(loss)
        assert y1_store.touched == sorted(stems)
        for stem in stems:
            y1 = y1_store.original(stem, 32)
            p_prime = (y1_store.current(stem) - 0.4 * y1) / 0.6
            assert np.allclose(p_prime, np.round(p_prime), atol=1e-5)
        assert y1_store.original_hash() == before

    def test_untrained_network_is_supervised_by_y1(self, tiny_dataset, y1_store):
        _, _, stems = self._run(tiny_dataset, y1_store, "fixed:0.6")
        for stem in stems:
            assert np.allclose(y1_store.current(stem), y1_store.original(stem, 32), atol=1e-6)

    def test_lambda_zero_keeps_y1(self, tiny_dataset, y1_store):
        _, lam, stems = self._run(tiny_dataset, y1_store, "fixed:0")
        assert lam == 0.0
        for stem in stems:
            assert np.array_equal(y1_store.current(stem), y1_store.original(stem, 32))

    def test_non_finite_loss_names_the_images(self, tiny_dataset, y1_store, monkeypatch):
        monkeypatch.setattr(self_calibration, "sc_loss", lambda *a, **k: torch.tensor(float("nan")))
        with pytest.raises(CalibrationError) as exc:
            self._run(tiny_dataset, y1_store, "fixed:0.6")
        assert exc.value.code == "NON_FINITE_LOSS"
        assert "train_0000" in exc.value.message


# ─────────────────────────────────────────────────────────────
# TRAINING LOOP
# ─────────────────────────────────────────────────────────────

class _Interrupted(Exception):
    pass


def _state(path):
    return torch.load(path, map_location="cpu", weights_only=False)["state_dict"]


def _same_weights(a, b):
    sa, sb = _state(a), _state(b)
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestTrainSaliency:
    def _train(self, tiny_dataset, store, out_dir, cfg=None, **kwargs):
        manifest = load_manifest(tiny_dataset / "train.csv")
        return train_saliency(manifest, store, cfg or _train_cfg(), DECODER, AFFINITY, out_dir, **kwargs)

    def test_outputs(self, tiny_dataset, y1_store, tmp_path):
        n_images = len(y1_store)
        val = load_manifest(tiny_dataset / "test.csv", split_name="test")
        result = self._train(tiny_dataset, y1_store, tmp_path / "run", val_manifest=val)
        out = tmp_path / "run"
        assert result.checkpoint == out / "saliency.pt"
        assert (out / "saliency_epoch1.pt").is_file() and (out / "saliency_epoch2.pt").is_file()

        lines = result.log_path.read_text().splitlines()
        assert lines[0] == "epoch,batch,lambda,loss,val_mae"
        batches = -(-n_images // 4)
        assert len(lines) == 1 + 2 * batches
        last_of_epoch = [line for line in lines[1:] if line.split(",")[-1]]
        assert len(last_of_epoch) == 2

        assert [h["epoch"] for h in result.history] == [1, 2]
        assert all(h["lambda"] == 0.6 for h in result.history)
        assert [n for n, _ in y1_store.snapshots()] == [1, 2]
        assert y1_store.epoch_tag == 2
        assert len(y1_store.touched) == n_images

    def test_trailing_batch_of_one(self, tiny_dataset, y1_store, tmp_path):
        cfg = _train_cfg(epochs=1).model_copy(update={"batch_size": len(y1_store) - 1})
        result = self._train(tiny_dataset, y1_store, tmp_path / "run", cfg=cfg)
        assert result.checkpoint.is_file()
        assert len(y1_store.touched) == len(y1_store)

    def test_y1_is_never_rewritten(self, tiny_dataset, y1_store, tmp_path):
        before = y1_store.original_hash()
        self._train(tiny_dataset, y1_store, tmp_path / "run")
        assert PseudoLabelStore.open(y1_store.root).original_hash() == before

    def test_deterministic(self, tiny_dataset, y1_store, tmp_path):
        other = y1_store.clone(tmp_path / "store_b")
        a = self._train(tiny_dataset, y1_store, tmp_path / "a")
        b = self._train(tiny_dataset, other, tmp_path / "b")
        assert _same_weights(a.checkpoint, b.checkpoint)
        assert (y1_store.root / "current.npz").read_bytes() == (other.root / "current.npz").read_bytes()
        assert a.log_path.read_text() == b.log_path.read_text()

    def test_resume_after_interruption(self, tiny_dataset, y1_store, tmp_path, monkeypatch):
        reference_store = y1_store.clone(tmp_path / "store_ref")
        reference = self._train(tiny_dataset, reference_store, tmp_path / "ref")

        real_step = self_calibration.calibration_step

        def stop_in_epoch_two(images, stems, model, optimizer, store, n, cfg, affinity):
            if n == 2:
                raise _Interrupted()
            return real_step(images, stems, model, optimizer, store, n, cfg, affinity)

        monkeypatch.setattr(self_calibration, "calibration_step", stop_in_epoch_two)
        with pytest.raises(_Interrupted):
            self._train(tiny_dataset, y1_store, tmp_path / "run")
        monkeypatch.setattr(self_calibration, "calibration_step", real_step)

        resumed = self._train(tiny_dataset, PseudoLabelStore.open(y1_store.root), tmp_path / "run")
        assert resumed.resumed_from == 1
        assert [h["epoch"] for h in resumed.history] == [2]
        assert _same_weights(resumed.checkpoint, reference.checkpoint)
        assert resumed.log_path.read_text() == reference.log_path.read_text()
        assert (y1_store.root / "current.npz").read_bytes() == (reference_store.root / "current.npz").read_bytes()

    def test_changed_settings_start_over(self, tiny_dataset, y1_store, tmp_path):
        self._train(tiny_dataset, y1_store, tmp_path / "run")
        result = self._train(tiny_dataset, y1_store, tmp_path / "run", cfg=_train_cfg("fixed:0.5", epochs=1))
        assert result.resumed_from is None
        assert not (tmp_path / "run" / "saliency_epoch2.pt").exists()
        assert [n for n, _ in y1_store.snapshots()] == [1]

    def test_no_resume_starts_over(self, tiny_dataset, y1_store, tmp_path):
        self._train(tiny_dataset, y1_store, tmp_path / "run")
        result = self._train(tiny_dataset, y1_store, tmp_path / "run", resume=False)
        assert result.resumed_from is None
        assert [h["epoch"] for h in result.history] == [1, 2]

    def test_store_behind_checkpoint(self, tiny_dataset, y1_store, tmp_path):
        self._train(tiny_dataset, y1_store, tmp_path / "run")
        y1_store.epoch_tag = 1
        y1_store.save_state()
        with pytest.raises(CalibrationError) as exc:
            self._train(tiny_dataset, y1_store, tmp_path / "run")
        assert exc.value.code == "RESUME_MISMATCH"

    def test_empty_store(self, tiny_dataset, tmp_path):
        meta = StoreMeta(threshold=0.4, scales=[1.0], affinity=AFFINITY, crf_enabled=False,
                         pipeline=[], checkpoint_hash="", entries=[])
        store = PseudoLabelStore.create(tmp_path / "store", meta)
        with pytest.raises(CalibrationError) as exc:
            self._train(tiny_dataset, store, tmp_path / "run")
        assert exc.value.code == "EMPTY_STORE"

    def test_store_for_another_dataset(self, tiny_dataset, tmp_path):
        meta = StoreMeta(threshold=0.4, scales=[1.0], affinity=AFFINITY, crf_enabled=False,
                         pipeline=[], checkpoint_hash="", entries=["elsewhere"])
        store = PseudoLabelStore.create(tmp_path / "store", meta)
        with pytest.raises(CalibrationError) as exc:
            self._train(tiny_dataset, store, tmp_path / "run")
        assert exc.value.code == "EMPTY_STORE"
