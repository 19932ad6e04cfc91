"""
SELFCAL-WSOD — Pseudo-label Store Tests
Y1 immutability, current-label updates, persistence and snapshots.

Run: pytest tests/ -v
"""

import numpy as np
import pytest

from selfcal_wsod.core.errors import CalibrationError
from selfcal_wsod.modules.datasets import save_map
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.schemas.models import AffinityConfig, StoreMeta


def _store(root, stems=("a", "b")):
    for i, stem in enumerate(stems):
        label = np.zeros((6, 6))
        label[: 2 + i, : 3] = 1.0
        save_map(label, root / PseudoLabelStore.Y1_DIR / f"{stem}.png")
    meta = StoreMeta(threshold=0.4, scales=[1.0], affinity=AffinityConfig(), crf_enabled=False,
                     pipeline=["multiscale_cam"], checkpoint_hash="0" * 64, entries=list(stems))
    return PseudoLabelStore.create(root, meta)


# ─────────────────────────────────────────────────────────────
# OPEN / CREATE
# ─────────────────────────────────────────────────────────────

class TestOpen:
    def test_roundtrip_meta(self, tmp_path):
        _store(tmp_path)
        store = PseudoLabelStore.open(tmp_path)
        assert store.stems == ["a", "b"]
        assert "a" in store and "z" not in store
        assert len(store) == 2

    def test_missing_store(self, tmp_path):
        with pytest.raises(CalibrationError) as exc:
            PseudoLabelStore.open(tmp_path)
        assert exc.value.code == "STORE_NOT_FOUND"

    def test_invalid_meta(self, tmp_path):
        (tmp_path / PseudoLabelStore.META_FILE).write_text("{\"threshold\": 1}")
        with pytest.raises(CalibrationError) as exc:
            PseudoLabelStore.open(tmp_path)
        assert exc.value.code == "STORE_INVALID"


# ─────────────────────────────────────────────────────────────
# Y1 AND CURRENT LABELS
# ─────────────────────────────────────────────────────────────

class TestLabels:
    def test_original_is_read_only(self, tmp_path):
        store = _store(tmp_path)
        y1 = store.original("a")
        with pytest.raises(ValueError):
            y1[0, 0] = 0.5

    def test_original_resized(self, tmp_path):
        store = _store(tmp_path)
        assert store.original("b", 12).shape == (12, 12)
        assert store.original_batch(["a", "b"], 4).shape == (2, 1, 4, 4)

    def test_unknown_stem(self, tmp_path):
        store = _store(tmp_path)
        with pytest.raises(CalibrationError) as exc:
            store.original("z")
        assert exc.value.code == "LABEL_NOT_FOUND"
        with pytest.raises(CalibrationError):
            store.set_current("z", np.zeros((6, 6)))

    def test_current_falls_back_to_y1(self, tmp_path):
        store = _store(tmp_path)
        assert np.array_equal(store.current("a"), store.original("a"))
        assert store.touched == []

    def test_set_current_keeps_y1(self, tmp_path):
        store = _store(tmp_path)
        before = store.original_hash()
        store.set_current("a", np.full((6, 6), 0.6))
        assert np.allclose(store.current("a"), 0.6)
        assert store.touched == ["a"]
        assert store.original_hash() == before

    @pytest.mark.parametrize("values,code", [
        (np.full((6, 6), 1.2), "LABEL_OUT_OF_RANGE"),
        (np.full((6, 6), np.nan), "LABEL_OUT_OF_RANGE"),
        (np.zeros((1, 6, 6)), "SHAPE_MISMATCH"),
    ])
    def test_set_current_validates(self, tmp_path, values, code):
        with pytest.raises(CalibrationError) as exc:
            _store(tmp_path).set_current("a", values)
        assert exc.value.code == code


# ─────────────────────────────────────────────────────────────
# PERSISTENCE
# ─────────────────────────────────────────────────────────────

class TestPersistence:
    def test_state_survives_reopen(self, tmp_path):
        store = _store(tmp_path)
        store.set_current("b", np.full((6, 6), 0.25))
        store.epoch_tag = 3
        store.save_state()
        reopened = PseudoLabelStore.open(tmp_path)
        assert reopened.epoch_tag == 3
        assert reopened.touched == ["b"]
        assert np.allclose(reopened.current("b"), 0.25)

    def test_equal_states_give_equal_bytes(self, tmp_path):
        a, b = _store(tmp_path / "a"), _store(tmp_path / "b")
        for store in (a, b):
            store.set_current("a", np.full((6, 6), 0.4))
            store.epoch_tag = 1
        assert a.save_state().read_bytes() == b.save_state().read_bytes()

    def test_snapshots(self, tmp_path):
        store = _store(tmp_path)
        store.set_current("a", np.ones((6, 6)))
        store.snapshot(2)
        store.snapshot(10)
        assert [n for n, _ in store.snapshots()] == [2, 10]
        assert (tmp_path / "Y_epoch2" / "a.png").is_file()
        assert not (tmp_path / "Y_epoch2" / "b.png").exists()

    def test_reset_state(self, tmp_path):
        store = _store(tmp_path)
        store.set_current("a", np.ones((6, 6)))
        store.snapshot(1)
        store.save_state()
        store.reset_state()
        assert store.touched == [] and store.epoch_tag == 0
        assert store.snapshots() == []
        assert not (tmp_path / PseudoLabelStore.STATE_FILE).exists()
        assert (tmp_path / PseudoLabelStore.Y1_DIR / "a.png").is_file()

    def test_clone_drops_stage_two_state(self, tmp_path):
        store = _store(tmp_path / "src")
        store.set_current("a", np.ones((6, 6)))
        store.snapshot(1)
        store.save_state()
        clone = store.clone(tmp_path / "copy")
        assert clone.original_hash() == store.original_hash()
        assert clone.meta == store.meta
        assert clone.touched == [] and clone.snapshots() == []
        assert PseudoLabelStore.open(tmp_path / "copy").touched == []
