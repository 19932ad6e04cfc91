"""
Shared fixtures: quiet progress bars, no CAM cache, and a tiny synthetic dataset
with a one-epoch classifier and its Y1 store.
"""

import pytest

from selfcal_wsod.core.config import settings
from selfcal_wsod.modules.classifier_cam import train_classifier
from selfcal_wsod.modules.datasets import load_manifest
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.modules.refinement import generate_pseudo_labels
from selfcal_wsod.modules.synthetic import generate_synthetic
from selfcal_wsod.schemas.models import (
    AffinityConfig, ClassifierConfig, PseudoLabelConfig, SyntheticConfig,
)

TINY_SYNTHETIC = SyntheticConfig(num_images=8, num_test=4, image_size=32, num_categories=2, seed=3)
TINY_CLASSIFIER = ClassifierConfig(max_epochs=1, batch_size=4, input_size=32, lr=1e-3)
TINY_PSEUDO = PseudoLabelConfig(scales=[0.5, 1.0], affinity=AffinityConfig(iterations=2, dilations=[1, 2]))


@pytest.fixture(autouse=True)
def _quiet_settings(monkeypatch):
    monkeypatch.setattr(settings, "progress", False)
    monkeypatch.setattr(settings, "cache", None)
    monkeypatch.setattr(settings, "device", "cpu")
    monkeypatch.setattr(settings, "num_workers", 0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Directory holding train.csv / test.csv / images / masks for 8 + 4 images."""
    out = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(TINY_SYNTHETIC, out)
    return out


@pytest.fixture(scope="session")
def classifier_ckpt(tiny_dataset, tmp_path_factory):
    manifest = load_manifest(tiny_dataset / "train.csv")
    return train_classifier(manifest, TINY_CLASSIFIER, tmp_path_factory.mktemp("classifier")).checkpoint


@pytest.fixture(scope="session")
def y1_store_dir(tiny_dataset, classifier_ckpt, tmp_path_factory):
    manifest = load_manifest(tiny_dataset / "train.csv")
    store_dir = tmp_path_factory.mktemp("y1")
    generate_pseudo_labels(manifest, classifier_ckpt, TINY_PSEUDO, store_dir, use_crf=False)
    return store_dir


@pytest.fixture
def y1_store(y1_store_dir, tmp_path):
    """Private copy of the shared Y1 store; stage-2 state written here stays local."""
    return PseudoLabelStore.open(y1_store_dir).clone(tmp_path / "store")
