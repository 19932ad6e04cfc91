"""
SELFCAL-WSOD — Desk-scale Acceptance Tests
Full stage-1 and stage-2 training on the 4-class synthetic set with the tiny preset.
Slow: excluded from the default run.

Run: pytest tests/ -v -m slow
"""

import numpy as np
import pandas as pd
import pytest

from selfcal_wsod.core.config import resolve_run_config
from selfcal_wsod.modules.classifier_cam import train_classifier
from selfcal_wsod.modules.datasets import load_manifest
from selfcal_wsod.modules.refinement import generate_pseudo_labels
from selfcal_wsod.modules.synthetic import generate_synthetic
from selfcal_wsod.services.ablation_service import DESK_SYNTHETIC, pseudo_label_iou, run_ablation

pytestmark = pytest.mark.slow


class TestStageOne:
    def test_classifier_and_pseudo_labels(self, tmp_path):
        config = resolve_run_config(preset="tiny")
        generate_synthetic(DESK_SYNTHETIC, tmp_path / "data")
        manifest = load_manifest(tmp_path / "data" / "train.csv")

        result = train_classifier(manifest, config.classifier, tmp_path / "classifier")
        assert result.history[-1]["accuracy"] >= 0.95

        store = generate_pseudo_labels(manifest, result.checkpoint, config.pseudo, tmp_path / "store")
        ious = pseudo_label_iou(store, manifest)
        assert len(ious) == len(manifest.entries)
        assert np.mean([iou >= 0.5 for iou in ious]) >= 0.8


class TestAblation:
    def test_self_calibration_helps(self, tmp_path):
        config = resolve_run_config(preset="tiny", overrides={"saliency.lambda_policy": "fixed:0.6"})
        table = run_ablation(config, tmp_path, seeds=[0, 1, 2])
        assert (tmp_path / "ablation.csv").is_file()
        assert (tmp_path / "ablation_summary.csv").is_file()

        means = table.groupby("arm")[["mae", "f_measure"]].mean()
        assert means.loc["sc", "mae"] <= means.loc["baseline", "mae"]
        assert means.loc["sc", "f_measure"] >= means.loc["baseline", "f_measure"]

        per_seed = table.pivot(index="seed", columns="arm", values="mae")
        assert (per_seed["sc"] <= per_seed["baseline"] + 0.002).all()
        assert set(pd.unique(table["arm"])) == {"sc", "baseline"}
