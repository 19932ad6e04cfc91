"""
ablation_service.py — desk-scale self-calibration ablation.

For each seed, on one synthetic dataset:
  1. train the classifier and generate Y1 (shared by every arm of that seed)
  2. train one saliency network per arm:
        sc        λ fixed at the configured value (0.6 by default)
        baseline  λ fixed at 0, i.e. plain training on Y1
        lambda_x  optional sweep arms (`lambdas=[0.5, 0.6, 0.7]`)
  3. infer on the held-out split and score it

Writes ablation.csv (one row per seed × arm) and ablation_summary.csv (mean per arm).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from selfcal_wsod.core.errors import ConfigError
from selfcal_wsod.modules.classifier_cam import train_classifier
from selfcal_wsod.modules.datasets import load_manifest, load_mask
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.modules.metrics import evaluate_dataset
from selfcal_wsod.modules.refinement import generate_pseudo_labels
from selfcal_wsod.modules.saliency_net import infer
from selfcal_wsod.modules.self_calibration import train_saliency
from selfcal_wsod.modules.synthetic import generate_synthetic
from selfcal_wsod.schemas.models import (
    DatasetManifest, FProtocol, LambdaMode, LambdaPolicy, RunConfig, SyntheticConfig,
)

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = [
    "seed", "arm", "lambda", "cls_accuracy", "y1_iou_pass_rate",
    "s_measure", "e_measure", "f_measure", "mae",
]
DESK_SYNTHETIC = SyntheticConfig(num_images=200, num_test=50, image_size=64, num_categories=4)


@dataclass
class AblationArm:
    name: str
    policy: LambdaPolicy


def default_arms(config: RunConfig, lambdas: Optional[list[float]] = None) -> list[AblationArm]:
    sc_policy = config.saliency.lambda_policy
    if sc_policy.mode == LambdaMode.FIXED and sc_policy.fixed_value == 0.0:
        sc_policy = LambdaPolicy()
    arms = [AblationArm("sc", sc_policy), AblationArm("baseline", LambdaPolicy(fixed_value=0.0))]
    for value in lambdas or []:
        arms.append(AblationArm(f"lambda_{value:g}", LambdaPolicy(fixed_value=value)))
    return arms


def pseudo_label_iou(store: PseudoLabelStore, manifest: DatasetManifest) -> list[float]:
    """IoU of each Y1 against the manifest's ground-truth mask."""
    scores = []
    for entry in manifest.entries:
        if entry.stem not in store or not entry.label_path:
            continue
        gt = load_mask(manifest.resolve(entry.label_path)) >= 0.5
        y1 = store.original(entry.stem) >= 0.5
        union = np.logical_or(gt, y1).sum()
        scores.append(float(np.logical_and(gt, y1).sum() / union) if union else 1.0)
    return scores


def _arm_store(store: PseudoLabelStore, root: Path) -> PseudoLabelStore:
    if (root / PseudoLabelStore.META_FILE).is_file():
        existing = PseudoLabelStore.open(root)
        if existing.original_hash() == store.original_hash():
            return existing
    return store.clone(root)


def run_ablation(config: RunConfig, out_dir: str | Path, seeds: list[int],
                 lambdas: Optional[list[float]] = None,
                 synthetic: SyntheticConfig = DESK_SYNTHETIC,
                 use_crf: bool = True) -> pd.DataFrame:
    if not seeds:
        raise ConfigError("At least one seed is required", code="NO_SEEDS")
    if synthetic.num_test < 1:
        raise ConfigError("The ablation needs a held-out split (num_test >= 1)", code="NO_TEST_SPLIT")
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    generate_synthetic(synthetic, data_dir)
    train_manifest = load_manifest(data_dir / "train.csv")
    test_manifest = load_manifest(data_dir / "test.csv", split_name="test")
    arms = default_arms(config, lambdas)

    rows = []
    for seed in seeds:
        seed_dir = out_dir / f"seed{seed}"
        classifier = train_classifier(train_manifest, config.classifier.model_copy(update={"seed": seed}),
                                      seed_dir / "classifier")
        accuracy = classifier.history[-1]["accuracy"]
        store = generate_pseudo_labels(train_manifest, classifier.checkpoint, config.pseudo,
                                       seed_dir / "store", use_crf=use_crf)
        ious = pseudo_label_iou(store, train_manifest)
        iou_rate = float(np.mean([s >= 0.5 for s in ious])) if ious else float("nan")
        logger.info(f"Seed {seed}: classifier accuracy {accuracy:.3f}, "
                    f"Y1 IoU ≥ 0.5 on {iou_rate:.1%} of images")

        for arm in arms:
            arm_dir = seed_dir / arm.name
            cfg = config.saliency.model_copy(update={"seed": seed, "lambda_policy": arm.policy})
            result = train_saliency(
                train_manifest, _arm_store(store, arm_dir / "store"), cfg, config.decoder,
                config.pseudo.affinity, arm_dir, init_from=classifier.checkpoint,
                val_manifest=test_manifest,
            )
            infer(test_manifest, result.checkpoint, arm_dir / "predictions")
            report = evaluate_dataset(arm_dir / "predictions", test_manifest,
                                      protocol=config.metric_protocol,
                                      out_csv=arm_dir / "metrics.csv")
            agg = report.aggregate
            rows.append({
                "seed": seed, "arm": arm.name, "lambda": arm.policy.describe(),
                "cls_accuracy": accuracy, "y1_iou_pass_rate": iou_rate,
                "s_measure": agg.s_measure, "e_measure": agg.e_measure,
                "f_measure": agg.f_measure, "mae": agg.mae,
            })
            logger.info(f"Seed {seed} / {arm.name}: {report.summary()}")

    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "ablation.csv", index=False, float_format="%.4f", lineterminator="\n")
    summary = table.drop(columns=["seed", "lambda"]).groupby("arm", sort=False).mean()
    summary.to_csv(out_dir / "ablation_summary.csv", float_format="%.4f", lineterminator="\n")
    _log_verdict(summary, config.metric_protocol)
    return table


def _log_verdict(summary: pd.DataFrame, protocol: FProtocol) -> None:
    if not {"sc", "baseline"} <= set(summary.index):
        return
    sc, base = summary.loc["sc"], summary.loc["baseline"]
    mae_ok = sc["mae"] <= base["mae"]
    f_ok = sc["f_measure"] >= base["f_measure"]
    level = logging.INFO if mae_ok and f_ok else logging.WARNING
    logger.log(level, f"Self-calibration vs baseline: MAE {sc['mae']:.4f} vs {base['mae']:.4f}, "
                      f"F ({protocol.value}) {sc['f_measure']:.4f} vs {base['f_measure']:.4f}")
