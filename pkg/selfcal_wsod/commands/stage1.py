"""
Stage-1 subcommands: synthetic data, classifier training, pseudo-label generation.
"""
import logging
from pathlib import Path

from selfcal_wsod.commands.common import classifier_dir, open_manifest
from selfcal_wsod.modules.classifier_cam import ClassifierTrainResult, train_classifier
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.modules.refinement import CRF_OK, generate_pseudo_labels
from selfcal_wsod.modules.synthetic import generate_synthetic
from selfcal_wsod.schemas.models import DatasetManifest, RunConfig, SyntheticConfig
from selfcal_wsod.services.lock_service import directory_lock
from selfcal_wsod.services.run_metadata import write_run_metadata

logger = logging.getLogger(__name__)


def cmd_synth(synthetic: SyntheticConfig, out_dir: str | Path) -> DatasetManifest:
    with directory_lock(out_dir):
        return generate_synthetic(synthetic, out_dir)


def cmd_train_cls(config: RunConfig) -> ClassifierTrainResult:
    manifest = open_manifest(config, config.paths.train_manifest, "train")
    out_dir = classifier_dir(config)
    with directory_lock(out_dir):
        result = train_classifier(manifest, config.classifier, out_dir)
        write_run_metadata(out_dir, config, "train-cls", manifest=config.paths.train_manifest)
    final = result.history[-1]
    logger.info(f"Classifier trained: accuracy {final['accuracy']:.3f} -> {result.checkpoint}")
    return result


def cmd_gen_pseudo(config: RunConfig, use_crf: bool = True) -> PseudoLabelStore:
    manifest = open_manifest(config, config.paths.train_manifest, "train")
    if use_crf and config.pseudo.crf.enabled and not CRF_OK:
        logger.warning("CRF requested but pydensecrf is not installed; labels are not CRF-refined")
    store_dir = Path(config.paths.store)
    with directory_lock(store_dir):
        store = generate_pseudo_labels(manifest, classifier_dir(config) / "classifier.pt",
                                       config.pseudo, store_dir, use_crf=use_crf)
        write_run_metadata(store_dir, config, "gen-pseudo", manifest=config.paths.train_manifest,
                           extra={"y1_hash": store.original_hash()})
    return store
