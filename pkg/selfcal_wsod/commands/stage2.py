"""
Stage-2 subcommands: self-calibrated training, inference and label export.
"""
import json
import logging
from pathlib import Path
from typing import Optional

from selfcal_wsod.commands.common import classifier_dir, open_manifest, saliency_dir
from selfcal_wsod.modules.datasets import save_map
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.modules.refinement import CRF_OK, crf_refine
from selfcal_wsod.modules.saliency_net import inference_size, infer, iter_predictions, load_saliency
from selfcal_wsod.modules.self_calibration import SaliencyTrainResult, train_saliency
from selfcal_wsod.schemas.models import RunConfig
from selfcal_wsod.services.lock_service import directory_lock
from selfcal_wsod.services.run_metadata import write_run_metadata

logger = logging.getLogger(__name__)


def cmd_train_sal(config: RunConfig, resume: bool = True,
                  val_manifest_path: Optional[str] = None) -> SaliencyTrainResult:
    manifest = open_manifest(config, config.paths.train_manifest, "train")
    val_path = val_manifest_path or config.paths.test_manifest
    val_manifest = None
    if val_path and Path(val_path).is_file():
        val_manifest = open_manifest(config, val_path, "test")
        if not val_manifest.has_labels:
            val_manifest = None

    out_dir = saliency_dir(config)
    classifier_ckpt = classifier_dir(config) / "classifier.pt"
    logger.info(f"λ policy: {config.saliency.lambda_policy.describe()}")
    with directory_lock(out_dir), directory_lock(config.paths.store):
        store = PseudoLabelStore.open(config.paths.store)
        result = train_saliency(
            manifest, store, config.saliency, config.decoder, config.pseudo.affinity, out_dir,
            init_from=classifier_ckpt if classifier_ckpt.is_file() else None,
            val_manifest=val_manifest, resume=resume,
        )
        write_run_metadata(out_dir, config, "train-sal", manifest=config.paths.train_manifest,
                           extra={"lambda": config.saliency.lambda_policy.describe(),
                                  "resumed_from": result.resumed_from})
    return result


def cmd_infer(config: RunConfig, size: Optional[int] = None,
              manifest_path: Optional[str] = None) -> list[Path]:
    manifest = open_manifest(config, manifest_path or config.paths.test_manifest, "test")
    out_dir = Path(config.paths.predictions)
    with directory_lock(out_dir):
        written = infer(manifest, saliency_dir(config) / "saliency.pt", out_dir, size=size)
        write_run_metadata(out_dir, config, "infer", manifest=manifest_path or config.paths.test_manifest,
                           extra={"size": size})
    return written


def cmd_export_labels(config: RunConfig, size: Optional[int] = None, use_crf: bool = True) -> Path:
    """Predict on the training set, CRF-refine, write a mask directory for downstream training."""
    manifest = open_manifest(config, config.paths.train_manifest, "train")
    model, meta = load_saliency(saliency_dir(config) / "saliency.pt")
    size = inference_size(size, meta)
    crf_params = config.pseudo.crf.model_copy(update={"enabled": config.pseudo.crf.enabled and use_crf})
    if crf_params.enabled and not CRF_OK:
        logger.warning("pydensecrf is not installed; exported labels are raw predictions")
    out_dir = Path(config.paths.exports)
    refined = 0
    with directory_lock(out_dir):
        stems = []
        for entry, image, saliency in iter_predictions(manifest, model, size):
            label, applied = crf_refine(saliency, image, crf_params)
            refined += int(applied)
            save_map(label, out_dir / f"{entry.stem}.png")
            stems.append(entry.stem)
        summary = {
            "count": len(stems),
            "crf_refined": refined,
            "crf_available": CRF_OK,
            "raw_predictions": refined == 0,
        }
        (out_dir / "export.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
        write_run_metadata(out_dir, config, "export-labels", manifest=config.paths.train_manifest)
    logger.info(f"Exported {len(stems)} labels ({refined} CRF-refined) -> {out_dir}")
    return out_dir
