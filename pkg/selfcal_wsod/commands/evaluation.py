"""
Evaluation subcommands: metrics, static reports and the desk-scale ablation.
"""
import logging
from pathlib import Path
from typing import Optional

from selfcal_wsod.commands.common import open_manifest, saliency_dir
from selfcal_wsod.core.errors import ConfigError
from selfcal_wsod.modules.metrics import evaluate_dataset
from selfcal_wsod.schemas.models import FProtocol, MetricReport, Preset, RunConfig, SyntheticConfig
from selfcal_wsod.services.ablation_service import run_ablation
from selfcal_wsod.services.report_service import ReportResult, build_report

logger = logging.getLogger(__name__)


def cmd_eval(config: RunConfig, pred_dir: Optional[str] = None, gt_dir: Optional[str] = None,
             protocol: Optional[FProtocol] = None, out_csv: Optional[str] = None) -> MetricReport:
    gt_source = gt_dir or open_manifest(config, config.paths.test_manifest, "test")
    out_csv = out_csv or Path(config.paths.reports) / "metrics.csv"
    report = evaluate_dataset(pred_dir or config.paths.predictions, gt_source,
                              protocol=protocol or config.metric_protocol, out_csv=out_csv)
    print(report.summary())
    return report


def cmd_report(config: RunConfig, runs: Optional[dict[str, str]] = None,
               metrics: Optional[dict[str, str]] = None,
               store_dir: Optional[str] = None, gt_dir: Optional[str] = None) -> ReportResult:
    """Static report over one or more saliency run directories."""
    if not runs:
        runs = {"run": str(saliency_dir(config))}
        metrics = metrics or {"run": str(Path(config.paths.reports) / "metrics.csv")}
    if gt_dir is None and config.paths.train_manifest:
        masks = Path(config.paths.train_manifest).parent / "masks"
        gt_dir = str(masks) if masks.is_dir() else None
    return build_report(runs, config.paths.reports, metrics=metrics, store_dir=store_dir or config.paths.store,
                        gt_dir=gt_dir)


def cmd_ablation(config: RunConfig, out_dir: str, seeds: list[int],
                 lambdas: Optional[list[float]] = None,
                 synthetic: Optional[SyntheticConfig] = None, use_crf: bool = True):
    if config.preset == Preset.PAPER:
        raise ConfigError("The ablation runs on the synthetic dataset; use --preset tiny",
                          code="PRESET_DATASET_MISMATCH")
    kwargs = {"synthetic": synthetic} if synthetic is not None else {}
    table = run_ablation(config, out_dir, seeds, lambdas=lambdas, use_crf=use_crf, **kwargs)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return table
