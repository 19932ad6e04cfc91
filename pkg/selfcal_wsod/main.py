"""
SELFCAL-WSOD — Command-line entry point
Weakly-supervised salient object detection from image-level labels, trained
with self-calibrated pseudo labels.

Complete flow:
  1. synth          → synthetic shapes dataset (train.csv / test.csv / dataset.json)
  2. train-cls      → stage-1 classifier on image-level categories
  3. gen-pseudo     → Y1 pseudo labels (multi-scale CAM → PAMR → binarize → CRF)
  4. train-sal      → stage-2 saliency network with self-calibration
  5. infer          → saliency maps, end-to-end, no post-processing
  6. eval           → S / E / F / MAE report
  7. export-labels  → CRF-refined predictions on the training set
  8. report         → static CSV / PNG / XLSX / PDF report
  9. ablation       → desk-scale self-calibration on/off over several seeds

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

import argparse
import logging
import os
import sys
from typing import Any, Optional

from selfcal_wsod.core.config import resolve_run_config, settings
from selfcal_wsod.core.errors import ConfigError, WsodError
from selfcal_wsod.schemas.models import BackgroundMode, FProtocol, RunConfig, SyntheticConfig

logger = logging.getLogger("selfcal-wsod")


# ─────────────────────────────────────────────────────────────
# LOGGING
# ─────────────────────────────────────────────────────────────

def _configure_logging() -> None:
    logging.basicConfig(
        level=logging.DEBUG if settings.debug else logging.INFO,
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    # ── Sentry error tracking ──
    sentry_dsn = os.getenv("SENTRY_DSN")
    if sentry_dsn:
        try:
            import sentry_sdk
            sentry_sdk.init(
                dsn=sentry_dsn,
                traces_sample_rate=0.0,
                environment=os.getenv("SELFCAL_WSOD_ENVIRONMENT", "research"),
                release=f"selfcal-wsod@{settings.app_version}",
            )
            logger.info("Sentry error tracking initialized")
        except ImportError:
            logger.warning("sentry-sdk not installed, error tracking disabled")


# ─────────────────────────────────────────────────────────────
# ARGUMENTS
# ─────────────────────────────────────────────────────────────

PATH_FLAGS = {
    "manifest": "paths.train_manifest",
    "test_manifest": "paths.test_manifest",
    "store": "paths.store",
    "checkpoints": "paths.checkpoints",
    "predictions": "paths.predictions",
    "exports": "paths.exports",
    "reports": "paths.reports",
}


def _csv_numbers(kind):
    def parse(text: str):
        try:
            return [kind(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    return parse


def _label_pair(text: str) -> tuple[str, str]:
    label, sep, value = text.partition("=")
    if not sep or not label or not value:
        raise argparse.ArgumentTypeError(f"expected LABEL=PATH, got {text!r}")
    return label, value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=["paper", "tiny"])
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lam", metavar="MODE[:VALUE]",
                        help="fixed:0.6 | scheduled[:exponent] | capped[:cap]")
    common.add_argument("--no-crf", action="store_true", help="skip dense-CRF refinement")
    common.add_argument("--size", type=int, help="network input resolution for inference")
    paths = common.add_argument_group("paths")
    paths.add_argument("--manifest", help="training manifest CSV")
    paths.add_argument("--test-manifest")
    for name in ("store", "checkpoints", "predictions", "exports", "reports"):
        paths.add_argument(f"--{name}")

    parser = argparse.ArgumentParser(
        prog="selfcal-wsod",
        description="Weakly-supervised salient object detection with self-calibrated pseudo labels",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="write the synthetic shapes dataset")
    synth.add_argument("--out", default="data")
    synth.add_argument("--num-images", type=int, default=200)
    synth.add_argument("--num-test", type=int, default=50)
    synth.add_argument("--image-size", type=int, default=64)
    synth.add_argument("--num-categories", type=int, default=4)
    synth.add_argument("--background", choices=[m.value for m in BackgroundMode], default="textured")
    synth.add_argument("--data-seed", type=int, default=7)

    sub.add_parser("train-cls", parents=[common], help="stage 1: train the classifier")
    sub.add_parser("gen-pseudo", parents=[common], help="stage 1: generate Y1 pseudo labels")

    train_sal = sub.add_parser("train-sal", parents=[common], help="stage 2: self-calibrated training")
    train_sal.add_argument("--no-resume", action="store_true")
    train_sal.add_argument("--val-manifest", help="held-out manifest with masks, logged only")

    infer = sub.add_parser("infer", parents=[common], help="predict saliency maps")
    infer.add_argument("--split", choices=["train", "test"], default="test")

    evaluate = sub.add_parser("eval", parents=[common], help="score predictions")
    evaluate.add_argument("--pred-dir")
    evaluate.add_argument("--gt-dir")
    evaluate.add_argument("--protocol", choices=[p.value for p in FProtocol])
    evaluate.add_argument("--out", help="report CSV path")

    sub.add_parser("export-labels", parents=[common], help="CRF-refined labels for the training set")

    report = sub.add_parser("report", parents=[common], help="static report from run logs")
    report.add_argument("--run", type=_label_pair, action="append", default=[],
                        metavar="LABEL=DIR", help="saliency run directory (repeatable)")
    report.add_argument("--metrics", type=_label_pair, action="append", default=[],
                        metavar="LABEL=CSV", help="metrics CSV of a run (repeatable)")
    report.add_argument("--gt-dir")

    ablation = sub.add_parser("ablation", parents=[common], help="self-calibration on/off over seeds")
    ablation.add_argument("--out", default="runs/ablation")
    ablation.add_argument("--seeds", type=_csv_numbers(int), default=[0, 1, 2])
    ablation.add_argument("--lambdas", type=_csv_numbers(float), default=None,
                          help="extra fixed-λ arms, e.g. 0.5,0.6,0.7")
    ablation.add_argument("--num-images", type=int, default=200)
    ablation.add_argument("--num-test", type=int, default=50)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {"seed": args.seed, "saliency.lambda_policy": args.lam}
    for flag, dotted in PATH_FLAGS.items():
        overrides[dotted] = getattr(args, flag, None)
    return resolve_run_config(preset=args.preset, config_file=args.config, overrides=overrides)


# ─────────────────────────────────────────────────────────────
# DISPATCH
# ─────────────────────────────────────────────────────────────

def _synthetic_config(**values) -> SyntheticConfig:
    try:
        return SyntheticConfig(**values)
    except ValueError as e:
        raise ConfigError(f"Invalid synthetic dataset settings: {e}", code="CONFIG_INVALID") from e


def run(args: argparse.Namespace) -> None:
    from selfcal_wsod.commands import evaluation, stage1, stage2

    config = config_from_args(args)
    use_crf = not args.no_crf
    command = args.command

    if command == "synth":
        synthetic = _synthetic_config(
            num_images=args.num_images, num_test=args.num_test, image_size=args.image_size,
            num_categories=args.num_categories, background_mode=args.background, seed=args.data_seed,
        )
        stage1.cmd_synth(synthetic, args.out)
    elif command == "train-cls":
        stage1.cmd_train_cls(config)
    elif command == "gen-pseudo":
        stage1.cmd_gen_pseudo(config, use_crf=use_crf)
    elif command == "train-sal":
        stage2.cmd_train_sal(config, resume=not args.no_resume, val_manifest_path=args.val_manifest)
    elif command == "infer":
        manifest = config.paths.train_manifest if args.split == "train" else None
        stage2.cmd_infer(config, size=args.size, manifest_path=manifest)
    elif command == "eval":
        evaluation.cmd_eval(config, pred_dir=args.pred_dir, gt_dir=args.gt_dir,
                            protocol=FProtocol(args.protocol) if args.protocol else None,
                            out_csv=args.out)
    elif command == "export-labels":
        stage2.cmd_export_labels(config, size=args.size, use_crf=use_crf)
    elif command == "report":
        evaluation.cmd_report(config, runs=dict(args.run) or None,
                              metrics=dict(args.metrics) or None, gt_dir=args.gt_dir)
    elif command == "ablation":
        synthetic = _synthetic_config(num_images=args.num_images, num_test=args.num_test,
                                      image_size=64, num_categories=4)
        evaluation.cmd_ablation(config, args.out, args.seeds, lambdas=args.lambdas,
                                synthetic=synthetic, use_crf=use_crf)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging()
    try:
        run(args)
    except WsodError as e:
        logger.error(f"[{e.code}] {e.message}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 1
    except Exception:
        logger.exception("Unexpected failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
