"""
SELFCAL-WSOD Pydantic Schemas
Configuration blocks, on-disk sidecars and report records.
"""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ─────────────────────────────────────────────────────────────
# ENUMS
# ─────────────────────────────────────────────────────────────

class Preset(str, Enum):
    PAPER = "paper"
    TINY = "tiny"


class BackboneName(str, Enum):
    DENSENET169 = "densenet169"
    TINY = "tiny"


class BackgroundMode(str, Enum):
    PLAIN = "plain"
    TEXTURED = "textured"


class LambdaMode(str, Enum):
    SCHEDULED = "scheduled"
    FIXED = "fixed"
    SCHEDULED_CAPPED = "scheduled_capped"


class FProtocol(str, Enum):
    MAX_OVER_THRESHOLDS = "max_over_thresholds"
    ADAPTIVE = "adaptive"


class ModelRole(str, Enum):
    CLASSIFIER = "classifier"
    SALIENCY = "saliency"


# ─────────────────────────────────────────────────────────────
# DATASETS
# ─────────────────────────────────────────────────────────────

class ManifestEntry(BaseModel):
    """One manifest row. Paths are relative to the manifest file."""
    image_path: str
    category_id: Optional[int] = Field(None, ge=0)
    label_path: Optional[str] = None

    @property
    def stem(self) -> str:
        return Path(self.image_path).stem


class DatasetManifest(BaseModel):
    entries: list[ManifestEntry]
    num_categories: int = Field(..., ge=1)
    split_name: str = "train"
    root: str = Field("", description="Directory the relative paths resolve against")

    @model_validator(mode="after")
    def _check_invariants(self) -> "DatasetManifest":
        seen: set[str] = set()
        for entry in self.entries:
            if entry.image_path in seen:
                raise ValueError(f"duplicate image_path: {entry.image_path}")
            seen.add(entry.image_path)
            if entry.category_id is not None and entry.category_id >= self.num_categories:
                raise ValueError(
                    f"category out of range: {entry.category_id} >= {self.num_categories}"
                )
        return self

    def resolve(self, relative: str) -> Path:
        return Path(self.root) / relative

    @property
    def has_categories(self) -> bool:
        return bool(self.entries) and all(e.category_id is not None for e in self.entries)

    @property
    def has_labels(self) -> bool:
        return bool(self.entries) and all(e.label_path for e in self.entries)


class SyntheticConfig(BaseModel):
    num_images: int = Field(200, ge=1)
    image_size: int = Field(64, ge=16)
    num_categories: int = Field(4, ge=2, le=6)
    background_mode: BackgroundMode = BackgroundMode.TEXTURED
    seed: int = 7
    num_test: int = Field(0, ge=0, description="Held-out images written to test.csv")

    @model_validator(mode="after")
    def _enough_images(self) -> "SyntheticConfig":
        if self.num_images < self.num_categories:
            raise ValueError("num_images must be >= num_categories")
        return self


# ─────────────────────────────────────────────────────────────
# REFINEMENT
# ─────────────────────────────────────────────────────────────

class AffinityConfig(BaseModel):
    iterations: int = Field(10, ge=1)
    dilations: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 12, 24])
    sigma_floor: float = Field(1e-3, gt=0)

    @field_validator("dilations")
    @classmethod
    def _strictly_increasing(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one dilation required")
        if any(d < 1 for d in v):
            raise ValueError("dilations must be >= 1")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("dilations must be strictly increasing")
        return v


class CrfParams(BaseModel):
    enabled: bool = True
    iterations: int = Field(5, ge=1)
    gaussian_sxy: float = 3.0
    gaussian_compat: float = 3.0
    bilateral_sxy: float = 50.0
    bilateral_srgb: float = 13.0
    bilateral_compat: float = 10.0


class PseudoLabelConfig(BaseModel):
    scales: list[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])
    threshold: float = Field(0.4, gt=0, lt=1)
    affinity: AffinityConfig = Field(default_factory=AffinityConfig)
    crf: CrfParams = Field(default_factory=CrfParams)

    @field_validator("scales")
    @classmethod
    def _positive_scales(cls, v: list[float]) -> list[float]:
        if not v or any(s <= 0 for s in v):
            raise ValueError("scales must be a non-empty list of positive reals")
        return v


# ─────────────────────────────────────────────────────────────
# NETWORKS & TRAINING
# ─────────────────────────────────────────────────────────────

# F5 stride. Saliency inputs must be multiples of it so that F3, F4 and F5 stay
# power-of-two multiples of each other in the decoder.
INPUT_STRIDE = 32

# DenseNet-169 keeps BatchNorm; below this size F5 is 1×1 and a batch of one
# cannot be normalised.
DENSENET_MIN_INPUT = 64


def validate_input_size(size: int) -> int:
    if size < INPUT_STRIDE or size % INPUT_STRIDE:
        raise ValueError(f"input size must be a positive multiple of {INPUT_STRIDE}, got {size}")
    return size


def _check_backbone_size(backbone: BackboneName, size: int) -> None:
    if backbone == BackboneName.DENSENET169 and size < DENSENET_MIN_INPUT:
        raise ValueError(f"densenet169 needs input_size >= {DENSENET_MIN_INPUT}, got {size}")


class DecoderConfig(BaseModel):
    mid_channels: int = Field(64, ge=1)
    fusion_levels: tuple[int, int, int] = (3, 4, 5)


class LambdaPolicy(BaseModel):
    mode: LambdaMode = LambdaMode.FIXED
    fixed_value: float = Field(0.6, ge=0, le=1)
    exponent: float = Field(0.5, gt=0)
    cap: float = Field(0.6, ge=0, le=1)

    @classmethod
    def parse(cls, flag: str) -> "LambdaPolicy":
        """Parse the `--lambda MODE[:VALUE]` flag.

        fixed:0.6 | scheduled | scheduled:0.5 (exponent) | capped:0.6 | scheduled_capped:0.6
        """
        mode, _, value = flag.strip().partition(":")
        mode = mode.lower()
        try:
            number = float(value) if value else None
        except ValueError:
            raise ValueError(f"invalid lambda value: {value!r}")
        if mode == "fixed":
            return cls(mode=LambdaMode.FIXED, fixed_value=0.6 if number is None else number)
        if mode == "scheduled":
            return cls(mode=LambdaMode.SCHEDULED, exponent=0.5 if number is None else number)
        if mode in ("capped", "scheduled_capped"):
            return cls(mode=LambdaMode.SCHEDULED_CAPPED, cap=0.6 if number is None else number)
        raise ValueError(f"unknown lambda mode: {mode!r}")

    def describe(self) -> str:
        if self.mode == LambdaMode.FIXED:
            return f"fixed:{self.fixed_value:g}"
        if self.mode == LambdaMode.SCHEDULED:
            return f"scheduled:{self.exponent:g}"
        return f"capped:{self.cap:g}"


class ClassifierConfig(BaseModel):
    backbone: BackboneName = BackboneName.TINY
    pretrained: bool = False
    lr: float = Field(1e-4, gt=0)
    max_epochs: int = Field(20, ge=1)
    batch_size: int = Field(20, ge=1)
    input_size: int = Field(256, ge=32)
    seed: int = 0

    @model_validator(mode="after")
    def _backbone_fits_input(self) -> "ClassifierConfig":
        _check_backbone_size(self.backbone, self.input_size)
        return self


class TrainConfig(BaseModel):
    """Stage-2 (saliency) training block."""
    model_config = ConfigDict(populate_by_name=True)

    backbone: BackboneName = BackboneName.TINY
    pretrained: bool = False
    lr: float = Field(3e-6, gt=0)
    max_epochs: int = Field(25, ge=1)
    batch_size: int = Field(20, ge=1)
    input_size: int = Field(256, ge=32)
    lambda_policy: LambdaPolicy = Field(default_factory=LambdaPolicy, alias="lambda")
    binarize_threshold: float = Field(0.4, gt=0, lt=1)
    # refined predictions spanning less than this are too flat to seed P′
    seed_min_range: float = Field(0.2, ge=0, lt=1)
    init_from_classifier: bool = True
    seed: int = 0

    @field_validator("lambda_policy", mode="before")
    @classmethod
    def _lambda_from_flag(cls, v):
        # YAML may carry the same `MODE[:VALUE]` string the CLI accepts
        if isinstance(v, str):
            return LambdaPolicy.parse(v)
        return v

    @field_validator("input_size")
    @classmethod
    def _stride_multiple(cls, v: int) -> int:
        return validate_input_size(v)

    @model_validator(mode="after")
    def _backbone_fits_input(self) -> "TrainConfig":
        _check_backbone_size(self.backbone, self.input_size)
        return self


class PathsConfig(BaseModel):
    train_manifest: str = "data/train.csv"
    test_manifest: Optional[str] = "data/test.csv"
    store: str = "runs/store"
    checkpoints: str = "runs/checkpoints"
    predictions: str = "runs/predictions"
    exports: str = "runs/exports"
    reports: str = "runs/reports"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Preset = Preset.TINY
    seed: int = 0
    paths: PathsConfig = Field(default_factory=PathsConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    saliency: TrainConfig = Field(default_factory=TrainConfig)
    pseudo: PseudoLabelConfig = Field(default_factory=PseudoLabelConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    metric_protocol: FProtocol = FProtocol.MAX_OVER_THRESHOLDS

    @model_validator(mode="after")
    def _propagate_seed(self) -> "RunConfig":
        self.classifier.seed = self.seed
        self.saliency.seed = self.seed
        return self


# ─────────────────────────────────────────────────────────────
# SIDECARS
# ─────────────────────────────────────────────────────────────

class CheckpointMeta(BaseModel):
    role: ModelRole
    backbone: BackboneName
    num_categories: Optional[int] = None
    epoch: int = 0
    seed: int = 0
    input_size: int
    mid_channels: Optional[int] = None


class StoreMeta(BaseModel):
    threshold: float
    scales: list[float]
    affinity: AffinityConfig
    crf_enabled: bool
    crf_applied: int = 0
    pipeline: list[str]
    checkpoint_hash: str
    entries: list[str] = Field(default_factory=list)
    skipped: list[str] = Field(default_factory=list)


# ─────────────────────────────────────────────────────────────
# METRICS
# ─────────────────────────────────────────────────────────────

class MetricRow(BaseModel):
    id: str
    s_measure: float
    e_measure: float
    f_measure: float
    mae: float


class MetricReport(BaseModel):
    per_image: list[MetricRow]
    aggregate: MetricRow
    f_protocol: FProtocol
    missing: list[str] = Field(default_factory=list)

    def summary(self) -> str:
        a = self.aggregate
        return (f"S={a.s_measure:.3f} E={a.e_measure:.3f} F={a.f_measure:.3f} "
                f"MAE={a.mae:.3f} ({len(self.per_image)} images, F protocol {self.f_protocol.value})")
