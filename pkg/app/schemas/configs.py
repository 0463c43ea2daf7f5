from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigurationError
from app.schemas.datasets import Task


class CodebookMode(str, Enum):
    EMA = "ema"
    GRADIENT = "gradient"


class MomentumSchedule(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class WMVariant(str, Enum):
    I2I = "i2i"
    R2I = "r2i"
    R2R_CONCAT = "r2r-concat"
    R2R_AVGPOOL = "r2r-avgpool"

    @property
    def is_discrete(self) -> bool:
        return self in (WMVariant.I2I, WMVariant.R2I)


class TokenView(str, Enum):
    SEMANTIC = "semantic"   # quantized semantic slots (L x D_s)
    PATCH = "patch"         # all patch tokens (N_p x D)
    POOLED = "pooled"       # one averaged patch token (1 x D)


VARIANT_VIEWS = {
    WMVariant.I2I: TokenView.SEMANTIC,
    WMVariant.R2I: TokenView.SEMANTIC,
    WMVariant.R2R_CONCAT: TokenView.PATCH,
    WMVariant.R2R_AVGPOOL: TokenView.POOLED,
}


class ProbeProperty(str, Enum):
    COLOR = "color"
    SHAPE = "shape"
    POSITION = "position"

    @property
    def num_classes(self) -> int:
        return {"color": 7, "shape": 4, "position": 16}[self.value]


class OptimizerKind(str, Enum):
    LARS = "lars"
    SGD = "sgd"


class _FlatConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainConfig(_FlatConfig):
    """Tokenizer training configuration (desk-scale Discrete-JEPA defaults)."""

    preset: str = "djepa"
    task: Task = Task.SPRITES
    dataset_path: Optional[Path] = None
    output_dir: Path = Path("runs/tokenizer")

    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    width: int = 192
    depth: int = 4
    num_heads: int = 4
    num_slots: int = 8
    slot_dim: int = 96

    use_vq: bool = True
    quantizer: str = "vq"
    codebook_size: int = 256
    beta: float = 0.25
    codebook_decay: float = 0.99
    codebook_eps: float = 1e-5
    codebook_mode: CodebookMode = CodebookMode.EMA
    vq_lr: float = 1e-5
    vq_warmup_frac: float = Field(0.15, ge=0.0, lt=1.0)
    dead_code_threshold: float = 1e-3
    reinit_every: int = 500

    use_s2p: bool = True
    use_p2s: bool = True
    use_p2p: bool = True
    lambda_s2p: float = Field(1.0, ge=0.0)
    lambda_p2s: float = Field(1.0, ge=0.0)
    lambda_p2p: float = Field(1.0, ge=0.0)
    predictor_width: Optional[int] = None
    predictor_depth: int = 2
    predictor_heads: int = 4

    mask_ratio_min: float = 0.40
    mask_ratio_max: float = 0.60
    batch_size: int = Field(64, gt=0)
    total_steps: int = Field(20000, gt=0)
    base_lr: float = 1e-4
    warmup_frac: float = Field(0.05, ge=0.0, lt=1.0)
    weight_decay: float = 0.05
    momentum_start: float = Field(0.996, ge=0.0, le=1.0)
    momentum_end: float = Field(1.0, ge=0.0, le=1.0)
    momentum_schedule: MomentumSchedule = MomentumSchedule.LINEAR

    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    checkpoint_every: int = 1000
    progress: bool = False

    @model_validator(mode="after")
    def validate_config(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 < self.mask_ratio_min <= self.mask_ratio_max < 1.0:
            raise ValueError(
                f"mask ratio range must satisfy 0 < min <= max < 1, got ({self.mask_ratio_min}, {self.mask_ratio_max})"
            )
        if self.quantizer != "vq":
            raise ValueError(f"Unknown quantizer '{self.quantizer}' (only 'vq' is implemented)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.preset not in PRESETS:
            raise ValueError(f"Unknown preset '{self.preset}', expected one of {sorted(PRESETS)}")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def effective_predictor_width(self) -> int:
        return self.predictor_width or self.width


_IJEPA_FIELDS: Dict[str, Any] = {
    "use_vq": False,
    "use_s2p": False,
    "use_p2s": False,
    "use_p2p": True,
    "lambda_s2p": 0.0,
    "lambda_p2s": 0.0,
    "lambda_p2p": 1.0,
}

_VITB_FIELDS: Dict[str, Any] = {
    "width": 768,
    "depth": 12,
    "num_heads": 12,
    "batch_size": 128,
    "total_steps": 300_000,
    "codebook_size": 1024,
}

# Overrides applied on top of TrainConfig defaults, keyed by (preset, task).
PRESETS: Dict[str, Dict[Task, Dict[str, Any]]] = {
    "djepa": {
        Task.SPRITES: {},
        Task.BALLS: {"num_slots": 32, "mask_ratio_min": 0.5, "mask_ratio_max": 0.7},
    },
    "ijepa": {
        Task.SPRITES: dict(_IJEPA_FIELDS),
        Task.BALLS: {**_IJEPA_FIELDS, "mask_ratio_min": 0.5, "mask_ratio_max": 0.7, "base_lr": 1e-3},
    },
    "djepa-vitb": {
        Task.SPRITES: {**_VITB_FIELDS, "base_lr": 1e-5},
        Task.BALLS: {**_VITB_FIELDS, "base_lr": 1e-5, "num_slots": 32,
                     "mask_ratio_min": 0.5, "mask_ratio_max": 0.7},
    },
    "ijepa-vitb": {
        Task.SPRITES: {**_VITB_FIELDS, **_IJEPA_FIELDS, "base_lr": 1e-5},
        Task.BALLS: {**_VITB_FIELDS, **_IJEPA_FIELDS, "base_lr": 1e-3,
                     "mask_ratio_min": 0.5, "mask_ratio_max": 0.7},
    },
}


def preset_overrides(preset: str, task: Task | str) -> Dict[str, Any]:
    if preset not in PRESETS:
        raise ConfigurationError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    return {"preset": preset, **PRESETS[preset][Task(task)]}


def build_train_config(values: Dict[str, Any], preset: Optional[str] = None) -> TrainConfig:
    """defaults <- file preset <- file values <- forced ``preset`` (when given)."""
    values = dict(values)
    task = Task(values.get("task", Task.SPRITES))
    file_preset = values.get("preset", "djepa")
    merged = {**preset_overrides(file_preset, task), **values}
    if preset is not None:
        merged.update(preset_overrides(preset, task))
    return TrainConfig.model_validate(merged)


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    return TrainConfig.model_validate({**config.model_dump(), **preset_overrides(preset, config.task)})


class WorldModelConfig(_FlatConfig):
    variant: WMVariant = WMVariant.I2I
    output_dir: Path = Path("runs/worldmodel")
    context_frames: int = Field(4, gt=0)
    predict_frames: int = Field(4, gt=0)
    width: int = 96
    depth: int = 2
    num_heads: int = 4
    batch_size: int = Field(64, gt=0)
    total_steps: int = Field(3000, gt=0)
    base_lr: float = 1e-3
    warmup_frac: float = Field(0.05, ge=0.0, lt=1.0)
    weight_decay: float = 0.05
    temperature: float = Field(0.0, ge=0.0)
    seed: int = 0
    log_every: int = 100
    progress: bool = False


class ProbeConfig(_FlatConfig):
    property: ProbeProperty = ProbeProperty.COLOR
    view: TokenView = TokenView.SEMANTIC
    optimizer: OptimizerKind = OptimizerKind.LARS
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 0.02
    total_steps: int = Field(2000, gt=0)
    batch_size: int = Field(256, gt=0)
    seed: int = 0


class DecoderConfig(_FlatConfig):
    view: TokenView = TokenView.SEMANTIC
    width: int = 64
    depth: int = 3
    num_heads: int = 4
    total_steps: int = Field(3000, gt=0)
    batch_size: int = Field(32, gt=0)
    base_lr: float = 1e-3
    warmup_frac: float = Field(0.05, ge=0.0, lt=1.0)
    weight_decay: float = 0.05
    seed: int = 0
    log_every: int = 100
    progress: bool = False


WORLDMODEL_HORIZONS = {
    Task.SPRITES: {"context_frames": 4, "predict_frames": 4},
    Task.BALLS: {"context_frames": 6, "predict_frames": 6},
}


def apply_task_horizons(config: WorldModelConfig, task: Task | str) -> WorldModelConfig:
    """Fill in the task's conditioning and prediction horizons unless set explicitly."""
    missing = {key: value for key, value in WORLDMODEL_HORIZONS[Task(task)].items()
               if key not in config.model_fields_set}
    return config.model_copy(update=missing) if missing else config


class MethodArtifacts(_FlatConfig):
    """Checkpoints that make up one evaluated method."""

    name: str
    tokenizer: Path
    worldmodel: Path
    probes: Dict[ProbeProperty, Path] = Field(default_factory=dict)
    decoder: Optional[Path] = None


class EvaluationManifest(_FlatConfig):
    task: Task
    test_set: Path
    methods: List[MethodArtifacts]
    horizon: Optional[int] = None
    num_sequences: int = Field(64, gt=0)
    seed: int = 0

    @property
    def resolved_horizon(self) -> int:
        return self.horizon or (200 if self.task == Task.SPRITES else 1000)


class DataStageConfig(_FlatConfig):
    train_count: int = 256
    train_length: Optional[int] = None
    test_count: int = 64
    test_length: Optional[int] = None


class ExperimentMethod(_FlatConfig):
    name: str
    tokenizer: str
    worldmodel: WorldModelConfig


class ExperimentManifest(_FlatConfig):
    """Full pipeline description consumed by ``run_experiment``."""

    name: str
    task: Task = Task.SPRITES
    seed: int = 0
    output_dir: Path = Path("runs")
    data: DataStageConfig = Field(default_factory=DataStageConfig)
    tokenizers: Dict[str, Dict[str, Any]]
    methods: List[ExperimentMethod]
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    horizon: Optional[int] = None
    num_sequences: int = 64

    @model_validator(mode="after")
    def validate_references(self):
        missing = [m.tokenizer for m in self.methods if m.tokenizer not in self.tokenizers]
        if missing:
            raise ValueError(f"Methods reference unknown tokenizers: {missing}")
        return self


def load_yaml(path: Path | str) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    with path.open() as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file must contain a mapping: {path}")
    return data
