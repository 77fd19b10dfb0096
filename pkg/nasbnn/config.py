"""
Configuration models, bundled presets and environment settings for NAS-BNN
"""
import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from . import NasBnnError

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigError(NasBnnError):
    """Invalid configuration document, preset or value."""
    pass


class ExecMode(str, Enum):
    """Weight / activation precision of a forward pass."""
    FWBA = "FWBA"   # full-precision weights, binary activations (Bi-Teacher)
    BWBA = "BWBA"   # binary weights, binary activations (students, deployment)
    FWFA = "FWFA"   # full-precision everything (ablation only)


# ============================================================================
# ENVIRONMENT
# ============================================================================

def data_dir() -> Path:
    return Path(os.getenv("NASBNN_DATA_DIR", str(Path.home() / ".cache" / "nasbnn"))).expanduser()


def log_level() -> str:
    return os.getenv("NASBNN_LOG_LEVEL", "INFO").upper()


def default_device() -> str:
    device = os.getenv("NASBNN_DEVICE")
    if device:
        return device
    import torch
    return "cuda" if torch.cuda.is_available() else "cpu"


# ============================================================================
# MODELS
# ============================================================================

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetConfig(_Strict):
    """Binary supernet switches; defaults are the full method."""
    weight_norm: bool = True
    bi_transform: bool = True
    weight_scale: bool = True
    quantize_stem: bool = True
    strict_nd: bool = True


class DatasetDescriptor(_Strict):
    """Where training images come from."""
    kind: Literal["cifar10", "folder", "synthetic"] = "synthetic"
    root: Optional[str] = None
    image_size: int = 32
    num_samples: int = 512          # synthetic only
    num_classes: int = 10           # synthetic only
    subset: Optional[int] = None    # keep the first N training images
    val_per_class: int = 50
    seed: int = 0
    download: bool = True           # cifar10 only
    num_workers: int = 0            # DataLoader workers

    @field_validator('image_size', 'num_samples', 'num_classes')
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator('val_per_class', 'num_workers')
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("must not be negative")
        return v

    @model_validator(mode='after')
    def validate_root(self):
        if self.kind == "folder" and not self.root:
            raise ValueError("folder datasets need a root directory")
        return self


class TrainConfig(_Strict):
    epochs: int = 512
    batch_size: int = 512
    lr_init: float = 5e-4
    weight_decay: float = 5e-6
    schedule: Literal["cosine", "constant"] = "cosine"
    num_random_subnets: int = 2
    seed: int = 0
    finetune: bool = False
    dataset: DatasetDescriptor = DatasetDescriptor()
    net: NetConfig = NetConfig()
    teacher_mode: ExecMode = ExecMode.FWBA
    distill: bool = True
    apply_nd: bool = True
    eval_every: int = 1
    checkpoint_every: int = 1
    calib_batches: int = 8
    deterministic: bool = False
    device: Optional[str] = None

    @field_validator('epochs', 'num_random_subnets')
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("must not be negative")
        return v

    @field_validator('batch_size', 'eval_every', 'checkpoint_every')
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator('lr_init', 'weight_decay')
    def validate_rate(cls, v):
        if v < 0:
            raise ValueError("must not be negative")
        return v

    @model_validator(mode='after')
    def validate_nd(self):
        if not self.apply_nd and self.net.strict_nd:
            raise ValueError("apply_nd=false samples width-decreasing subnets; set net.strict_nd=false")
        return self


class SearchConfig(_Strict):
    population: int = 128
    generations: int = 20
    parent_fraction: float = 0.25
    mutation_prob: float = 0.2
    crossover_fraction: float = 0.5
    ops_budgets: List[float] = [25.0, 60.0, 90.0, 130.0, 165.0, 200.0]   # M OPs
    calib_batches: int = 32
    batch_size: int = 256
    max_sample_factor: int = 50
    seed: int = 0
    device: Optional[str] = None

    @field_validator('population', 'batch_size', 'max_sample_factor')
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator('generations', 'calib_batches')
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("must not be negative")
        return v

    @field_validator('parent_fraction', 'crossover_fraction')
    def validate_fraction(cls, v):
        if not 0 < v <= 1:
            raise ValueError("must be in (0, 1]")
        return v

    @field_validator('mutation_prob')
    def validate_prob(cls, v):
        if not 0 <= v <= 1:
            raise ValueError("must be in [0, 1]")
        return v

    @field_validator('ops_budgets')
    def validate_budgets(cls, v):
        if any(b <= 0 for b in v):
            raise ValueError("budgets must be positive")
        if list(v) != sorted(v):
            raise ValueError("budgets must be sorted ascending")
        return v


# ============================================================================
# PRESETS
# ============================================================================

DESK_DATASET = {"kind": "cifar10", "image_size": 32, "val_per_class": 50, "num_workers": 4}

TRAIN_PRESETS: Dict[str, Dict[str, Any]] = {
    "paper": {
        "epochs": 512, "batch_size": 512, "lr_init": 5e-4, "weight_decay": 5e-6,
        "dataset": {"kind": "folder", "root": "imagenet", "image_size": 224, "val_per_class": 50, "num_workers": 8},
    },
    "paper-finetune": {
        "epochs": 100, "batch_size": 512, "lr_init": 1e-5, "weight_decay": 5e-6, "finetune": True,
        "dataset": {"kind": "folder", "root": "imagenet", "image_size": 224, "val_per_class": 50, "num_workers": 8},
    },
    "desk": {
        "epochs": 60, "batch_size": 256, "lr_init": 5e-4, "weight_decay": 5e-6,
        "dataset": DESK_DATASET, "eval_every": 5, "checkpoint_every": 5,
    },
    "desk-finetune": {
        "epochs": 5, "batch_size": 256, "lr_init": 1e-5, "weight_decay": 5e-6, "finetune": True,
        "dataset": DESK_DATASET,
    },
    "smoke": {
        "epochs": 1, "batch_size": 32, "lr_init": 5e-4,
        "dataset": {"kind": "synthetic", "num_samples": 256, "num_classes": 10, "val_per_class": 4},
        "calib_batches": 2,
    },
}

SEARCH_PRESETS: Dict[str, Dict[str, Any]] = {
    "paper": {"population": 128, "generations": 20, "ops_budgets": [25, 60, 90, 130, 165, 200]},
    "desk": {"population": 64, "generations": 10, "calib_batches": 16,
             "ops_budgets": [0.5, 1.0, 1.5, 2.5, 3.5, 5.0]},
    "smoke": {"population": 8, "generations": 1, "calib_batches": 2, "batch_size": 64,
              "ops_budgets": [1.0, 5.0]},
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _describe(e: ValidationError) -> str:
    first = e.errors()[0]
    field = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"invalid config field '{field}': {first['msg']}"


def load_config(model: Type[ModelT], presets: Dict[str, Dict[str, Any]], preset: Optional[str] = None,
                path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ModelT:
    """
    Resolve a configuration: preset values, then the JSON file, then explicit overrides.

    Raises:
        ConfigError: unknown preset, unreadable file, unknown key or invalid value
    """
    data: Dict[str, Any] = {}
    if preset is not None:
        if preset not in presets:
            raise ConfigError(f"unknown preset '{preset}'. Must be one of: {', '.join(sorted(presets))}")
        data = _merge(data, presets[preset])
    if path is not None:
        try:
            document = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        if not isinstance(document, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        data = _merge(data, document)
    if overrides:
        data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e))


def config_payload(config: BaseModel) -> Dict[str, Any]:
    """JSON-safe dict of a config, used for hashing and checkpoint metadata."""
    return json.loads(config.model_dump_json())
