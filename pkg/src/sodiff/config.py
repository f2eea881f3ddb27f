"""Run configuration: nested dataclasses, YAML/JSON files and ``key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .diffusion import AutoencoderConfig, LoraConfig, UNetConfig
from .losses import LossWeights
from .saipe import SaipeConfig
from .time_predictor import PredictorConfig

__all__ = [
    "ScheduleConfig",
    "DataConfig",
    "TrainConfig",
    "STAGES",
    "ABLATIONS",
    "default_config",
    "apply_ablation",
    "apply_overrides",
    "load_config",
    "save_config",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
]

STAGES = ("autoencoder", "prior", "saipe", "sodiff", "qf")

ABLATIONS = ("full", "wo_align", "text_prompt", "wo_tp", "wo_qf", "wo_ea", "wo_gan")


@dataclass
class ScheduleConfig:
    T_max: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass
class DataConfig:
    crop: int = 64
    qf_range: tuple[int, int] = (5, 95)
    qf_mode: str = "uniform"  # or "stratified"
    fixed_qf: int | None = None
    flip: bool = True
    subsample: str = "444"
    min_size: int = 64
    synthetic_pool: int = 0  # >0: extra synthetic images mixed into autoencoder/prior training

    def __post_init__(self):
        self.qf_range = tuple(int(q) for q in self.qf_range)
        lo, hi = self.qf_range
        if not (1 <= lo <= hi <= 100):
            raise ValueError(f"qf_range must satisfy 1 <= lo <= hi <= 100, got {self.qf_range}")


@dataclass
class TrainConfig:
    stage: str = "sodiff"
    optimizer: str = "adamw"
    lr: float = 1e-5
    lr_schedule: str = "constant"  # or "onecycle"
    batch: int = 4
    iters: int = 1000
    seed: int = 0
    grad_clip: float | None = None
    log_every: int = 1
    ckpt_every: int = 0  # 0: only at the end
    checksum_every: int = 50

    # stage-2 knobs
    predictor_lr: float | None = None  # None -> lr
    disc_lr: float = 1e-5
    disc_every: int = 1  # discriminator steps per generator step ratio 1:1
    prompt_source: str = "image"  # "image" (e_img) or "text" (caption stub)
    fixed_tau: float | None = None  # set -> no time predictor
    kl_weight: float | None = None  # autoencoder override

    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    saipe: SaipeConfig = field(default_factory=SaipeConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    text_seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if self.prompt_source not in ("image", "text"):
            raise ValueError(f"prompt_source must be image or text, got {self.prompt_source!r}")
        if self.batch < 1 or self.iters < 0:
            raise ValueError("batch must be >= 1 and iters >= 0")


_STAGE_DEFAULTS: dict[str, dict[str, Any]] = {
    "autoencoder": dict(optimizer="adam", lr=1e-3, lr_schedule="onecycle", batch=8, iters=2000),
    "prior": dict(optimizer="adamw", lr=2e-4, batch=8, iters=1000),
    "saipe": dict(optimizer="adam", lr=2e-4, batch=4, iters=1000),
    "sodiff": dict(optimizer="adamw", lr=1e-5, batch=4, iters=1000),
    "qf": dict(optimizer="adam", lr=1e-3, batch=16, iters=1000),
}


def default_config(stage: str = "sodiff", **overrides) -> TrainConfig:
    """Stage defaults: stage 1 Adam 2e-4, stage 2 AdamW 1e-5, QF range [5, 95]."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    return TrainConfig(stage=stage, **{**_STAGE_DEFAULTS[stage], **overrides})


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    """Return a copy of ``cfg`` switched to one ablation axis.

    - ``wo_align``: stage 1 trains without the alignment term (λ = 0)
    - ``text_prompt``: the UNet is prompted with the caption's text embedding
    - ``wo_tp``: no time predictor, τ fixed at T_max / 2
    - ``wo_qf``: β = 0
    - ``wo_ea``: reconstruction loss is MSE only
    - ``wo_gan``: α = 0 and the discriminator is never stepped
    """
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    cfg = copy.deepcopy(cfg)
    if name == "wo_align":
        cfg.saipe.lambda_align = 0.0
    elif name == "text_prompt":
        cfg.prompt_source = "text"
    elif name == "wo_tp":
        cfg.fixed_tau = cfg.schedule.T_max / 2
    elif name == "wo_qf":
        cfg.weights.beta = 0.0
    elif name == "wo_ea":
        cfg.weights.use_ea = False
    elif name == "wo_gan":
        cfg.weights.use_gan = False
    return cfg


# ---------------------------------------------------------------- (de)serialisation


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value) if sub is not None else _number(fields[key], value)
    return cls(**kwargs)


def _number(f: dataclasses.Field, value):
    # YAML 1.1 reads "3e-4" (no dot) as a string and "444" as an int
    if isinstance(value, str) and "float" in str(f.type):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, int) and not isinstance(value, bool) and str(f.type) == "str":
        return str(value)
    return value


_NESTED = {
    (TrainConfig, "data"): DataConfig,
    (TrainConfig, "schedule"): ScheduleConfig,
    (TrainConfig, "weights"): LossWeights,
    (TrainConfig, "autoencoder"): AutoencoderConfig,
    (TrainConfig, "unet"): UNetConfig,
    (TrainConfig, "lora"): LoraConfig,
    (TrainConfig, "saipe"): SaipeConfig,
    (TrainConfig, "predictor"): PredictorConfig,
}


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    stage = data.get("stage", "sodiff")
    base = config_to_dict(default_config(stage))
    return _build(TrainConfig, _deep_merge(base, data))


def _deep_merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(cfg: TrainConfig, overrides: list[str] | None) -> TrainConfig:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars/lists."""
    if not overrides:
        return cfg
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return _build(TrainConfig, data)


def load_config(path, stage: str | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Read a YAML or JSON config file; ``stage`` fills in when the file has none."""
    data = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
    if stage is not None:
        data.setdefault("stage", stage)
    return apply_overrides(config_from_dict(data), overrides)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False), encoding="utf-8")


def config_hash(sub_config) -> str:
    """Short sha256 of a (module) config; used to detect incompatible checkpoints."""
    blob = json.dumps(config_to_dict(sub_config) if dataclasses.is_dataclass(sub_config) else sub_config, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
