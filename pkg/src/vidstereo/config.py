"""Model, pipeline and training configuration plus layered config files.

Config files are flat YAML mappings (``key: value``) whose keys are the field
names of :class:`ModelConfig`, :class:`PipelineConfig` or :class:`TrainConfig`
(prefix ``model.`` / ``train.`` optional). Later layers and ``KEY=VALUE``
overrides win.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import yaml

UPDATER_KERNELS = ("3d", "2d")
SUPER_KERNELS = ("1x1x15", "1x3x3", "none")
CORRELATION_MODES = ("single-multi", "multi-multi", "per-frame")
MOTION_STATES = ("shared", "separated")
STAGE_WEIGHTS = ("shared", "separated")

# ablation switches accepted by ``--ablation KEY=VALUE``: key -> allowed values
ABLATIONS = {
    "updater_kernel": UPDATER_KERNELS,
    "super_kernel": SUPER_KERNELS,
    "correlation_mode": CORRELATION_MODES,
    "motion_state": MOTION_STATES,
    "stage_weights": STAGE_WEIGHTS,
    "alignment": ("on", "off"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 96
    encoder_widths: tuple[int, int, int] = (32, 48, 64)
    corr_dim: int = 96
    disp_dim: int = 64
    motion_dim: int = 64
    hidden_dim: int = 96
    updater_kernel: str = "3d"
    super_kernel: str = "1x1x15"
    correlation_mode: str = "single-multi"
    motion_state: str = "shared"
    stage_weights: str = "shared"
    alignment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        for name, allowed in (("updater_kernel", UPDATER_KERNELS), ("super_kernel", SUPER_KERNELS),
                              ("correlation_mode", CORRELATION_MODES),
                              ("motion_state", MOTION_STATES), ("stage_weights", STAGE_WEIGHTS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        for name in ("feature_dim", "corr_dim", "disp_dim", "motion_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Narrow widths sized for single-core CPU training."""
        base = dict(feature_dim=32, encoder_widths=(16, 24, 32), corr_dim=32, disp_dim=16,
                    motion_dim=16, hidden_dim=32)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class PipelineConfig:
    iterations_train: int = 10
    iterations_eval: int = 20
    frames_train: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.iterations_train < 1 or self.iterations_eval < 1:
            raise ConfigError("iterations must be >= 1")
        if self.frames_train < 2:
            raise ConfigError("frames_train must be >= 2")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    lr: float = 4e-4
    weight_decay: float = 1e-5
    pct_start: float = 0.05
    grad_clip: float = 1.0
    gamma: float = 0.9
    crop: tuple[int, int] | None = None
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.crop is not None:
            crop = tuple(int(v) for v in self.crop)
            if len(crop) != 2 or crop[0] % 16 or crop[1] % 16:
                raise ConfigError(f"crop must be (height, width) multiples of 16, got {self.crop}")
            object.__setattr__(self, "crop", crop)


def _coerce(value, current):
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ConfigError(f"expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(value, str) and not isinstance(current, str):
        value = yaml.safe_load(value)
    if isinstance(current, tuple) or (current is None and isinstance(value, list)):
        return tuple(value) if value is not None else None
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def apply_overrides(pipeline: PipelineConfig, train: TrainConfig, values: dict):
    """Return ``(pipeline, train)`` with flat ``values`` applied."""
    model_names = {f.name for f in fields(ModelConfig)}
    pipe_names = {f.name for f in fields(PipelineConfig)} - {"model"}
    train_names = {f.name for f in fields(TrainConfig)}
    m_up, p_up, t_up = {}, {}, {}
    for key, value in values.items():
        bare = key.split(".", 1)[1] if key.startswith(("model.", "train.", "pipeline.")) else key
        if bare in model_names:
            m_up[bare] = _coerce(value, getattr(pipeline.model, bare))
        elif bare in pipe_names:
            p_up[bare] = _coerce(value, getattr(pipeline, bare))
        elif bare in train_names:
            t_up[bare] = _coerce(value, getattr(train, bare))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        model = replace(pipeline.model, **m_up)
        pipeline = replace(pipeline, model=model, **p_up)
        train = replace(train, **t_up)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return pipeline, train


def parse_ablation(items) -> dict:
    """Validate ``KEY=VALUE`` ablation strings against :data:`ABLATIONS`."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"ablation {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        if key not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation key {key!r}; valid keys: {', '.join(sorted(ABLATIONS))}")
        if value not in ABLATIONS[key]:
            raise ConfigError(f"ablation {key} must be one of {ABLATIONS[key]}, got {value!r}")
        out[key] = value
    return out


def load_config_layers(paths=(), overrides: dict | None = None,
                       pipeline: PipelineConfig | None = None,
                       train: TrainConfig | None = None):
    """Apply config files in order, then ``overrides``."""
    pipeline = pipeline or PipelineConfig(model=ModelConfig.desk())
    train = train or TrainConfig()
    for path in paths:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a key/value mapping")
        flat = {}
        for k, v in data.items():
            if isinstance(v, dict) and k in ("model", "train", "pipeline"):
                flat.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                flat[k] = v
        pipeline, train = apply_overrides(pipeline, train, flat)
    if overrides:
        pipeline, train = apply_overrides(pipeline, train, overrides)
    return pipeline, train


def to_dict(pipeline: PipelineConfig, train: TrainConfig | None = None) -> dict:
    d = asdict(pipeline)
    d["model"]["encoder_widths"] = list(pipeline.model.encoder_widths)
    if train is not None:
        d["train"] = asdict(train)
        if train.crop is not None:
            d["train"]["crop"] = list(train.crop)
    return d


def from_dict(d: dict):
    model = ModelConfig(**d["model"])
    rest = {k: v for k, v in d.items() if k not in ("model", "train")}
    pipeline = PipelineConfig(model=model, **rest)
    train = TrainConfig(**d["train"]) if "train" in d else None
    return pipeline, train
