"""Training configuration: nested dataclasses loaded from JSON, with unknown
keys rejected so typos fail loudly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Optional

from .deform import FACE_OUT, FIELD_USE, ROUTINGS
from .losses import LossWeights
from .raster import RasterSettings
from .synthetic import DEFAULT_BOUNDS, DEFAULT_INIT_BOUNDS, DEFAULT_MOUTH_BOUNDS


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    levels: int = 8
    features: int = 2
    log2_table_size: int = 12
    n_min: int = 8
    n_max: int = 128

    def kwargs(self) -> dict:
        return {"n_levels": self.levels, "n_features": self.features, "log2_table_size": self.log2_table_size,
                "n_min": self.n_min, "n_max": self.n_max}


@dataclass
class OptimConfig:
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    lr_refiner: float = 1e-3
    # static raw parameters, per attribute
    lr_mu: float = 1e-3
    lr_scale: float = 5e-3
    lr_quat: float = 1e-3
    lr_opacity: float = 2e-2
    lr_color: float = 1e-2
    static_joint_scale: float = 0.3  # static step sizes are multiplied by this once deformation training starts
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15


@dataclass
class PhaseConfig:
    warm_steps: int = 600
    steps: int = 2400
    log_every: int = 1  # one log line per step; 0 disables


@dataclass
class AblationConfig:
    routing: str = "dual"
    field_use: str = "both"
    individual_attrs: str = "mu_rot_scale"
    sc_loss: bool = True
    nc_loss: bool = True
    c2f: bool = True

    def __post_init__(self):
        if self.routing not in ROUTINGS:
            raise ConfigError(f"routing must be one of {ROUTINGS}")
        if self.field_use not in FIELD_USE:
            raise ConfigError(f"field_use must be one of {FIELD_USE}")
        if self.individual_attrs not in FACE_OUT:
            raise ConfigError(f"individual_attrs must be one of {sorted(FACE_OUT)}")


ABLATIONS = {
    "full": {},
    "wo_fm": {"routing": "audio"},
    "wo_sc": {"sc_loss": False},
    "wo_c2f": {"c2f": False},
    "audio_only": {"routing": "audio"},
    "motion_only": {"routing": "motion"},
    "general_only": {"field_use": "general"},
    "individual_only": {"field_use": "individual"},
    "no_contrast": {"sc_loss": False, "nc_loss": False},
    "nc_only": {"sc_loss": False},
    "sc_only": {"nc_loss": False},
    "attrs_mu": {"individual_attrs": "mu"},
    "attrs_mu_rot_scale": {"individual_attrs": "mu_rot_scale"},
    "attrs_all": {"individual_attrs": "all"},
}


@dataclass
class RasterConfig:
    background: tuple = (1.0, 1.0, 1.0)
    alpha_clamp: float = 0.99
    early_stop: float = 1e-4
    cull_sigma: float = 3.0
    dilation: float = 0.3
    z_near: float = 0.01
    z_far: float = 10.0

    def settings(self) -> RasterSettings:
        return RasterSettings(background=tuple(self.background), alpha_clamp=self.alpha_clamp,
                              early_stop=self.early_stop, cull_sigma=self.cull_sigma, dilation=self.dilation,
                              z_near=self.z_near, z_far=self.z_far)


@dataclass
class TrainConfig:
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1
    image_size: int = 64
    n_face: int = 100
    n_mouth: int = 20
    bounds: list = field(default_factory=lambda: [list(b) for b in DEFAULT_BOUNDS])
    init_bounds: Optional[list] = field(default_factory=lambda: [list(b) for b in DEFAULT_INIT_BOUNDS])
    mouth_bounds: Optional[list] = field(default_factory=lambda: [list(b) for b in DEFAULT_MOUTH_BOUNDS])
    j: int = 2
    hidden: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PhaseConfig = field(default_factory=PhaseConfig)
    adapt: PhaseConfig = field(default_factory=lambda: PhaseConfig(warm_steps=400, steps=1600))
    ablation: AblationConfig = field(default_factory=AblationConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    keep_individuals: bool = False
    freeze_static: bool = False
    freeze_general: bool = False
    adapt_frames: Optional[int] = None
    perceptual_seed: int = 1234

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.n_face < 1 or self.n_mouth < 1:
            raise ConfigError("need at least one face and one mouth primitive")
        if self.j < 0:
            raise ConfigError("temporal window half-width j must be >= 0")
        if self.image_size < 16 or self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8 and >= 16")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return replace(self, ablation=replace(self.ablation, **ABLATIONS[name]))

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "")


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
