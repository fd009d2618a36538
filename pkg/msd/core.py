"""Domain types, noise schedule, pyramid and run configuration.

Every array in the package is a float64 CPU ``torch.Tensor``. A latent image
is a tensor of shape ``(channels, height, width)``.
"""
import json
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
from pydantic import BaseModel, Extra, Field, ValidationError, root_validator, validator
from pydantic.errors import PydanticValueError
from typing_extensions import Literal

from msd.errors import ConfigError, ContractError
from msd.parser import OverrideParser
from utils import digest

DTYPE = torch.float64

# C x H x W float64 tensor
LatentImage = torch.Tensor


def check_latent(z: LatentImage, name: str = "latent") -> LatentImage:
    if z.dim() != 3:
        raise ContractError(f"{name} must be (channels, height, width), got shape {tuple(z.shape)}")
    if z.dtype != DTYPE:
        raise ContractError(f"{name} must be float64, got {z.dtype}")
    return z


def is_finite(z: torch.Tensor) -> bool:
    return bool(torch.isfinite(z).all())


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar[t], t = 0..T, alpha_bar[0] = 1."""

    alpha_bar: torch.Tensor

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.numel() - 1

    def at(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ContractError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[t])


def build_schedule(total_steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear-beta variance-preserving schedule.

    Args:
        total_steps: number of denoising steps T (>= 1).
        beta_min: first beta, 0 < beta_min <= beta_max.
        beta_max: last beta, < 1.

    Returns:
        NoiseSchedule with alpha_bar[t] = prod_{k<=t} (1 - beta_k).
    """
    if total_steps < 1:
        raise ConfigError(f"must be >= 1, got {total_steps}", key="schedule.total_steps")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})", key="schedule"
        )
    betas = torch.linspace(beta_min, beta_max, total_steps, dtype=DTYPE)
    alpha_bar = torch.cat([torch.ones(1, dtype=DTYPE), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(alpha_bar=alpha_bar)


def decay_factor(t: int, total_steps: int, decay: str) -> float:
    if not 0 <= t <= total_steps:
        raise ContractError(f"timestep {t} outside [0, {total_steps}]")
    if decay == "none":
        return 1.0
    if decay == "scaled_cosine":
        return (1.0 + math.cos((total_steps - t) / total_steps * math.pi)) / 2.0
    raise ContractError(f"unknown decay rule {decay!r}")


def guidance_cutoff(total_steps: int, tau_fraction: float) -> int:
    # small guard so that e.g. 0.7 * 50 lands on 35, not 34
    return int(math.floor(tau_fraction * total_steps + 1e-9))


def guidance_active(t: int, total_steps: int, tau_fraction: float) -> bool:
    return t > guidance_cutoff(total_steps, tau_fraction)


######################## configuration ########################


class KeyedValueError(PydanticValueError):
    """Validator error that names the offending key relative to the model being validated."""

    code = "keyed"
    msg_template = "{message}"


class _Section(BaseModel):
    class Config:
        extra = Extra.forbid
        allow_mutation = False


class PyramidConfig(_Section):
    levels: int = Field(1, ge=1)
    downsample_factor: int = Field(2, ge=2)
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    renormalize_variance: bool = False

    @root_validator(skip_on_failure=True)
    def check_divisible(cls, values):
        f = values["downsample_factor"]
        h, w = values["height"], values["width"]
        for _ in range(values["levels"] - 1):
            if h % f or w % f:
                raise KeyedValueError(key="height", message=f"canvas {h}x{w} is not divisible by downsample_factor {f}")
            h, w = h // f, w // f
        return values

    def canvas_sizes(self) -> List[Tuple[int, int]]:
        """(H_s, W_s) for s = 1..S, coarsest first."""
        sizes = [(self.height, self.width)]
        for _ in range(self.levels - 1):
            h, w = sizes[0]
            sizes.insert(0, (h // self.downsample_factor, w // self.downsample_factor))
        return sizes


class ScheduleConfig(_Section):
    total_steps: int = Field(50, ge=1)
    beta_min: float = 1e-4
    beta_max: float = 0.2

    @root_validator(skip_on_failure=True)
    def check_bounds(cls, values):
        if not 0.0 < values["beta_min"] <= values["beta_max"] < 1.0:
            raise KeyedValueError(key="beta_max", message="need 0 < beta_min <= beta_max < 1")
        return values


class WindowConfig(_Section):
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    stride: int = Field(32, ge=1)
    boundary_aligned: bool = False
    weighting: Literal["uniform", "gaussian"] = "uniform"
    edge_weight: float = Field(0.1, gt=0.0, le=1.0)


class GuidanceConfig(_Section):
    omega: float = Field(1.0, ge=0.0)
    decay: Literal["none", "scaled_cosine"] = "scaled_cosine"
    tau_fraction: float = Field(0.7, ge=0.0, le=1.0)
    grad_steps: int = Field(1, ge=1)
    grad_mode: Literal["exact_vjp", "finite_difference"] = "exact_vjp"
    stop_gradient: bool = False
    loss_reduction: Literal["sum", "mean"] = "sum"

    def effective_omega(self, t: int, total_steps: int) -> float:
        return self.omega * decay_factor(t, total_steps, self.decay)


class GmmDenoiserConfig(_Section):
    kind: Literal["gmm"] = "gmm"
    num_components: int = Field(3, ge=1)
    num_conditions: int = Field(1, ge=1)
    sigma2: float = Field(0.05, gt=0.0)
    mean_scale: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)

    @property
    def condition_count(self) -> int:
        return self.num_conditions


class SceneClassConfig(_Section):
    sky_value: float = 1.0
    ground_value: float = -1.0


class SceneDenoiserConfig(_Section):
    kind: Literal["scene"] = "scene"
    family: Literal["horizon", "gradient_sky", "city"] = "horizon"
    horizon_fractions: List[float] = Field(default_factory=lambda: [0.375, 0.5, 0.625])
    classes: List[SceneClassConfig] = Field(
        default_factory=lambda: [
            SceneClassConfig(sky_value=1.0, ground_value=-1.0),
            SceneClassConfig(sky_value=-1.0, ground_value=1.0),
        ]
    )
    sigma2: float = Field(0.01, gt=0.0)
    stripe_period: int = Field(8, ge=2)
    stripe_amplitude: float = 0.5

    @validator("horizon_fractions")
    def check_fractions(cls, v):
        if not v:
            raise ValueError("at least one horizon fraction is required")
        if any(not 0.0 <= f <= 1.0 for f in v):
            raise ValueError("horizon fractions must lie in [0, 1]")
        return v

    @validator("classes")
    def check_classes(cls, v):
        if not v:
            raise ValueError("at least one scene class is required")
        return v

    @property
    def condition_count(self) -> int:
        return len(self.classes)


class MetricsConfig(_Section):
    patch_size: int = Field(8, ge=1)
    num_patches: int = Field(10000, ge=2)
    reference_samples: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)


class OutputConfig(_Section):
    directory: str = "outputs"
    name: str = "panorama"
    trace: bool = True
    image: bool = True
    raw: bool = True
    export_templates: bool = False


DenoiserConfig = Union[GmmDenoiserConfig, SceneDenoiserConfig]


class RunConfig(_Section):
    pyramid: PyramidConfig = Field(default_factory=PyramidConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    window: WindowConfig = Field(default_factory=WindowConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    denoiser: DenoiserConfig = Field(default_factory=GmmDenoiserConfig, discriminator="kind")
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    channels: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, le=2 ** 64 - 1)
    condition: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)

    @root_validator(skip_on_failure=True)
    def check_geometry(cls, values):
        pyramid: PyramidConfig = values["pyramid"]
        window: WindowConfig = values["window"]
        f = pyramid.downsample_factor
        h, w, stride = window.height, window.width, window.stride
        sizes = pyramid.canvas_sizes()
        H1, W1 = sizes[0]
        if H1 < h or W1 < w:
            raise KeyedValueError(
                key="window", message=f"level-1 canvas {H1}x{W1} is smaller than the {h}x{w} window"
            )
        if pyramid.levels > 1 and (stride % f or h % f or w % f):
            raise KeyedValueError(
                key="window.stride" if stride % f else "window",
                message=f"window ({h}x{w}, stride {stride}) must be divisible by downsample_factor {f}",
            )
        if not window.boundary_aligned:
            for level, (H, W) in enumerate(sizes, start=1):
                if (H - h) % stride or (W - w) % stride:
                    raise KeyedValueError(
                        key="window.stride",
                        message=f"stride {stride} does not tile the {H}x{W} canvas of level {level}; "
                        "enable window.boundary_aligned or change the geometry",
                    )
        if values["condition"] >= values["denoiser"].condition_count:
            raise KeyedValueError(
                key="condition",
                message=f"condition {values['condition']} is not one of the "
                f"{values['denoiser'].condition_count} denoiser conditions",
            )
        return values

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule.total_steps, self.schedule.beta_min, self.schedule.beta_max)


# pydantic tags errors inside the denoiser union with the member that was tried
_UNION_TAGS = {GmmDenoiserConfig.__name__, SceneDenoiserConfig.__name__, "gmm", "scene"}


def error_key(err: Dict[str, Any]) -> str:
    """Dotted path of the offending key for one pydantic error entry."""
    loc = [str(part) for part in err["loc"] if part != "__root__"]
    if len(loc) > 1 and loc[0] == "denoiser" and loc[1] in _UNION_TAGS:
        del loc[1]
    keyed = err.get("ctx", {}).get("key")
    if keyed:
        loc.append(keyed)
    return ".".join(loc) or "<root>"


def parse_config(document: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.parse_obj(document)
    except ValidationError as e:
        keys, problems = [], []
        for err in e.errors():
            key = error_key(err)
            keys.append(key)
            problems.append(f"{key}: {err['msg']}")
        error = ConfigError("; ".join(problems))
        error.key = keys[0] if keys else None
        raise error from e


def load_config(path: str, overrides: Optional[List[str]] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if overrides:
        document = OverrideParser().apply(document, overrides)
    return parse_config(document)


def config_digest(config: RunConfig) -> str:
    return digest(json.loads(config.json()))


def init_noise(pyramid: PyramidConfig, channels: int, seed: int) -> LatentImage:
    """i.i.d. standard normal level-S canvas, reproducible for a fixed seed."""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(seed)
    return torch.randn(channels, pyramid.height, pyramid.width, generator=generator, dtype=DTYPE)
