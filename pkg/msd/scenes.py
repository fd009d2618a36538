"""Procedural panorama templates and their per-column structure estimator.

Each family is a sky band above a horizon row and a ground band below it:

- ``horizon``: flat sky, flat ground.
- ``gradient_sky``: sky brightens linearly toward the horizon.
- ``city``: ground carries vertical stripes of period ``stripe_period``.

One template is rendered per horizon phase and condition (scene class).
"""
from dataclasses import dataclass
from typing import List, Tuple

import torch

from msd.core import DTYPE, LatentImage, SceneDenoiserConfig, check_latent
from msd.errors import ConfigError, ContractError


@dataclass(frozen=True)
class SceneDescriptor:
    family: str
    channels: int
    height: int
    width: int
    classes: Tuple[Tuple[float, float], ...]  # (sky, ground) per condition
    horizon_rows: Tuple[int, ...]
    stripe_period: int = 8
    stripe_amplitude: float = 0.5

    @property
    def num_conditions(self) -> int:
        return len(self.classes)

    def render(self, horizon_row: int, condition: int = 0) -> LatentImage:
        if not 0 <= horizon_row <= self.height:
            raise ContractError(f"horizon row {horizon_row} outside 0..{self.height}")
        if not 0 <= condition < self.num_conditions:
            raise ContractError(f"condition {condition} outside 0..{self.num_conditions - 1}")
        sky, ground = self.classes[condition]
        rows = torch.arange(self.height, dtype=DTYPE).unsqueeze(1).expand(self.height, self.width)
        cols = torch.arange(self.width).unsqueeze(0).expand(self.height, self.width)
        is_sky = rows < horizon_row

        sky_band = torch.full((self.height, self.width), sky, dtype=DTYPE)
        ground_band = torch.full((self.height, self.width), ground, dtype=DTYPE)
        if self.family == "gradient_sky":
            sky_band = sky * (0.5 + 0.5 * (rows + 1.0) / max(horizon_row, 1))
        elif self.family == "city":
            half = max(self.stripe_period // 2, 1)
            sign = 1.0 - 2.0 * ((cols // half) % 2).to(DTYPE)
            ground_band = ground + self.stripe_amplitude * sign
        image = torch.where(is_sky, sky_band, ground_band)
        return image.unsqueeze(0).expand(self.channels, -1, -1).clone()

    def templates(self, condition: int) -> List[LatentImage]:
        return [self.render(row, condition) for row in self.horizon_rows]

    def all_templates(self) -> List[List[LatentImage]]:
        return [self.templates(c) for c in range(self.num_conditions)]

    def estimate_structure(self, z: LatentImage, condition: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
        """Best-fitting horizon row per column, and the mask of columns the fit succeeded on.

        A column fails when it holds non-finite values.
        """
        check_latent(z, "panorama")
        if tuple(z.shape) != (self.channels, self.height, self.width):
            raise ContractError(
                f"panorama shape {tuple(z.shape)} does not match scene "
                f"{(self.channels, self.height, self.width)}"
            )
        valid = torch.isfinite(z).all(dim=0).all(dim=0)
        safe = torch.where(torch.isfinite(z), z, torch.zeros_like(z))
        costs = torch.stack(
            [(safe - self.render(r, condition)).square().sum(dim=(0, 1)) for r in range(self.height + 1)]
        )
        rows = costs.argmin(dim=0)
        return rows, valid


def build_scene(config: SceneDenoiserConfig, channels: int, height: int, width: int) -> SceneDescriptor:
    rows = tuple(sorted({int(round(f * height)) for f in config.horizon_fractions}))
    if not rows:
        raise ConfigError("no horizon rows", key="denoiser.horizon_fractions")
    return SceneDescriptor(
        family=config.family,
        channels=channels,
        height=height,
        width=width,
        classes=tuple((c.sky_value, c.ground_value) for c in config.classes),
        horizon_rows=rows,
        stripe_period=config.stripe_period,
        stripe_amplitude=config.stripe_amplitude,
    )
