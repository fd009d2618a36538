"""DDIM step, MultiDiffusion joint step, multi-scale guidance and the sampling loop.

One timestep of multi-scale sampling:

1. downsample the level-S canvas into the chain z_t^{S-1} .. z_t^1;
2. denoise level 1 with a plain MultiDiffusion step;
3. for s = 2..S, pull every window's one-step denoise, downsampled, toward
   the already denoised level-(s-1) region by gradient descent, then denoise
   the guided windows and merge them.
"""
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel

from msd.core import (
    GuidanceConfig,
    LatentImage,
    NoiseSchedule,
    RunConfig,
    check_latent,
    guidance_active,
    init_noise,
    is_finite,
    parse_config,
)
from msd.denoisers import Denoiser
from msd.errors import ConfigError, ContractError, NumericalError
from msd.models import get_denoiser
from msd.tiling import (
    WeightMatrix,
    WindowGrid,
    WindowSpec,
    build_grid,
    crop,
    downsample,
    downsample_transpose,
    lowres_window,
    make_weights,
    md_merge,
)
from tools.gradient_check import central_difference_gradient
from tools.trace_writer import TraceWriter
from utils import get_logger


class StepTrace(BaseModel):
    t: int
    loss_md: Dict[int, float]
    loss_ms: Dict[int, float]
    guidance_calls: int
    duration_s: float


@dataclass
class SampleResult:
    canvas: LatentImage
    traces: List[StepTrace]
    levels: List[LatentImage]  # final canvases, coarsest first


def _coefficients(t: int, schedule: NoiseSchedule) -> Tuple[float, float, float, float]:
    if not 1 <= t <= schedule.total_steps:
        raise ContractError(f"DDIM step needs 1 <= t <= {schedule.total_steps}, got {t}")
    a_t, a_prev = schedule.at(t), schedule.at(t - 1)
    return math.sqrt(a_t), math.sqrt(1.0 - a_t), math.sqrt(a_prev), math.sqrt(1.0 - a_prev)


def ddim_step(x_t: LatentImage, eps: LatentImage, t: int, schedule: NoiseSchedule) -> LatentImage:
    """Deterministic DDIM update x_t -> x_{t-1}."""
    if eps.shape != x_t.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} does not match {tuple(x_t.shape)}")
    s_t, n_t, s_prev, n_prev = _coefficients(t, schedule)
    x0 = (x_t - n_t * eps) / s_t
    return s_prev * x0 + n_prev * eps


def phi_step(
    x_t: LatentImage, t: int, condition: int, denoiser: Denoiser, schedule: Optional[NoiseSchedule] = None
) -> LatentImage:
    schedule = schedule or denoiser.schedule
    return ddim_step(x_t, denoiser.predict_noise(x_t, t, condition), t, schedule)


def phi_vjp(
    x_t: LatentImage,
    t: int,
    condition: int,
    denoiser: Denoiser,
    cotangent: LatentImage,
    schedule: Optional[NoiseSchedule] = None,
    stop_gradient: bool = False,
) -> LatentImage:
    """Transpose-Jacobian product of ``phi_step``; affine in the predicted noise."""
    schedule = schedule or denoiser.schedule
    s_t, n_t, s_prev, n_prev = _coefficients(t, schedule)
    direct = (s_prev / s_t) * cotangent
    if stop_gradient:
        return direct
    through_eps = n_prev - s_prev * n_t / s_t
    return direct + through_eps * denoiser.vjp(x_t, t, condition, cotangent)


def _residual(
    x: LatentImage, target: LatentImage, t: int, condition: int, denoiser: Denoiser, schedule: NoiseSchedule, factor: int
) -> LatentImage:
    low = downsample(phi_step(x, t, condition, denoiser, schedule), factor)
    if low.shape != target.shape:
        raise ContractError(f"low-resolution target shape {tuple(target.shape)} != {tuple(low.shape)}")
    return low - target


def guidance_loss(
    x: LatentImage,
    target: LatentImage,
    t: int,
    condition: int,
    denoiser: Denoiser,
    schedule: Optional[NoiseSchedule] = None,
    factor: int = 2,
    reduction: str = "sum",
) -> float:
    """||ds(phi(x)) - target||^2 (or its mean over target elements)."""
    schedule = schedule or denoiser.schedule
    r = _residual(x, target, t, condition, denoiser, schedule, factor)
    loss = float(r.square().sum())
    return loss / r.numel() if reduction == "mean" else loss


def guidance_gradient(
    x: LatentImage,
    target: LatentImage,
    t: int,
    condition: int,
    denoiser: Denoiser,
    guidance: GuidanceConfig,
    schedule: Optional[NoiseSchedule] = None,
    factor: int = 2,
) -> LatentImage:
    schedule = schedule or denoiser.schedule
    if guidance.grad_mode == "finite_difference":
        return central_difference_gradient(
            lambda v: guidance_loss(v, target, t, condition, denoiser, schedule, factor, guidance.loss_reduction), x
        )
    if not denoiser.supports_vjp:
        raise ConfigError(
            f"{denoiser.__class__.__name__} has no vjp; use grad_mode=finite_difference", key="guidance.grad_mode"
        )
    r = _residual(x, target, t, condition, denoiser, schedule, factor)
    cot = 2.0 * r
    if guidance.loss_reduction == "mean":
        cot = cot / r.numel()
    return phi_vjp(
        x, t, condition, denoiser, downsample_transpose(cot, factor), schedule, guidance.stop_gradient
    )


def ms_guidance(
    x_t_i: LatentImage,
    lowres_target: LatentImage,
    t: int,
    condition: int,
    denoiser: Denoiser,
    guidance: GuidanceConfig,
    schedule: Optional[NoiseSchedule] = None,
    factor: int = 2,
) -> LatentImage:
    """Gradient descent pulling ds(phi(x)) toward the low-resolution window."""
    schedule = schedule or denoiser.schedule
    expected = (x_t_i.shape[0], x_t_i.shape[1] // factor, x_t_i.shape[2] // factor)
    if tuple(lowres_target.shape) != expected:
        raise ContractError(f"low-resolution target shape {tuple(lowres_target.shape)} != {expected}")
    omega_t = guidance.effective_omega(t, schedule.total_steps)
    if omega_t == 0.0:
        return x_t_i
    x = x_t_i
    for _ in range(guidance.grad_steps):
        x = x - omega_t * guidance_gradient(x, lowres_target, t, condition, denoiser, guidance, schedule, factor)
    return x


def _map(pool: Optional[ThreadPoolExecutor], fn: Callable, items: Sequence) -> List:
    # results come back in item order either way
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def multi_diffusion_step(
    z_t: LatentImage,
    grid: WindowGrid,
    weights: WeightMatrix,
    t: int,
    condition: int,
    denoiser: Denoiser,
    schedule: Optional[NoiseSchedule] = None,
    pool: Optional[ThreadPoolExecutor] = None,
) -> LatentImage:
    """Crop every window, denoise it one step, merge by weighted average."""
    merged, _ = _denoise_and_merge(
        z_t, grid, weights, [crop(z_t, win) for win in grid], t, condition, denoiser, schedule, pool
    )
    return merged


def _denoise_and_merge(
    z_t: LatentImage,
    grid: WindowGrid,
    weights: WeightMatrix,
    windows: Sequence[LatentImage],
    t: int,
    condition: int,
    denoiser: Denoiser,
    schedule: Optional[NoiseSchedule],
    pool: Optional[ThreadPoolExecutor],
) -> Tuple[LatentImage, List[LatentImage]]:
    check_latent(z_t, "canvas")
    denoised = _map(pool, lambda x: phi_step(x, t, condition, denoiser, schedule), windows)
    merged = md_merge(list(zip(grid.windows, denoised)), weights, (grid.height, grid.width, z_t.shape[0]))
    return merged, denoised


def _md_loss(z: LatentImage, grid: WindowGrid, denoised: Sequence[LatentImage]) -> float:
    return float(sum(float((crop(z, win) - y).square().sum()) for win, y in zip(grid, denoised)))


def _ms_loss(z: LatentImage, z_low: LatentImage, grid: WindowGrid, factor: int) -> float:
    total = 0.0
    for win in grid:
        diff = downsample(crop(z, win), factor) - crop(z_low, lowres_window(win, factor))
        total += float(diff.square().sum())
    return total


class MultiScaleSampler:
    """Runs multi-scale joint diffusion for one RunConfig.

    Single-owner: concurrent sampling needs separate instances.
    """

    def __init__(self, config: RunConfig, denoiser: Denoiser, schedule: Optional[NoiseSchedule] = None):
        self.config = config
        self.denoiser = denoiser
        self.schedule = schedule or denoiser.schedule
        self.factor = config.pyramid.downsample_factor
        win = config.window
        self.grids: List[WindowGrid] = [
            build_grid(H, W, win.height, win.width, win.stride, level=s, boundary_aligned=win.boundary_aligned)
            for s, (H, W) in enumerate(config.pyramid.canvas_sizes(), start=1)
        ]
        self.weights: List[WeightMatrix] = [make_weights(g, win.weighting, win.edge_weight) for g in self.grids]
        self.pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
        self.logging = get_logger(self.__class__.__name__)

    @property
    def levels(self) -> int:
        return self.config.pyramid.levels

    def window_counts(self) -> Dict[int, int]:
        return {grid.level: len(grid) for grid in self.grids}

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown(wait=True)
            self.pool = None

    def __enter__(self) -> "MultiScaleSampler":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def _check_finite(self, z: LatentImage, level: int, t: int) -> None:
        if not is_finite(z):
            raise NumericalError(level=level, timestep=t)

    def downsample_chain(self, z_top: LatentImage) -> List[LatentImage]:
        """[z^1, ..., z^S] recomputed from the level-S canvas."""
        chain = [z_top]
        for _ in range(self.levels - 1):
            low = downsample(chain[0], self.factor)
            if self.config.pyramid.renormalize_variance:
                low = low * self.factor
            chain.insert(0, low)
        return chain

    def one_step(
        self, z_t: LatentImage, t: int, condition: int
    ) -> Tuple[LatentImage, StepTrace, List[LatentImage]]:
        start = time.perf_counter()
        guidance = self.config.guidance
        active = guidance_active(t, self.schedule.total_steps, guidance.tau_fraction)
        chain = self.downsample_chain(z_t)

        ############ I. plain MultiDiffusion at the coarsest level ############
        grid, weights = self.grids[0], self.weights[0]
        z_prev, denoised = _denoise_and_merge(
            chain[0], grid, weights, [crop(chain[0], w) for w in grid], t, condition, self.denoiser, self.schedule, self.pool
        )
        self._check_finite(z_prev, 1, t)
        out = [z_prev]
        loss_md = {1: _md_loss(z_prev, grid, denoised)}
        loss_ms: Dict[int, float] = {}
        calls = 0

        ############ II. guided levels, coarse to fine ############
        for s in range(2, self.levels + 1):
            grid, weights = self.grids[s - 1], self.weights[s - 1]
            z_s, z_low = chain[s - 1], out[-1]

            def guide(win: WindowSpec) -> LatentImage:
                x = crop(z_s, win)
                if not active:
                    return x
                target = crop(z_low, lowres_window(win, self.factor))
                return ms_guidance(x, target, t, condition, self.denoiser, guidance, self.schedule, self.factor)

            guided = _map(self.pool, guide, grid.windows)
            if active:
                calls += len(grid)
            z_prev, denoised = _denoise_and_merge(
                z_s, grid, weights, guided, t, condition, self.denoiser, self.schedule, self.pool
            )
            self._check_finite(z_prev, s, t)
            loss_md[s] = _md_loss(z_prev, grid, denoised)
            loss_ms[s] = _ms_loss(z_prev, z_low, grid, self.factor)
            out.append(z_prev)

        trace = StepTrace(
            t=t, loss_md=loss_md, loss_ms=loss_ms, guidance_calls=calls, duration_s=time.perf_counter() - start
        )
        self.logging.debug(f"t={t} guidance_calls={calls} loss_md={loss_md} loss_ms={loss_ms}")
        return out[-1], trace, out

    def run(self, condition: Optional[int] = None, trace_path: Optional[str] = None) -> SampleResult:
        condition = self.config.condition if condition is None else condition
        z = init_noise(self.config.pyramid, self.config.channels, self.config.seed)
        traces: List[StepTrace] = []
        levels: List[LatentImage] = []
        with TraceWriter(trace_path) if trace_path else nullcontext() as writer:
            for t in range(self.schedule.total_steps, 0, -1):
                z, trace, levels = self.one_step(z, t, condition)
                traces.append(trace)
                if writer:
                    writer.write(trace)
        return SampleResult(canvas=z, traces=traces, levels=levels)


def msd_one_step(
    z_t_S: LatentImage, t: int, condition: int, denoiser: Denoiser, config: RunConfig
) -> LatentImage:
    with MultiScaleSampler(config, denoiser) as sampler:
        z, _, _ = sampler.one_step(z_t_S, t, condition)
    return z


def sample(
    config: RunConfig, condition: Optional[int] = None, denoiser: Optional[Denoiser] = None
) -> Tuple[LatentImage, List[StepTrace]]:
    if denoiser is None:
        denoiser, _ = get_denoiser(config, config.build_schedule())
    with MultiScaleSampler(config, denoiser) as sampler:
        result = sampler.run(condition)
    return result.canvas, result.traces


def reference_windows(config: RunConfig, denoiser: Denoiser, count: Optional[int] = None) -> List[LatentImage]:
    """Single-window samples (no tiling) used as the patch-statistics reference set."""
    count = config.metrics.reference_samples if count is None else count
    document = json.loads(config.json())
    document["pyramid"].update(levels=1, height=config.window.height, width=config.window.width)
    document["guidance"]["omega"] = 0.0
    samples = []
    for i in range(count):
        document["seed"] = config.metrics.seed + i
        with MultiScaleSampler(parse_config(document), denoiser) as sampler:
            samples.append(sampler.run().canvas)
    return samples
