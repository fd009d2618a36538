import asyncio
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, validator
from typing_extensions import Literal

from msd.core import LatentImage, RunConfig, parse_config
from msd.denoisers import Denoiser
from msd.errors import NumericalError
from msd.metrics import MetricReport, evaluate_sample
from msd.models import get_denoiser
from msd.sampling import MultiScaleSampler, SampleResult, reference_windows
from msd.scenes import SceneDescriptor
from utils import atomic_write, get_logger

logger = get_logger(__name__)

COLUMNS = ["param", "value", "seed", "metric", "score"]


class SweepSpec(BaseModel):
    param: Literal["omega", "tau_fraction"]
    values: List[float]
    seeds: List[int] = [0]
    workers: int = max(os.cpu_count() or 1, 1)

    @validator("values")
    def nonempty(cls, v):
        if not v:
            raise ValueError("a sweep needs at least one value")
        return v

    @validator("seeds")
    def has_seeds(cls, v):
        if not v:
            raise ValueError("a sweep needs at least one seed")
        return v

    @validator("workers")
    def positive(cls, v):
        if v < 1:
            raise ValueError("workers must be >= 1")
        return v

    def runs(self) -> List[Tuple[float, int]]:
        return [(value, seed) for value in self.values for seed in self.seeds]


def with_setting(config: RunConfig, param: str, value: float, seed: int) -> RunConfig:
    document = json.loads(config.json())
    document["guidance"][param] = value
    document["seed"] = seed
    return parse_config(document)


def generate(
    config: RunConfig,
    denoiser: Denoiser,
    scene: Optional[SceneDescriptor] = None,
    reference_set: Optional[Sequence[LatentImage]] = None,
    trace_path: Optional[str] = None,
) -> Tuple[SampleResult, MetricReport, Dict[int, int]]:
    """One sampling run plus its metric report."""
    with MultiScaleSampler(config, denoiser) as sampler:
        result = sampler.run(trace_path=trace_path)
        grid = sampler.grids[-1]
        counts = sampler.window_counts()
    m = config.metrics
    report = evaluate_sample(
        result.canvas,
        result.levels,
        grid,
        config.pyramid.downsample_factor,
        sum(tr.guidance_calls for tr in result.traces),
        scene=scene,
        condition=config.condition,
        reference_set=reference_set,
        patch=m.patch_size,
        num_patches=m.num_patches,
        seed=m.seed,
    )
    return result, report, counts


def _run_one(
    config: RunConfig, spec: SweepSpec, value: float, seed: int, denoiser: Denoiser,
    scene: Optional[SceneDescriptor], reference_set: Sequence[LatentImage],
) -> List[dict]:
    run_config = with_setting(config, spec.param, value, seed)
    try:
        _, report, _ = generate(run_config, denoiser, scene, reference_set)
    except NumericalError as e:
        logger.error(f"{spec.param}={value} seed={seed} aborted: {e}")
        return [{"param": spec.param, "value": value, "seed": seed, "metric": "aborted", "score": math.nan}]
    logger.info(f"{spec.param}={value} seed={seed} done")
    return [
        {"param": spec.param, "value": value, "seed": seed, "metric": name, "score": mv.value}
        for name, mv in report.metrics.items()
    ]


async def _sweep(config, spec, denoiser, scene, reference_set) -> List[List[dict]]:
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        tasks = [
            loop.run_in_executor(pool, _run_one, config, spec, value, seed, denoiser, scene, reference_set)
            for value, seed in spec.runs()
        ]
        return await asyncio.gather(*tasks)


def run_sweep(config: RunConfig, spec: SweepSpec) -> Tuple[pd.DataFrame, int]:
    """Rows in (value, seed) order and the number of aborted runs."""
    denoiser, scene = get_denoiser(config, config.build_schedule())
    reference_set = reference_windows(config, denoiser)
    per_run = asyncio.run(_sweep(config, spec, denoiser, scene, reference_set))
    rows = [row for run in per_run for row in run]
    aborted = sum(1 for row in rows if row["metric"] == "aborted")
    return pd.DataFrame(rows, columns=COLUMNS), aborted


def write_sweep(frame: pd.DataFrame, path: str) -> str:
    atomic_write(path, frame.to_csv(index=False, lineterminator="\n"))
    return path
