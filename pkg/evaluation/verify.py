"""Built-in oracle checks run by ``run_msd verify``."""
import time
from typing import Callable, List, Tuple

import pandas as pd
import torch

from msd.core import DTYPE, decay_factor, guidance_cutoff, parse_config
from msd.denoisers import GmmDenoiser, random_gmm_prior
from msd.models import get_denoiser
from msd.sampling import MultiScaleSampler, guidance_gradient, guidance_loss, multi_diffusion_step
from msd.tiling import WeightMatrix, build_grid, md_merge, md_objective_grad, make_weights
from presets.default_configs import WIDE_PANORAMA
from tools.gradient_check import central_difference_gradient, relative_error
from utils import get_logger

logger = get_logger(__name__)

CheckResult = Tuple[bool, str]

# two levels, T = 50: one 8x8 window at level 1, four at level 2
TRACE_GEOMETRY = {
    "pyramid": {"levels": 2, "height": 16, "width": 16},
    "schedule": {"total_steps": 50},
    "window": {"height": 8, "width": 8, "stride": 8},
    "guidance": {"tau_fraction": 0.7},
}


def check_grid_counts(corrupt_merge_weights: bool = False) -> CheckResult:
    high = len(build_grid(128, 512, 64, 64, 32, level=2))
    low = len(build_grid(64, 256, 64, 64, 32, level=1))
    return (high, low) == (45, 7), f"{high} + {low} windows"


def check_decay_endpoints(corrupt_merge_weights: bool = False) -> CheckResult:
    start, end = decay_factor(50, 50, "scaled_cosine"), decay_factor(0, 50, "scaled_cosine")
    config = parse_config(TRACE_GEOMETRY)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    with MultiScaleSampler(config, denoiser) as sampler:
        traces = sampler.run().traces
    guided = sum(tr.guidance_calls > 0 for tr in traces)
    return (start, end, guided) == (1.0, 0.0, 15), f"decay(T)={start} decay(0)={end} guided steps={guided}"


def _least_squares_merge(patches, weights, height: int, width: int) -> torch.Tensor:
    rows, targets = [], []
    for i, (win, patch) in enumerate(patches):
        root = weights[i].sqrt()
        for r in range(win.height):
            for c in range(win.width):
                row = torch.zeros(height * width, dtype=DTYPE)
                row[(win.top + r) * width + win.left + c] = root[r, c]
                rows.append(row)
                targets.append(root[r, c] * patch[0, r, c])
    a = torch.stack(rows)
    b = torch.stack(targets).unsqueeze(1)
    return torch.linalg.lstsq(a, b, driver="gelsd").solution.reshape(1, height, width)


def check_merge_argmin(corrupt_merge_weights: bool = False, trials: int = 50) -> CheckResult:
    g = torch.Generator().manual_seed(1)
    grid = build_grid(8, 8, 6, 6, 2)
    worst_fit, worst_grad = 0.0, 0.0
    for _ in range(trials):
        weights = WeightMatrix([0.5 + torch.rand(6, 6, generator=g, dtype=DTYPE) for _ in grid])
        patches = [(win, torch.randn(1, 6, 6, generator=g, dtype=DTYPE)) for win in grid]
        used = weights
        if corrupt_merge_weights:
            used = WeightMatrix([w * (1.0 + 0.5 * torch.rand(6, 6, generator=g, dtype=DTYPE)) for w in weights])
        merged = md_merge(patches, used, (8, 8, 1))
        reference = _least_squares_merge(patches, weights, 8, 8)
        worst_fit = max(worst_fit, float((merged - reference).abs().max()))
        worst_grad = max(worst_grad, float(md_objective_grad(merged, patches, weights).abs().max()))
    ok = worst_fit <= 1e-6 and worst_grad <= 1e-9
    return ok, f"max |merge - lstsq| {worst_fit:.2e}, max |grad| {worst_grad:.2e}"


def check_gradient_vs_fd(corrupt_merge_weights: bool = False, samples_per_case: int = 12) -> CheckResult:
    config = parse_config({"pyramid": {"height": 8, "width": 8}, "window": {"height": 8, "width": 8, "stride": 8}})
    schedule = config.build_schedule()
    total = schedule.total_steps
    g = torch.Generator().manual_seed(2)
    worst, samples = 0.0, 0
    for k in (1, 2, 3):
        denoiser = GmmDenoiser([random_gmm_prior(k, (1, 8, 8), 0.05, 1.0, seed=k)], schedule)
        for t in (total, total // 2, guidance_cutoff(total, 0.7) + 1):
            for _ in range(samples_per_case):
                x = torch.randn(1, 8, 8, generator=g, dtype=DTYPE)
                target = torch.randn(1, 4, 4, generator=g, dtype=DTYPE)
                analytic = guidance_gradient(x, target, t, 0, denoiser, config.guidance, schedule)
                numeric = central_difference_gradient(lambda v: guidance_loss(v, target, t, 0, denoiser, schedule), x)
                worst = max(worst, relative_error(analytic, numeric))
                samples += 1
    return worst <= 1e-4, f"max relative error {worst:.2e} over {samples} random points"


def check_omega_zero(corrupt_merge_weights: bool = False, seeds: int = 10) -> CheckResult:
    document = {**WIDE_PANORAMA, "guidance": {**WIDE_PANORAMA["guidance"], "omega": 0.0}}
    config = parse_config(document)
    schedule = config.build_schedule()
    denoiser, _ = get_denoiser(config, schedule)
    grid = build_grid(128, 512, 64, 64, 32, level=2)
    weights = make_weights(grid)
    total = schedule.total_steps
    worst = 0.0
    with MultiScaleSampler(config, denoiser) as sampler:
        for seed in range(seeds):
            z = torch.randn(1, 128, 512, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
            for t in (total, guidance_cutoff(total, 0.7) + 1, total // 2):
                guided, _, _ = sampler.one_step(z, t, 0)
                plain = multi_diffusion_step(z, grid, weights, t, 0, denoiser, schedule)
                worst = max(worst, float((guided - plain).abs().max()))
    return worst <= 1e-12, f"max |msd - md| {worst:.2e} over {seeds} seeds"


CHECKS: List[Tuple[str, Callable[..., CheckResult]]] = [
    ("grid_counts", check_grid_counts),
    ("decay_endpoints", check_decay_endpoints),
    ("merge_argmin", check_merge_argmin),
    ("gradient_vs_fd", check_gradient_vs_fd),
    ("omega_zero_equivalence", check_omega_zero),
]


def run_checks(corrupt_merge_weights: bool = False) -> pd.DataFrame:
    rows = []
    for name, check in CHECKS:
        start = time.perf_counter()
        try:
            passed, detail = check(corrupt_merge_weights=corrupt_merge_weights)
        except Exception as e:
            passed, detail = False, f"{e.__class__.__name__}: {e}"
        rows.append({"check": name, "passed": bool(passed), "detail": detail, "seconds": time.perf_counter() - start})
        (logger.info if passed else logger.error)(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
    return pd.DataFrame(rows, columns=["check", "passed", "detail", "seconds"])
