"""Desk-scale evaluation: seams, cross-scale consistency, layout coherence, patch Frechet distance."""
import hashlib
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import pandas as pd
import torch
from pydantic import BaseModel, validator

from msd.core import DTYPE, LatentImage, check_latent
from msd.errors import ContractError
from msd.scenes import SceneDescriptor
from msd.tiling import WindowGrid, downsample
from utils import atomic_write, get_logger

logger = get_logger(__name__)


class MetricValue(BaseModel):
    value: float
    count: int

    @validator("value")
    def finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("metric values must be finite")
        return v

    @validator("count")
    def positive(cls, v):
        if v < 1:
            raise ValueError("sample counts must be >= 1")
        return v


class MetricReport(BaseModel):
    metrics: Dict[str, MetricValue] = {}
    config_digest: str = ""
    seeds: List[int] = []
    notes: List[str] = []

    def add(self, name: str, value: float, count: int) -> None:
        self.metrics[name] = MetricValue(value=float(value), count=max(int(count), 1))

    def to_frame(self) -> pd.DataFrame:
        rows = [{"metric": k, "value": v.value, "count": v.count} for k, v in self.metrics.items()]
        return pd.DataFrame(rows, columns=["metric", "value", "count"])

    def write(self, json_path: str, csv_path: str) -> None:
        atomic_write(json_path, self.json(indent=2))
        atomic_write(csv_path, self.to_frame().to_csv(index=False, lineterminator="\n"))


######################## seams ########################


def _boundary_lines(grid: WindowGrid) -> Tuple[List[int], List[int]]:
    """Rows r (resp. columns) such that pixels r-1 and r straddle a window edge."""
    rows, cols = set(), set()
    for win in grid:
        if win.top > 0:
            rows.add(win.top)
        if win.bottom < grid.height:
            rows.add(win.bottom)
        if win.left > 0:
            cols.add(win.left)
        if win.right < grid.width:
            cols.add(win.right)
    return sorted(rows), sorted(cols)


def seam_statistics(z: LatentImage, grid: WindowGrid) -> Tuple[float, int]:
    """Seam energy and the number of boundary-straddling pixel pairs it averages."""
    check_latent(z, "panorama")
    if tuple(z.shape[1:]) != (grid.height, grid.width):
        raise ContractError(f"grid {grid.height}x{grid.width} does not match panorama {tuple(z.shape[1:])}")
    rows, cols = _boundary_lines(grid)
    dv = (z[:, 1:, :] - z[:, :-1, :]).square()
    dh = (z[:, :, 1:] - z[:, :, :-1]).square()
    row_mask = torch.zeros(grid.height - 1, dtype=torch.bool)
    col_mask = torch.zeros(grid.width - 1, dtype=torch.bool)
    row_mask[[r - 1 for r in rows]] = True
    col_mask[[c - 1 for c in cols]] = True

    boundary_sum = float(dv[:, row_mask, :].sum() + dh[:, :, col_mask].sum())
    boundary_n = dv[:, row_mask, :].numel() + dh[:, :, col_mask].numel()
    inner_sum = float(dv[:, ~row_mask, :].sum() + dh[:, :, ~col_mask].sum())
    inner_n = dv[:, ~row_mask, :].numel() + dh[:, :, ~col_mask].numel()
    if boundary_n == 0:
        return 0.0, 0
    inner = inner_sum / inner_n if inner_n else 0.0
    return boundary_sum / boundary_n - inner, boundary_n


def seam_energy(z: LatentImage, grid: WindowGrid) -> float:
    """Mean squared step across window boundaries minus the same mean away from them."""
    return seam_statistics(z, grid)[0]


######################## cross-scale ########################


def cross_scale_consistency(z_s: LatentImage, z_ref: LatentImage, factor: int = 2) -> float:
    """MSE between the downsample chain of ``z_s`` and the coarse output ``z_ref``."""
    check_latent(z_s, "fine canvas")
    check_latent(z_ref, "coarse canvas")
    low = z_s
    while low.shape[1] > z_ref.shape[1]:
        low = downsample(low, factor)
    if low.shape != z_ref.shape:
        raise ContractError(
            f"canvas {tuple(z_s.shape)} does not reduce to {tuple(z_ref.shape)} by factor {factor}"
        )
    return float((low - z_ref).square().mean())


######################## layout ########################


def layout_coherence_detail(z: LatentImage, scene: SceneDescriptor, condition: int = 0) -> Tuple[float, int, int]:
    """(variance of the per-column horizon estimate, columns used, columns excluded)."""
    rows, valid = scene.estimate_structure(z, condition)
    excluded = int((~valid).sum())
    if excluded:
        logger.warning(f"layout coherence: {excluded} column(s) excluded (non-finite values)")
    used = rows[valid].to(DTYPE)
    if used.numel() == 0:
        raise ContractError("no column admits a structure estimate")
    return float(used.var(unbiased=False)), int(used.numel()), excluded


def layout_coherence(z: LatentImage, scene: SceneDescriptor, condition: int = 0) -> float:
    return layout_coherence_detail(z, scene, condition)[0]


######################## patch Frechet distance ########################


class FrechetResult(NamedTuple):
    distance: float
    regularized: bool
    num_patches: int


def _image_seed(z: LatentImage, seed: int) -> int:
    content = hashlib.sha256(z.contiguous().numpy().tobytes()).digest()
    return (seed + int.from_bytes(content[:8], "little")) % (2 ** 63)


def sample_patches(images: Sequence[LatentImage], patch: int, num_patches: int, seed: int = 0) -> torch.Tensor:
    """(N, C*p*p) patch vectors; each image's positions depend only on its content and ``seed``."""
    if not images:
        raise ContractError("patch sampling needs a nonempty image set")
    per_image = math.ceil(num_patches / len(images))
    vectors = []
    for z in images:
        check_latent(z, "image")
        channels, height, width = z.shape
        if height < patch or width < patch:
            raise ContractError(f"patch {patch} larger than image {height}x{width}")
        g = torch.Generator(device="cpu")
        g.manual_seed(_image_seed(z, seed))
        tops = torch.randint(0, height - patch + 1, (per_image,), generator=g)
        lefts = torch.randint(0, width - patch + 1, (per_image,), generator=g)
        windows = z.unfold(1, patch, 1).unfold(2, patch, 1)  # C, H', W', p, p
        picked = windows[:, tops, lefts]  # C, n, p, p
        vectors.append(picked.permute(1, 0, 2, 3).reshape(per_image, -1))
    return torch.cat(vectors)


def _psd_sqrt(m: torch.Tensor) -> torch.Tensor:
    evals, evecs = torch.linalg.eigh((m + m.T) / 2.0)
    evals = evals.clamp(min=0.0)
    return (evecs * evals.sqrt()) @ evecs.T


def frechet_distance(
    mu_a: torch.Tensor, cov_a: torch.Tensor, mu_b: torch.Tensor, cov_b: torch.Tensor, eps: float = 1e-6
) -> Tuple[float, bool]:
    """||mu_a - mu_b||^2 + tr(A + B - 2 (A B)^{1/2}); regularizes singular covariances."""
    regularized = False
    dim = cov_a.shape[0]
    min_eig = min(float(torch.linalg.eigvalsh(cov_a).min()), float(torch.linalg.eigvalsh(cov_b).min()))
    if min_eig <= 1e-8:
        eye = torch.eye(dim, dtype=cov_a.dtype)
        cov_a, cov_b = cov_a + eps * eye, cov_b + eps * eye
        regularized = True
    root_a = _psd_sqrt(cov_a)
    cross = torch.linalg.eigvalsh(root_a @ cov_b @ root_a).clamp(min=0.0).sqrt().sum()
    distance = (mu_a - mu_b).square().sum() + torch.trace(cov_a) + torch.trace(cov_b) - 2.0 * cross
    return float(distance), regularized


def frechet_patch_detail(
    set_a: Sequence[LatentImage], set_b: Sequence[LatentImage], patch: int = 8, num_patches: int = 10000, seed: int = 0
) -> FrechetResult:
    xa = sample_patches(set_a, patch, num_patches, seed)
    xb = sample_patches(set_b, patch, num_patches, seed)
    distance, regularized = frechet_distance(xa.mean(dim=0), torch.cov(xa.T), xb.mean(dim=0), torch.cov(xb.T))
    if regularized:
        logger.warning("frechet patch distance: singular covariance regularized with 1e-6 * I")
    return FrechetResult(distance, regularized, min(xa.shape[0], xb.shape[0]))


def frechet_patch_distance(
    set_a: Sequence[LatentImage], set_b: Sequence[LatentImage], patch: int = 8, num_patches: int = 10000, seed: int = 0
) -> float:
    return frechet_patch_detail(set_a, set_b, patch, num_patches, seed).distance


######################## report ########################


def evaluate_sample(
    canvas: LatentImage,
    levels: Sequence[LatentImage],
    grid: WindowGrid,
    factor: int,
    guidance_calls: int,
    scene: Optional[SceneDescriptor] = None,
    condition: int = 0,
    reference_set: Optional[Sequence[LatentImage]] = None,
    patch: int = 8,
    num_patches: int = 10000,
    seed: int = 0,
) -> MetricReport:
    report = MetricReport()
    seam, pairs = seam_statistics(canvas, grid)
    report.add("seam_energy", seam, pairs)
    report.add("cross_scale_consistency", cross_scale_consistency(canvas, levels[0], factor), levels[0].numel())
    if scene is not None:
        value, used, excluded = layout_coherence_detail(canvas, scene, condition)
        report.add("layout_coherence", value, used)
        report.add("layout_excluded_columns", excluded, canvas.shape[2])
    if reference_set:
        result = frechet_patch_detail([canvas], reference_set, patch, num_patches, seed)
        report.add("frechet_patch_distance", result.distance, result.num_patches)
        if result.regularized:
            report.notes.append("frechet_patch_distance: covariance regularized")
    report.add("guidance_invocations", guidance_calls, 1)
    return report
