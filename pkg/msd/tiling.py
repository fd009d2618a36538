"""Window geometry, crop/uncrop algebra and the weighted-average merge.

Windows are generated row-major and every accumulation runs in window-index
order, so merged canvases are bitwise reproducible.
"""
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import torch

from msd.core import DTYPE, LatentImage, check_latent
from msd.errors import ConfigError, ContractError, CoverageError


@dataclass(frozen=True)
class WindowSpec:
    top: int
    left: int
    height: int
    width: int
    level: int = 1

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def region(self) -> Tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    def fits(self, height: int, width: int) -> bool:
        return self.top >= 0 and self.left >= 0 and self.bottom <= height and self.right <= width


@dataclass(frozen=True)
class WindowGrid:
    windows: List[WindowSpec]
    coverage: torch.Tensor  # H x W window counts
    height: int
    width: int
    level: int = 1

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self) -> Iterator[WindowSpec]:
        return iter(self.windows)

    def __getitem__(self, i: int) -> WindowSpec:
        return self.windows[i]


def _offsets(length: int, size: int, stride: int, boundary_aligned: bool, axis: str) -> List[int]:
    offsets = list(range(0, length - size + 1, stride))
    if offsets[-1] != length - size:
        if not boundary_aligned:
            raise ConfigError(
                f"stride {stride} does not tile {axis} {length} with window {size}", key="window.stride"
            )
        offsets.append(length - size)
    return offsets


def build_grid(
    height: int,
    width: int,
    window_height: int,
    window_width: int,
    stride: int,
    level: int = 1,
    boundary_aligned: bool = True,
) -> WindowGrid:
    """Row-major grid of windows covering an ``height x width`` canvas.

    Offsets are multiples of ``stride``; when the last offset misses the border
    a boundary-aligned row/column is appended (if allowed).
    """
    if window_height > height or window_width > width:
        raise ConfigError(
            f"window {window_height}x{window_width} larger than canvas {height}x{width}", key="window"
        )
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}", key="window.stride")
    tops = _offsets(height, window_height, stride, boundary_aligned, "height")
    lefts = _offsets(width, window_width, stride, boundary_aligned, "width")
    windows = [WindowSpec(top, left, window_height, window_width, level) for top in tops for left in lefts]
    coverage = torch.zeros(height, width, dtype=torch.int64)
    for win in windows:
        coverage[win.region()] += 1
    return WindowGrid(windows=windows, coverage=coverage, height=height, width=width, level=level)


class WeightMatrix:
    """Per-window nonnegative h x w weights W_i."""

    def __init__(self, weights: Sequence[torch.Tensor]):
        for i, w in enumerate(weights):
            if w.dim() != 2:
                raise ContractError(f"weight {i} must be h x w, got shape {tuple(w.shape)}")
            if bool((w < 0).any()) or not bool((w > 0).any()):
                raise ContractError(f"weight {i} must be nonnegative with a positive entry")
        self.weights = list(weights)

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.weights[i]

    def scaled(self, factor: float) -> "WeightMatrix":
        return WeightMatrix([w * factor for w in self.weights])

    @classmethod
    def uniform(cls, grid: WindowGrid) -> "WeightMatrix":
        shared = {}
        weights = []
        for win in grid:
            key = (win.height, win.width)
            if key not in shared:
                shared[key] = torch.ones(win.height, win.width, dtype=DTYPE)
            weights.append(shared[key])
        return cls(weights)

    @classmethod
    def gaussian(cls, grid: WindowGrid, edge_weight: float = 0.1) -> "WeightMatrix":
        """Separable taper, 1 at the window center and ``edge_weight`` at each border."""
        shared = {}
        weights = []
        for win in grid:
            key = (win.height, win.width)
            if key not in shared:
                shared[key] = _gaussian_taper(win.height, win.width, edge_weight)
            weights.append(shared[key])
        return cls(weights)


def _gaussian_taper(height: int, width: int, edge_weight: float) -> torch.Tensor:
    def axis(n: int) -> torch.Tensor:
        if n == 1:
            return torch.ones(1, dtype=DTYPE)
        pos = torch.arange(n, dtype=DTYPE)
        center = (n - 1) / 2.0
        rel = (pos - center) / center
        return torch.exp(rel.square() * torch.log(torch.tensor(edge_weight, dtype=DTYPE)))

    return torch.outer(axis(height), axis(width))


def make_weights(grid: WindowGrid, weighting: str = "uniform", edge_weight: float = 0.1) -> WeightMatrix:
    if weighting == "uniform":
        return WeightMatrix.uniform(grid)
    if weighting == "gaussian":
        return WeightMatrix.gaussian(grid, edge_weight)
    raise ConfigError(f"unknown weighting {weighting!r}", key="window.weighting")


def crop(z: LatentImage, win: WindowSpec) -> LatentImage:
    check_latent(z, "canvas")
    if not win.fits(z.shape[1], z.shape[2]):
        raise ContractError(f"window {win} does not fit canvas {tuple(z.shape[1:])}")
    rows, cols = win.region()
    return z[:, rows, cols].clone()


def uncrop_accumulate(
    acc: LatentImage,
    weight_acc: torch.Tensor,
    patch: LatentImage,
    weight: torch.Tensor,
    win: WindowSpec,
) -> None:
    """acc += W_i * F_i^-1(patch); weight_acc += F_i^-1(W_i). In place."""
    if patch.dim() != 3 or tuple(patch.shape[1:]) != (win.height, win.width):
        raise ContractError(f"patch shape {tuple(patch.shape)} does not match window {win}")
    if patch.shape[0] != acc.shape[0]:
        raise ContractError(f"patch has {patch.shape[0]} channels, canvas has {acc.shape[0]}")
    if tuple(weight.shape) != (win.height, win.width):
        raise ContractError(f"weight shape {tuple(weight.shape)} does not match window {win}")
    if not win.fits(acc.shape[1], acc.shape[2]):
        raise ContractError(f"window {win} does not fit canvas {tuple(acc.shape[1:])}")
    rows, cols = win.region()
    acc[:, rows, cols] += weight * patch
    weight_acc[rows, cols] += weight


def md_merge(
    patches: Sequence[Tuple[WindowSpec, LatentImage]],
    weights: WeightMatrix,
    canvas: Tuple[int, int, int],
) -> LatentImage:
    """Weighted average of the patches, the minimizer of the MultiDiffusion objective.

    Args:
        patches: (window, patch) pairs in window-index order.
        weights: one weight matrix per patch, same order.
        canvas: (height, width, channels) of the output.
    """
    height, width, channels = canvas
    if len(weights) != len(patches):
        raise ContractError(f"{len(patches)} patches but {len(weights)} weight matrices")
    acc = torch.zeros(channels, height, width, dtype=DTYPE)
    weight_acc = torch.zeros(height, width, dtype=DTYPE)
    for i, (win, patch) in enumerate(patches):
        uncrop_accumulate(acc, weight_acc, patch, weights[i], win)
    uncovered = (weight_acc <= 0).nonzero()
    if uncovered.numel():
        row, col = uncovered[0].tolist()
        raise CoverageError((row, col), level=patches[0][0].level if patches else None)
    return acc / weight_acc


def md_objective(
    z: LatentImage, patches: Sequence[Tuple[WindowSpec, LatentImage]], weights: WeightMatrix
) -> float:
    """sum_i W_i * ||F_i(z) - patch_i||^2."""
    total = torch.zeros((), dtype=DTYPE)
    for i, (win, patch) in enumerate(patches):
        rows, cols = win.region()
        total = total + (weights[i] * (z[:, rows, cols] - patch).square()).sum()
    return float(total)


def md_objective_grad(
    z: LatentImage, patches: Sequence[Tuple[WindowSpec, LatentImage]], weights: WeightMatrix
) -> LatentImage:
    grad = torch.zeros_like(z)
    for i, (win, patch) in enumerate(patches):
        rows, cols = win.region()
        grad[:, rows, cols] += 2.0 * weights[i] * (z[:, rows, cols] - patch)
    return grad


def stitch_overwrite(
    patches: Sequence[Tuple[WindowSpec, LatentImage]], canvas: Tuple[int, int, int]
) -> LatentImage:
    """Paste patches in order, later windows overwriting earlier ones (no averaging)."""
    height, width, channels = canvas
    out = torch.zeros(channels, height, width, dtype=DTYPE)
    for win, patch in patches:
        rows, cols = win.region()
        out[:, rows, cols] = patch
    return out


def lowres_window(win: WindowSpec, factor: int) -> WindowSpec:
    """The region F_i' of a level-s window on the level-(s-1) canvas."""
    if any(v % factor for v in (win.top, win.left, win.height, win.width)):
        raise ConfigError(f"window {win} is not aligned to downsample factor {factor}", key="window")
    return WindowSpec(
        top=win.top // factor,
        left=win.left // factor,
        height=win.height // factor,
        width=win.width // factor,
        level=win.level - 1,
    )


def downsample(z: LatentImage, factor: int) -> LatentImage:
    """factor x factor mean pooling per channel."""
    channels, height, width = z.shape
    if height % factor or width % factor:
        raise ContractError(f"canvas {height}x{width} is not divisible by factor {factor}")
    return z.reshape(channels, height // factor, factor, width // factor, factor).mean(dim=(2, 4))


def downsample_transpose(r: LatentImage, factor: int) -> LatentImage:
    """Adjoint of ``downsample``: replicate each pixel over its block, scaled by 1/factor^2."""
    return r.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2) / float(factor * factor)
