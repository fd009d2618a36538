"""The window denoiser interface and the analytic Gaussian-mixture denoisers.

For a mixture prior on clean windows and the forward process
x_t = sqrt(a) x_0 + sqrt(1 - a) e, the optimal noise predictor is
e*(x, t) = (x - sqrt(a) E[x_0 | x]) / sqrt(1 - a); the posterior mean and its
Jacobian are available in closed form, so the gradient needed by multi-scale
guidance is exact.
"""
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch

from msd.core import DTYPE, LatentImage, NoiseSchedule
from msd.errors import ConfigError, ContractError
from msd.tiling import build_grid, crop


class Denoiser(ABC):
    """Phi's noise model: window -> predicted noise, plus its transpose-Jacobian product."""

    schedule: NoiseSchedule

    @property
    @abstractmethod
    def num_conditions(self) -> int:
        ...

    @property
    def supports_vjp(self) -> bool:
        return True

    @abstractmethod
    def predict_noise(self, x: LatentImage, t: int, condition: int) -> LatentImage:
        ...

    def vjp(self, x: LatentImage, t: int, condition: int, cotangent: LatentImage) -> LatentImage:
        raise NotImplementedError(f"{self.__class__.__name__} has no vector-Jacobian product")

    def _check(self, x: LatentImage, t: int, condition: int) -> float:
        if not 1 <= t <= self.schedule.total_steps:
            raise ContractError(f"denoiser called at timestep {t}; valid range is 1..{self.schedule.total_steps}")
        if not 0 <= condition < self.num_conditions:
            raise ContractError(f"condition {condition} outside 0..{self.num_conditions - 1}")
        return self.schedule.at(t)


@dataclass(frozen=True)
class GmmPrior:
    """K-component isotropic Gaussian mixture over window-shaped images."""

    weights: torch.Tensor  # (K,)
    means: torch.Tensor  # (K, C, h, w)
    variances: torch.Tensor  # (K,)

    def __post_init__(self):
        k = self.means.shape[0]
        if self.weights.shape != (k,) or self.variances.shape != (k,):
            raise ConfigError(f"mixture with {k} means needs {k} weights and {k} variances")
        if bool((self.weights <= 0).any()) or abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if bool((self.variances <= 0).any()):
            raise ConfigError("mixture variances must be positive")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def window_shape(self) -> Tuple[int, int, int]:
        return tuple(self.means.shape[1:])

    @classmethod
    def uniform(cls, means: torch.Tensor, variance: float) -> "GmmPrior":
        k = means.shape[0]
        return cls(
            weights=torch.full((k,), 1.0 / k, dtype=DTYPE),
            means=means.to(DTYPE),
            variances=torch.full((k,), float(variance), dtype=DTYPE),
        )


@dataclass(frozen=True)
class GmmPosterior:
    responsibilities: torch.Tensor  # (K,)
    diff: torch.Tensor  # (K, d): x - sqrt(a) mu_k
    marginal_var: torch.Tensor  # (K,): a sigma_k^2 + 1 - a
    gain: torch.Tensor  # (K,): sqrt(a) sigma_k^2 / marginal_var
    component_means: torch.Tensor  # (K, d): per-component posterior means
    mean: torch.Tensor  # (d,): E[x_0 | x]


def gmm_posterior(x: LatentImage, alpha_bar: float, prior: GmmPrior) -> GmmPosterior:
    if tuple(x.shape) != prior.window_shape:
        raise ContractError(f"window shape {tuple(x.shape)} does not match prior {prior.window_shape}")
    s = math.sqrt(alpha_bar)
    k = prior.num_components
    xf = x.reshape(-1)
    mu = prior.means.reshape(k, -1)
    d = xf.numel()
    var = alpha_bar * prior.variances + (1.0 - alpha_bar)
    diff = xf.unsqueeze(0) - s * mu
    logits = torch.log(prior.weights) - 0.5 * d * torch.log(var) - 0.5 * diff.square().sum(dim=1) / var
    resp = torch.softmax(logits, dim=0)
    gain = s * prior.variances / var
    component_means = mu + gain.unsqueeze(1) * diff
    mean = (resp.unsqueeze(1) * component_means).sum(dim=0)
    return GmmPosterior(resp, diff, var, gain, component_means, mean)


def gmm_predict_noise(x: LatentImage, alpha_bar: float, prior: GmmPrior) -> LatentImage:
    if alpha_bar >= 1.0:
        raise ContractError("noise prediction needs alpha_bar < 1 (t >= 1)")
    post = gmm_posterior(x, alpha_bar, prior)
    eps = (x.reshape(-1) - math.sqrt(alpha_bar) * post.mean) / math.sqrt(1.0 - alpha_bar)
    return eps.reshape(x.shape)


def gmm_vjp(x: LatentImage, alpha_bar: float, prior: GmmPrior, cotangent: LatentImage) -> LatentImage:
    """J^T c for J the Jacobian of ``gmm_predict_noise`` at x, responsibility terms included."""
    if alpha_bar >= 1.0:
        raise ContractError("noise prediction needs alpha_bar < 1 (t >= 1)")
    if cotangent.shape != x.shape:
        raise ContractError(f"cotangent shape {tuple(cotangent.shape)} does not match {tuple(x.shape)}")
    post = gmm_posterior(x, alpha_bar, prior)
    c = cotangent.reshape(-1)
    r = post.responsibilities
    # d(logit_k)/dx = -(x - sqrt(a) mu_k) / v_k
    score = -post.diff / post.marginal_var.unsqueeze(1)
    proj = post.component_means @ c
    mean_jt_c = (r * post.gain).sum() * c + ((r * (proj - (r * proj).sum())).unsqueeze(1) * score).sum(dim=0)
    out = (c - math.sqrt(alpha_bar) * mean_jt_c) / math.sqrt(1.0 - alpha_bar)
    return out.reshape(x.shape)


class GmmDenoiser(Denoiser):
    """Exact noise predictor for one Gaussian-mixture prior per condition."""

    def __init__(self, priors: Sequence[GmmPrior], schedule: NoiseSchedule):
        if not priors:
            raise ConfigError("at least one mixture prior is required", key="denoiser")
        shapes = {p.window_shape for p in priors}
        if len(shapes) != 1:
            raise ConfigError(f"all priors must share one window shape, got {sorted(shapes)}", key="denoiser")
        self.priors = list(priors)
        self.schedule = schedule

    @property
    def num_conditions(self) -> int:
        return len(self.priors)

    @property
    def window_shape(self) -> Tuple[int, int, int]:
        return self.priors[0].window_shape

    def posterior_mean(self, x: LatentImage, t: int, condition: int) -> LatentImage:
        a = self._check(x, t, condition)
        return gmm_posterior(x, a, self.priors[condition]).mean.reshape(x.shape)

    def predict_noise(self, x: LatentImage, t: int, condition: int) -> LatentImage:
        a = self._check(x, t, condition)
        return gmm_predict_noise(x, a, self.priors[condition])

    def vjp(self, x: LatentImage, t: int, condition: int, cotangent: LatentImage) -> LatentImage:
        a = self._check(x, t, condition)
        return gmm_vjp(x, a, self.priors[condition], cotangent)


def random_gmm_prior(
    num_components: int,
    window_shape: Tuple[int, int, int],
    variance: float,
    mean_scale: float = 1.0,
    seed: int = 0,
) -> GmmPrior:
    generator = torch.Generator(device="cpu")
    generator.manual_seed(seed)
    means = mean_scale * torch.randn(num_components, *window_shape, generator=generator, dtype=DTYPE)
    return GmmPrior.uniform(means, variance)


def template_patches(template: LatentImage, window: Tuple[int, int], stride: int) -> torch.Tensor:
    """All windows of a template on the tiling grid, stacked as (N, C, h, w)."""
    grid = build_grid(template.shape[1], template.shape[2], window[0], window[1], stride)
    return torch.stack([crop(template, win) for win in grid])


def make_scene_denoiser(
    templates: Sequence[Sequence[LatentImage]],
    window: Tuple[int, int],
    variance: float,
    schedule: NoiseSchedule,
    stride: Optional[int] = None,
) -> GmmDenoiser:
    """Mixture denoiser whose components are the distinct template patches of each condition.

    Args:
        templates: per condition, a list of full-panorama template images.
        window: (h, w) window shape.
        variance: shared isotropic component variance.
        schedule: noise schedule the denoiser is evaluated under.
        stride: patch grid stride (defaults to half the window height).
    """
    if not templates or any(len(per_condition) == 0 for per_condition in templates):
        raise ConfigError("scene denoiser needs at least one template per condition", key="denoiser")
    stride = stride or max(1, window[0] // 2)
    priors = []
    for per_condition in templates:
        patches = torch.cat([template_patches(t.to(DTYPE), window, stride) for t in per_condition])
        flat = torch.unique(patches.reshape(patches.shape[0], -1), dim=0)
        priors.append(GmmPrior.uniform(flat.reshape(-1, *patches.shape[1:]), variance))
    return GmmDenoiser(priors, schedule)
