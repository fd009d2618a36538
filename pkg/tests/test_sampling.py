import json
import math

import pytest
import torch

from msd.core import DTYPE, GuidanceConfig, LatentImage, build_schedule, parse_config
from msd.denoisers import Denoiser, GmmDenoiser, GmmPrior, random_gmm_prior
from msd.errors import ConfigError, ContractError, NumericalError
from msd.models import get_denoiser
from msd.sampling import (
    MultiScaleSampler,
    ddim_step,
    guidance_gradient,
    guidance_loss,
    ms_guidance,
    msd_one_step,
    multi_diffusion_step,
    phi_step,
    phi_vjp,
    reference_windows,
    sample,
)
from msd.tiling import build_grid, crop, make_weights
from presets.default_configs import HORIZON_SCENE, WIDE_PANORAMA
from tools.gradient_check import central_difference_gradient, relative_error


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


class NanDenoiser(Denoiser):
    """Zero noise for t > ``from_t``, NaN from there on (always NaN without ``from_t``)."""

    def __init__(self, schedule, from_t=None):
        self.schedule = schedule
        self.from_t = from_t

    @property
    def num_conditions(self) -> int:
        return 1

    def predict_noise(self, x: LatentImage, t: int, condition: int) -> LatentImage:
        if self.from_t is not None and t > self.from_t:
            return torch.zeros_like(x)
        return torch.full_like(x, float("nan"))


class NoVjpDenoiser(Denoiser):
    def __init__(self, inner: GmmDenoiser):
        self.inner = inner
        self.schedule = inner.schedule

    @property
    def num_conditions(self) -> int:
        return self.inner.num_conditions

    @property
    def supports_vjp(self) -> bool:
        return False

    def predict_noise(self, x, t, condition):
        return self.inner.predict_noise(x, t, condition)


def test_ddim_step_with_zero_noise_rescales(schedule):
    x = _randn(1, 4, 4)
    out = ddim_step(x, torch.zeros_like(x), 5, schedule)
    assert torch.allclose(out, math.sqrt(schedule.at(4) / schedule.at(5)) * x, atol=1e-12)


def test_ddim_step_contracts(schedule):
    x = _randn(1, 4, 4)
    with pytest.raises(ContractError):
        ddim_step(x, torch.zeros(1, 4, 5, dtype=DTYPE), 5, schedule)
    with pytest.raises(ContractError):
        ddim_step(x, torch.zeros_like(x), 0, schedule)


def test_last_step_returns_posterior_mean(tiny_denoiser):
    x = _randn(1, 4, 4)
    assert torch.allclose(phi_step(x, 1, 0, tiny_denoiser), tiny_denoiser.posterior_mean(x, 1, 0), atol=1e-10)


def test_repeated_phi_step_converges_to_a_point_mass_prior():
    schedule = build_schedule(50, 1e-4, 0.2)
    mu = _randn(1, 1, 4, 4, seed=3)
    denoiser = GmmDenoiser([GmmPrior.uniform(mu, 1e-14)], schedule)
    x = _randn(1, 4, 4, seed=4)
    for t in range(50, 0, -1):
        x = phi_step(x, t, 0, denoiser)
    assert float((x - mu[0]).abs().max()) <= 1e-6


@pytest.mark.parametrize("t", [10, 5, 1])
def test_phi_vjp_matches_finite_differences(tiny_denoiser, t):
    x, c = _randn(1, 4, 4, seed=1), _randn(1, 4, 4, seed=2)
    analytic = phi_vjp(x, t, 0, tiny_denoiser, c)
    numeric = central_difference_gradient(lambda v: float((phi_step(v, t, 0, tiny_denoiser) * c).sum()), x)
    assert relative_error(analytic, numeric) <= 1e-4


def test_stop_gradient_keeps_only_the_direct_term(tiny_denoiser, schedule):
    c = _randn(1, 4, 4, seed=2)
    out = phi_vjp(_randn(1, 4, 4), 6, 0, tiny_denoiser, c, stop_gradient=True)
    assert torch.allclose(out, math.sqrt(schedule.at(5) / schedule.at(6)) * c, atol=1e-12)


@pytest.mark.parametrize("reduction", ["sum", "mean"])
@pytest.mark.parametrize("k", [1, 2, 3])
def test_guidance_gradient_matches_finite_differences(schedule, reduction, k):
    denoiser = GmmDenoiser([random_gmm_prior(k, (1, 8, 8), 0.05, seed=k)], schedule)
    guidance = GuidanceConfig(loss_reduction=reduction)
    for t in (10, 5, 8):
        x, target = _randn(1, 8, 8, seed=t), _randn(1, 4, 4, seed=t + 1)
        analytic = guidance_gradient(x, target, t, 0, denoiser, guidance)
        numeric = central_difference_gradient(
            lambda v: guidance_loss(v, target, t, 0, denoiser, reduction=reduction), x
        )
        assert relative_error(analytic, numeric) <= 1e-4


def test_finite_difference_mode_agrees_with_exact(schedule):
    denoiser = GmmDenoiser([random_gmm_prior(2, (1, 4, 4), 0.1, seed=0)], schedule)
    x, target = _randn(1, 4, 4), _randn(1, 2, 2, seed=1)
    exact = guidance_gradient(x, target, 7, 0, denoiser, GuidanceConfig())
    fd = guidance_gradient(x, target, 7, 0, denoiser, GuidanceConfig(grad_mode="finite_difference"))
    assert relative_error(exact, fd) <= 1e-4
    no_vjp = NoVjpDenoiser(denoiser)
    with pytest.raises(ConfigError):
        guidance_gradient(x, target, 7, 0, no_vjp, GuidanceConfig())
    assert relative_error(guidance_gradient(x, target, 7, 0, no_vjp, GuidanceConfig(grad_mode="finite_difference")), exact) <= 1e-4


def test_ms_guidance_without_weight_is_identity(tiny_denoiser):
    x = _randn(1, 4, 4)
    assert ms_guidance(x, _randn(1, 2, 2), 10, 0, tiny_denoiser, GuidanceConfig(omega=0.0)) is x
    with pytest.raises(ContractError):
        ms_guidance(x, _randn(1, 4, 4), 10, 0, tiny_denoiser, GuidanceConfig())


def test_small_guidance_step_does_not_increase_the_loss(tiny_denoiser, rng):
    guidance = GuidanceConfig(omega=0.01, decay="none")
    trials, held = 500, 0
    for i in range(trials):
        t = 1 + i % 10
        x = torch.randn(1, 4, 4, generator=rng, dtype=DTYPE)
        target = torch.randn(1, 2, 2, generator=rng, dtype=DTYPE)
        guided = ms_guidance(x, target, t, i % 2, tiny_denoiser, guidance)
        held += guidance_loss(guided, target, t, i % 2, tiny_denoiser) <= guidance_loss(x, target, t, i % 2, tiny_denoiser)
    assert held >= 0.95 * trials


def test_single_window_multi_diffusion_is_phi(tiny_denoiser):
    grid = build_grid(4, 4, 4, 4, 4)
    z = _randn(1, 4, 4)
    merged = multi_diffusion_step(z, grid, make_weights(grid), 7, 1, tiny_denoiser)
    assert torch.equal(merged, phi_step(z, 7, 1, tiny_denoiser))


def test_window_counts_at_wide_panorama():
    config = parse_config(WIDE_PANORAMA)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    with MultiScaleSampler(config, denoiser) as sampler:
        assert sampler.window_counts() == {1: 7, 2: 45}
        assert sum(sampler.window_counts().values()) == 52


def test_horizon_scene_window_counts():
    config = parse_config(HORIZON_SCENE)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    with MultiScaleSampler(config, denoiser) as sampler:
        assert sampler.window_counts() == {1: 7, 2: 45}


def test_zero_weight_reduces_to_multi_diffusion(two_level):
    two_level["guidance"]["omega"] = 0.0
    config = parse_config(two_level)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    grid = build_grid(16, 32, 8, 8, 4, level=2)
    for seed in range(3):
        z = _randn(1, 16, 32, seed=seed)
        for t in (10, 4):
            expected = multi_diffusion_step(z, grid, make_weights(grid), t, 0, denoiser)
            assert torch.equal(msd_one_step(z, t, 0, denoiser, config), expected)


def test_guidance_changes_the_step(two_level):
    config = parse_config(two_level)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    grid = build_grid(16, 32, 8, 8, 4, level=2)
    z = _randn(1, 16, 32)
    plain = multi_diffusion_step(z, grid, make_weights(grid), 10, 0, denoiser)
    assert not torch.allclose(msd_one_step(z, 10, 0, denoiser, config), plain)


def test_run_traces_every_step(two_level, tmp_path):
    config = parse_config(two_level)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    trace_path = tmp_path / "trace.jsonl"
    with MultiScaleSampler(config, denoiser) as sampler:
        result = sampler.run(trace_path=str(trace_path))
    assert result.canvas.shape == (1, 16, 32)
    assert [lvl.shape for lvl in result.levels] == [(1, 8, 16), (1, 16, 32)]
    assert torch.equal(result.levels[-1], result.canvas)
    assert [tr.t for tr in result.traces] == list(range(10, 0, -1))
    # tau = 0.7 of 10 steps: t = 8, 9, 10 are guided, 21 windows each
    assert [tr.guidance_calls for tr in result.traces] == [21] * 3 + [0] * 7
    assert set(result.traces[0].loss_md) == {1, 2} and set(result.traces[0].loss_ms) == {2}
    assert len(trace_path.read_text(encoding="utf-8").splitlines()) == 10


@pytest.mark.parametrize("tau, guided_steps", [(0.0, 10), (0.7, 3), (1.0, 0)])
def test_tau_limits_guided_steps(two_level, tau, guided_steps):
    two_level["guidance"]["tau_fraction"] = tau
    config = parse_config(two_level)
    _, traces = sample(config)
    assert sum(tr.guidance_calls for tr in traces) == guided_steps * 21


def test_fifty_step_run_guides_fifteen_steps():
    config = parse_config({
        "pyramid": {"levels": 2, "height": 16, "width": 16},
        "schedule": {"total_steps": 50},
        "window": {"height": 8, "width": 8, "stride": 8},
        "guidance": {"tau_fraction": 0.7},
    })
    _, traces = sample(config)
    guided = [tr.t for tr in traces if tr.guidance_calls > 0]
    assert guided == list(range(50, 35, -1))
    assert all(tr.guidance_calls == 4 for tr in traces if tr.t in guided)


def test_sampling_is_deterministic(two_level):
    config = parse_config(two_level)
    a, _ = sample(config)
    b, _ = sample(config)
    assert torch.equal(a, b)


def test_worker_pool_does_not_change_the_result(two_level):
    serial, _ = sample(parse_config(two_level))
    two_level["workers"] = 4
    pooled, _ = sample(parse_config(two_level))
    assert torch.equal(serial, pooled)


def test_non_finite_canvas_aborts(schedule):
    config = parse_config({"pyramid": {"height": 4, "width": 8}, "schedule": {"total_steps": 10},
                           "window": {"height": 4, "width": 4, "stride": 4}})
    with MultiScaleSampler(config, NanDenoiser(schedule)) as sampler:
        with pytest.raises(NumericalError) as err:
            sampler.run()
    assert (err.value.level, err.value.timestep) == (1, 10)


def test_aborted_run_keeps_completed_trace_steps(schedule, tmp_path):
    config = parse_config({"pyramid": {"height": 4, "width": 8}, "schedule": {"total_steps": 10},
                           "window": {"height": 4, "width": 4, "stride": 4}})
    trace_path = tmp_path / "trace.jsonl"
    with MultiScaleSampler(config, NanDenoiser(schedule, from_t=6)) as sampler:
        with pytest.raises(NumericalError) as err:
            sampler.run(trace_path=str(trace_path))
    assert err.value.timestep == 6
    lines = trace_path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["t"] for line in lines] == [10, 9, 8, 7]


def test_gaussian_weights_and_renormalized_chain_run(two_level):
    two_level["window"]["weighting"] = "gaussian"
    two_level["pyramid"]["renormalize_variance"] = True
    z0, traces = sample(parse_config(two_level))
    assert bool(torch.isfinite(z0).all()) and len(traces) == 10


def test_downsample_chain_renormalization(two_level):
    two_level["pyramid"]["renormalize_variance"] = True
    config = parse_config(two_level)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    z = _randn(1, 16, 32)
    with MultiScaleSampler(config, denoiser) as sampler:
        low, top = sampler.downsample_chain(z)
    assert top is z
    assert torch.allclose(low, 2.0 * z.reshape(1, 8, 2, 16, 2).mean(dim=(2, 4)), atol=1e-14)


def test_reference_windows_are_window_sized(two_level):
    config = parse_config(two_level)
    denoiser, _ = get_denoiser(config, config.build_schedule())
    refs = reference_windows(config, denoiser)
    assert len(refs) == 2
    assert all(r.shape == (1, 8, 8) for r in refs)
    assert not torch.equal(refs[0], refs[1])


def test_non_overlapping_scene_sampling_lands_on_template_patches():
    config = parse_config({
        "pyramid": {"height": 16, "width": 64},
        "schedule": {"total_steps": 50},
        "window": {"height": 16, "width": 16, "stride": 16},
        "denoiser": {"kind": "scene", "horizon_fractions": [0.25, 0.75], "classes": [{"sky_value": 1.0, "ground_value": -1.0}], "sigma2": 1e-4},
    })
    denoiser, scene = get_denoiser(config, config.build_schedule())
    dictionary = denoiser.priors[0].means
    assert dictionary.shape[0] == 2
    z0, _ = sample(config, denoiser=denoiser)
    for win in build_grid(16, 64, 16, 16, 16):
        distances = (dictionary - crop(z0, win).unsqueeze(0)).abs().amax(dim=(1, 2, 3))
        assert float(distances.min()) < 0.25
