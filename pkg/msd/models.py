# input: run config
# output: window denoiser (and the scene it was built from, if any)

from typing import Optional, Tuple

from msd.core import GmmDenoiserConfig, NoiseSchedule, RunConfig, SceneDenoiserConfig
from msd.denoisers import Denoiser, GmmDenoiser, make_scene_denoiser, random_gmm_prior
from msd.errors import ConfigError
from msd.scenes import SceneDescriptor, build_scene

NAMES = {
    'gmm': 'random isotropic Gaussian mixture per condition',
    'scene': 'mixture of procedural panorama template patches',
}


def get_gmm_denoiser(config: RunConfig, schedule: NoiseSchedule) -> GmmDenoiser:
    cfg: GmmDenoiserConfig = config.denoiser
    window_shape = (config.channels, config.window.height, config.window.width)
    priors = [
        random_gmm_prior(cfg.num_components, window_shape, cfg.sigma2, cfg.mean_scale, seed=cfg.seed + c)
        for c in range(cfg.num_conditions)
    ]
    return GmmDenoiser(priors, schedule)


def get_scene(config: RunConfig) -> Optional[SceneDescriptor]:
    if not isinstance(config.denoiser, SceneDenoiserConfig):
        return None
    return build_scene(config.denoiser, config.channels, config.pyramid.height, config.pyramid.width)


def get_scene_denoiser(config: RunConfig, schedule: NoiseSchedule) -> Tuple[GmmDenoiser, SceneDescriptor]:
    scene = get_scene(config)
    denoiser = make_scene_denoiser(
        scene.all_templates(),
        (config.window.height, config.window.width),
        config.denoiser.sigma2,
        schedule,
        stride=config.window.stride,
    )
    return denoiser, scene


def get_denoiser(config: RunConfig, schedule: NoiseSchedule) -> Tuple[Denoiser, Optional[SceneDescriptor]]:
    kind = config.denoiser.kind
    if kind not in NAMES:
        raise ConfigError(f"unknown denoiser kind {kind!r}", key="denoiser.kind")
    if kind == 'scene':
        return get_scene_denoiser(config, schedule)
    return get_gmm_denoiser(config, schedule), None
