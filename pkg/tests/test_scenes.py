import pytest
import torch

from msd.core import DTYPE, SceneDenoiserConfig, parse_config
from msd.errors import ContractError
from msd.metrics import layout_coherence, layout_coherence_detail
from msd.models import get_denoiser
from msd.sampling import sample
from msd.scenes import SceneDescriptor, build_scene


def _scene(family="horizon", **kwargs):
    return build_scene(SceneDenoiserConfig(family=family, **kwargs), channels=1, height=64, width=256)


def test_horizon_rows_from_fractions():
    assert _scene().horizon_rows == (24, 32, 40)
    assert _scene(horizon_fractions=[0.5, 0.5]).horizon_rows == (32,)


def test_horizon_template_values():
    scene = _scene()
    image = scene.render(32, condition=0)
    assert image.shape == (1, 64, 256) and image.dtype == DTYPE
    assert bool((image[:, :32] == 1.0).all()) and bool((image[:, 32:] == -1.0).all())
    flipped = scene.render(32, condition=1)
    assert torch.equal(flipped, -image)


def test_gradient_sky_brightens_toward_horizon():
    image = _scene("gradient_sky").render(32)
    column = image[0, :32, 0]
    assert bool((column[1:] > column[:-1]).all())
    assert float(column[-1]) == pytest.approx(1.0)
    assert bool((image[0, 32:] == -1.0).all())


def test_city_ground_is_striped():
    image = _scene("city", stripe_period=8, stripe_amplitude=0.5).render(32)
    row = image[0, 40]
    assert torch.equal(row[:8], torch.tensor([-0.5] * 4 + [-1.5] * 4, dtype=DTYPE))
    assert torch.equal(row[8:16], row[:8])
    assert bool((image[0, :32] == 1.0).all())


def test_render_rejects_bad_arguments():
    scene = _scene()
    with pytest.raises(ContractError):
        scene.render(65)
    with pytest.raises(ContractError):
        scene.render(10, condition=2)


def test_templates_per_condition():
    scene = _scene()
    assert scene.num_conditions == 2
    assert [len(t) for t in scene.all_templates()] == [3, 3]


@pytest.mark.parametrize("family", ["horizon", "gradient_sky", "city"])
def test_exact_template_is_perfectly_coherent(family):
    scene = _scene(family)
    rows, valid = scene.estimate_structure(scene.render(40))
    assert bool(valid.all())
    assert bool((rows == 40).all())
    assert layout_coherence(scene.render(40), scene) == 0.0


def test_split_horizon_variance():
    scene = _scene()
    image = scene.render(32).clone()
    image[:, :, 128:] = scene.render(40)[:, :, 128:]
    assert layout_coherence(image, scene) == pytest.approx(16.0)


def test_non_finite_columns_are_excluded():
    scene = _scene()
    image = scene.render(24).clone()
    image[0, 5, 7] = float("nan")
    image[0, 9, 100] = float("inf")
    value, used, excluded = layout_coherence_detail(image, scene)
    assert (value, used, excluded) == (0.0, 254, 2)


def test_estimate_structure_checks_shape():
    scene = SceneDescriptor("horizon", 1, 8, 8, ((1.0, -1.0),), (4,))
    with pytest.raises(ContractError):
        scene.estimate_structure(torch.zeros(1, 8, 9, dtype=DTYPE))


def _class_distance(z, scene, condition):
    return min(float((z - template).square().mean()) for template in scene.templates(condition))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_condition_selects_the_scene_class(seed):
    document = {
        "pyramid": {"height": 16, "width": 64},
        "schedule": {"total_steps": 20},
        "window": {"height": 16, "width": 16, "stride": 8},
        "denoiser": {
            "kind": "scene",
            "horizon_fractions": [0.25, 0.5, 0.75],
            "classes": [{"sky_value": 1.0, "ground_value": -1.0}, {"sky_value": -1.0, "ground_value": 1.0}],
            "sigma2": 0.01,
        },
        "seed": seed,
    }
    for condition in (0, 1):
        config = parse_config({**document, "condition": condition})
        denoiser, scene = get_denoiser(config, config.build_schedule())
        z, _ = sample(config, denoiser=denoiser)
        assert _class_distance(z, scene, condition) < _class_distance(z, scene, 1 - condition)
