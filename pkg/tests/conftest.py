import json
import os

import hypothesis
import pytest
import torch

from msd.core import build_schedule
from msd.denoisers import GmmDenoiser, random_gmm_prior

hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

# 16x32 level-S canvas over an 8x16 base; 21 + 3 windows of 8x8
TWO_LEVEL = {
    "pyramid": {"levels": 2, "height": 16, "width": 32},
    "schedule": {"total_steps": 10},
    "window": {"height": 8, "width": 8, "stride": 4},
    "guidance": {"omega": 1.0},
    "denoiser": {"kind": "gmm", "num_components": 2, "sigma2": 0.05, "seed": 3},
    "metrics": {"patch_size": 4, "num_patches": 400, "reference_samples": 2},
    "seed": 0,
}


@pytest.fixture
def schedule():
    return build_schedule(10, 1e-4, 0.2)


@pytest.fixture
def tiny_denoiser(schedule):
    priors = [random_gmm_prior(2, (1, 4, 4), 0.05, seed=c) for c in range(2)]
    return GmmDenoiser(priors, schedule)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def write_config(tmp_path):
    def _write(document, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def two_level():
    return json.loads(json.dumps(TWO_LEVEL))
