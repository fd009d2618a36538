# Canonical run configurations. configs/*.json hold the same documents.

MINIMAL = {
    "pyramid": {"levels": 1, "height": 16, "width": 16},
    "schedule": {"total_steps": 10},
    "window": {"height": 16, "width": 16, "stride": 8},
    "denoiser": {"kind": "gmm", "num_components": 2, "sigma2": 0.05, "seed": 0},
    "metrics": {"patch_size": 4, "num_patches": 500, "reference_samples": 2},
    "output": {"directory": "outputs", "name": "minimal"},
    "seed": 0,
}

# 128x512 panorama over a 64x256 base: 45 + 7 windows of 64x64, stride 32.
WIDE_PANORAMA = {
    "pyramid": {"levels": 2, "downsample_factor": 2, "height": 128, "width": 512},
    "schedule": {"total_steps": 50, "beta_min": 1e-4, "beta_max": 0.2},
    "window": {"height": 64, "width": 64, "stride": 32},
    "guidance": {"omega": 10.0, "decay": "scaled_cosine", "tau_fraction": 0.7, "loss_reduction": "mean"},
    "denoiser": {"kind": "gmm", "num_components": 3, "sigma2": 0.05, "seed": 0},
    "output": {"directory": "outputs", "name": "wide_panorama"},
    "seed": 0,
}

# 64x256 horizon scene over a 32x128 base: 45 + 7 windows of 32x32, stride 16.
HORIZON_SCENE = {
    "pyramid": {"levels": 2, "downsample_factor": 2, "height": 64, "width": 256},
    "schedule": {"total_steps": 50, "beta_min": 1e-4, "beta_max": 0.2},
    "window": {"height": 32, "width": 32, "stride": 16},
    "guidance": {"omega": 40.0, "decay": "scaled_cosine", "tau_fraction": 0.7, "loss_reduction": "sum"},
    "denoiser": {
        "kind": "scene",
        "family": "horizon",
        "horizon_fractions": [0.375, 0.5, 0.625],
        "classes": [{"sky_value": 1.0, "ground_value": -1.0}, {"sky_value": -1.0, "ground_value": 1.0}],
        "sigma2": 0.01,
    },
    "output": {"directory": "outputs", "name": "horizon_scene"},
    "seed": 0,
}

PRESETS = {
    "minimal": MINIMAL,
    "wide_panorama": WIDE_PANORAMA,
    "horizon_scene": HORIZON_SCENE,
}
