import colorsys
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from diffinject.config import config_from_dict
from diffinject.pipeline import Pipeline

torch.set_num_threads(1)


class ZeroDenoiser:
    """eps_theta == 0; the bottleneck is a 4x4 average pool of the input."""

    bottleneck_shape = (3, 4, 4)

    def encode(self, x, t):
        return F.adaptive_avg_pool2d(x, 4), None, x

    def decode(self, h, skips, x):
        return torch.zeros_like(x)

    def __call__(self, x, t, h_override=None, return_h=False):
        h, _, _ = self.encode(x, t)
        out = torch.zeros_like(x)
        return (out, h) if return_h else out


@pytest.fixture
def zero_denoiser():
    return ZeroDenoiser()


# Settings shared by the slow tests that need a trained toy denoiser. The
# artifact store lives in the pytest cache so the expensive diffusion stage
# is trained once and reused (its directory name hashes the full config).
TOY_CONFIG = {
    "seed": 0,
    "data": {"num_classes": 3, "image_size": 32, "samples_per_class": 1000,
             "conflict_ratio": 0.01, "bias_kind": "color", "test_samples_per_class": 300},
    "bias_classifier": {"epochs": 10},
    "diffusion": {"T": 100, "seed": 0},
    "injection": {"num_steps": 50},
}


def toy_config(seed: int = 0):
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TOY_CONFIG.items()}
    data["seed"] = seed
    return config_from_dict(data)


@pytest.fixture(scope="session")
def toy_store(request):
    return Path(request.config.cache.mkdir("diffinject-store"))


@pytest.fixture(scope="session")
def toy_denoiser(toy_store):
    pipe = Pipeline(toy_config(0), out=toy_store / "unused", store=toy_store)
    pipe.run_stage("train-diffusion", resume=True)
    model, schedule, _ = pipe.denoiser()
    return model, schedule


def foreground_hue(images, threshold: float = 0.3):
    """Circular mean hue (in turns) of bright pixels, one value per image."""
    out = []
    for img in np.asarray(images):
        pix = img.reshape(-1, 3)
        pix = pix[pix.max(1) > threshold]
        hues = np.array([colorsys.rgb_to_hsv(*p)[0] for p in pix])
        ang = 2 * np.pi * hues
        out.append((np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi)) % 1.0)
    return np.array(out)


def hue_distance(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % 1.0
    return np.minimum(d, 1.0 - d)


# --- acceptance summary ---------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
