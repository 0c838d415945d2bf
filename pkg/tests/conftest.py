import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tubelets import data, losses, model


def tiny_model_config(**over) -> model.ModelConfig:
    """The small reference configuration used across the suite:
    T=4, S=3, h*w=6 (2x3 grid), d_dec=16, L=2."""
    kw = dict(T=4, S=3, C=2, L=2, d_dec=16, d_mlp=32, n_heads=2,
              H=16, W=24, channels=1,
              encoder=model.EncoderConfig(patch_t=2, patch_hw=8, d_enc=8,
                                          d_mlp=16, layers_spatial=1,
                                          layers_temporal=1))
    kw.update(over)
    return model.ModelConfig(**kw)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_scene():
    spec = data.SceneSpec(n_actors=2, n_classes=2, length=4, H=16, W=24)
    return data.generate_synthetic(spec, seed=3)


@pytest.fixture
def loss_config():
    return losses.LossConfig()


def random_tubelets(T, S, C, seed=0) -> model.TubeletSet:
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.05, 0.95, (T, S, 4))
    b[..., 2:] = rng.uniform(0.05, 0.4, (T, S, 2))
    a = rng.uniform(0.02, 0.98, (T, S, C + 1))
    return model.TubeletSet(b=b, a=a)
