import numpy as np
import pytest

from rebasin.calibration import CalibrationSpec, SourceSpec
from rebasin.encoder import EncoderConfig, init_toy, toy_config


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def weights_a(toy_cfg):
    return init_toy(toy_cfg, 1)


@pytest.fixture(scope="session")
def battery(toy_cfg):
    rng = np.random.default_rng(99)
    return rng.standard_normal((8, 16000)).astype(np.float32) * 0.3


def tiny_config():
    """Fast config for tests that build many plans."""
    return EncoderConfig(
        conv_layers=((8, 8, 8), (12, 4, 4)),
        groupnorm_groups=4,
        model_dim=16,
        ffn_dim=32,
        heads=2,
        num_transformer_layers=1,
    )


def tiny_calibration(clips=24, seed=5):
    return CalibrationSpec(
        sources=(
            SourceSpec("band_noise", clips // 2, {"f_min": 100.0, "f_max": 2000.0}),
            SourceSpec("sine_mix", clips - clips // 2, {"f_min": 80.0, "f_max": 2000.0}),
        ),
        clip_len=4000,
        batch_size=8,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_calib():
    return tiny_calibration()
