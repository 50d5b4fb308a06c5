import numpy as np
import pytest

from segadapt import toydata


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small two-domain dataset shared across test modules."""
    root = tmp_path_factory.mktemp("shared_ds")
    spec = toydata.SceneSpec(shift_params=toydata.DomainShift(
        hue_rotation=30.0, texture_noise_scale=4.0, texture_noise_amplitude=0.12,
        blur_sigma=0.5, brightness_jitter=0.05, contrast_jitter=0.08, seed=9))
    toydata.build_dataset(spec, (48, 48, 16), root, seed=5)
    return toydata.load_dataset(root / "manifest.json")


@pytest.fixture(scope="session")
def tiny_fseg(toy_dataset):
    """A quickly pretrained, frozen constraint segmenter."""
    from segadapt import segmodels
    from segadapt.nnet import StageSchedule

    return segmodels.pretrain_fseg(
        toy_dataset, segmodels.SegArchConfig(base_width=4),
        StageSchedule(steps=50, batch_size=8), seed=1)


def rng_images(n, h=16, w=24, seed=0):
    return np.random.default_rng(seed).random((n, h, w, 3), dtype=np.float32)
