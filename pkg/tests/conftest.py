import numpy as np
import pytest

from cellseg.imaging import generate_synthetic_dataset, SynthConfig
from cellseg.trainer import run_training, TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 small synthetic image/mask pairs shared across modules."""
    cfg = SynthConfig(image_size=32, cell_count_range=(1, 2), noise_sigma=0.05,
                      blur_radius=1, seed=101)
    return generate_synthetic_dataset(cfg, 12)


@pytest.fixture(scope="session")
def smoke_run():
    """A converged baseline run on a 10-image dataset (train split only).

    Returns (params, images, masks). Session-scoped because training,
    while fast, is the most expensive fixture in the suite.
    """
    cfg = SynthConfig(image_size=48, cell_count_range=(1, 3), noise_sigma=0.05,
                      blur_radius=1, seed=77)
    data = generate_synthetic_dataset(cfg, 10)
    images = [d[0] for d in data]
    masks = [d[1] for d in data]
    tc = TrainConfig(epochs=40, sampling_start_epoch=40, batch_size=2, lr0=0.05, seed=2)
    params, _, _, _ = run_training(images, masks, tc)
    return params, images, masks


def random_mask(rng, h, w, p=0.5):
    return (rng.uniform(size=(h, w)) < p).astype(np.int64)
