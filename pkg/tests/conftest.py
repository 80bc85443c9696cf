import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    """Smallest config that exercises the full pipeline quickly."""
    from protoseg import make_run_config

    return make_run_config(
        16,
        data_num_classes=8,
        backbone_stage_channels=(4, 6, 6),
        head_hidden_channels=8,
        train_steps=5,
        train_eval_episodes=8,
    )
