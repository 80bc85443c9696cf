"""protoseg: two-branch prototype alignment for few-shot semantic
segmentation, on a synthetic episodic benchmark with a controllable
hidden-novel-class bias."""

from .config import (
    BackboneConfig,
    DataConfig,
    HeadConfig,
    MethodConfig,
    RunConfig,
    TrainConfig,
    make_run_config,
)
from .data import ClassSplit, Episode, SceneSpec, make_class_split, render_scene, sample_episode
from .head import TrainState, infer, init_train_state, load_checkpoint, save_checkpoint, train_episode
from .metrics import MetricsReport

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ClassSplit",
    "DataConfig",
    "Episode",
    "HeadConfig",
    "MethodConfig",
    "MetricsReport",
    "RunConfig",
    "SceneSpec",
    "TrainState",
    "TrainConfig",
    "__version__",
    "infer",
    "init_train_state",
    "load_checkpoint",
    "make_class_split",
    "make_run_config",
    "render_scene",
    "sample_episode",
    "save_checkpoint",
    "train_episode",
]
