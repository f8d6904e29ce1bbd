"""Spatio-temporal segmentation of image time series.

A per-time-step convolutional encoder feeds a per-pixel bidirectional
LSTM; learned attention weights collapse the time axis of both the
recurrent features and the encoder skip maps before a convolutional
decoder produces per-pixel class probabilities.  Everything runs on a
small reverse-mode autodiff engine over numpy arrays.
"""

import os as _os

# Honor STATT_THREADS before numpy initializes its BLAS thread pools.
# Best effort: has no effect if numpy was already imported elsewhere.
_threads = _os.environ.get("STATT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

__version__ = "0.1.0"

from .autograd import (  # noqa: E402
    GradCheckReport,
    Tensor,
    backward,
    grad_check,
    no_grad,
)
from .model import (  # noqa: E402
    ForwardTrace,
    ModelConfig,
    ModelParams,
    cross_entropy_loss,
    default_model_config,
    init_params,
    statt_forward,
)
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .data import (  # noqa: E402
    IGNORE_LABEL,
    ClassSignature,
    SceneConfig,
    SceneDataset,
    build_dataset,
    clean_labels,
    default_scene_config,
    extract_patches,
    generate_scene,
    grid_split,
    inject_noise,
    load_dataset,
    normalize,
    save_dataset,
)
from .train import (  # noqa: E402
    AttentionProfile,
    Metrics,
    TrainConfig,
    TrainResult,
    adam_step,
    attention_profile,
    default_train_config,
    evaluate,
    noise_sweep,
    train,
)

__all__ = [
    "__version__",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "GradCheckReport",
    "ModelConfig",
    "ModelParams",
    "ForwardTrace",
    "init_params",
    "statt_forward",
    "cross_entropy_loss",
    "default_model_config",
    "save_checkpoint",
    "load_checkpoint",
    "IGNORE_LABEL",
    "ClassSignature",
    "SceneConfig",
    "SceneDataset",
    "default_scene_config",
    "generate_scene",
    "inject_noise",
    "clean_labels",
    "grid_split",
    "extract_patches",
    "normalize",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "TrainConfig",
    "TrainResult",
    "Metrics",
    "AttentionProfile",
    "default_train_config",
    "adam_step",
    "train",
    "evaluate",
    "attention_profile",
    "noise_sweep",
]
