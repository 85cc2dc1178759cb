"""textscrub: iterative text removal for images.

Synthetic data generation, a recurrent erasing network, image-quality
metrics, a training/ablation harness, a CLI, and an HTTP inference service.
"""

from .metrics import MetricReport, composite_non_text, evaluate_dataset
from .model import (
    EraserNet,
    ModelConfig,
    apply_residual,
    count_parameters,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .synth import (
    SceneSample,
    TextInstance,
    Triplet,
    compose_partial_gt,
    make_scene,
    make_triplet,
    rasterize_mask,
    render_scene,
    select_instances,
)
from .training import (
    LossReport,
    TrainConfig,
    lr_schedule,
    run_ablation,
    train,
    train_epoch,
    weighted_l1_loss,
)

__version__ = "0.1.0"

__all__ = [
    "EraserNet",
    "LossReport",
    "MetricReport",
    "ModelConfig",
    "SceneSample",
    "TextInstance",
    "TrainConfig",
    "Triplet",
    "apply_residual",
    "composite_non_text",
    "compose_partial_gt",
    "count_parameters",
    "evaluate_dataset",
    "init_model",
    "load_checkpoint",
    "lr_schedule",
    "make_scene",
    "make_triplet",
    "rasterize_mask",
    "render_scene",
    "run_ablation",
    "save_checkpoint",
    "select_instances",
    "train",
    "train_epoch",
    "weighted_l1_loss",
    "__version__",
]
