"""Feature distillation with margin ReLU and partial L2 on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check, record  # noqa: E402
from .nn import ModelSpec, build_model, load_checkpoint, save_checkpoint  # noqa: E402
from .distill import DistillConfig, MarginSpec, margin_closed_form, partial_l2  # noqa: E402
from .data import Dataset, load_cifar_binary, load_idx  # noqa: E402
from .train import TrainConfig, train_student, train_teacher  # noqa: E402

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "record",
    "ModelSpec",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "DistillConfig",
    "MarginSpec",
    "margin_closed_form",
    "partial_l2",
    "Dataset",
    "load_cifar_binary",
    "load_idx",
    "TrainConfig",
    "train_student",
    "train_teacher",
]
