"""Multi-pathway classifiers trained by routing gradients through weak class components."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, finite_diff_grad
from .routing import (
    LogitBundle,
    TargetBatch,
    average_loss_baseline,
    compose_weakest,
    log_softmax_bundle,
    mean_inference,
    pseudo_target,
    strong_inference,
    weakness,
    weakroute_loss,
)
from .models import build_m1, build_m2, build_m3, build_m4, forward_all

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_grad",
    "LogitBundle",
    "TargetBatch",
    "average_loss_baseline",
    "compose_weakest",
    "log_softmax_bundle",
    "mean_inference",
    "pseudo_target",
    "strong_inference",
    "weakness",
    "weakroute_loss",
    "build_m1",
    "build_m2",
    "build_m3",
    "build_m4",
    "forward_all",
]
