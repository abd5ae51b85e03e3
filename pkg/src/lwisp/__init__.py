"""Lightweight RAW-to-RGB ISP network on a small numpy autodiff engine."""

from .losses import LossWeights, MsSsimConfig, ms_ssim, overall_loss, psnr
from .model import LwIspModel, ModelConfig, TapSet, TeacherModel, count_params, estimate_flops
from .tensor import Tensor, no_grad
from .train import RunReport, TrainConfig, evaluate, infer, train_student, train_teacher

__all__ = [
    "LossWeights", "MsSsimConfig", "ms_ssim", "overall_loss", "psnr",
    "LwIspModel", "ModelConfig", "TapSet", "TeacherModel", "count_params", "estimate_flops",
    "Tensor", "no_grad",
    "RunReport", "TrainConfig", "evaluate", "infer", "train_student", "train_teacher",
]

__version__ = "0.1.0"
