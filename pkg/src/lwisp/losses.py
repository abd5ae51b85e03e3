"""Training objectives and image-quality metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, clip_min, mean, no_grad, power, reshape, square, tabs

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class LossWeights:
    alpha: float = 0.4
    beta: float = 1.0
    gamma: float = 0.4

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


@dataclass
class MsSsimConfig:
    scales: int = 5
    weights: tuple = MS_SSIM_WEIGHTS
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.scales < 1 or len(self.weights) < self.scales:
            raise ValueError(f"need at least {self.scales} scale weights, got {len(self.weights)}")
        w = np.asarray(self.weights[: self.scales], dtype=np.float64)
        self.weights = tuple(w / w.sum())


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def usable_scales(height: int, width: int, cfg: MsSsimConfig) -> int:
    """Largest scale count whose coarsest level still fits the window."""
    smallest = min(height, width)
    if smallest < cfg.window:
        raise ValueError(
            f"MS-SSIM needs images of at least {cfg.window}x{cfg.window}, got {height}x{width}"
        )
    scales = 1
    while scales < cfg.scales and smallest // 2**scales >= cfg.window:
        scales += 1
    return scales


def _check_same(pred: Tensor, target: Tensor, who: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{who}: prediction shape {pred.shape} != target shape {target.shape}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _blur(x: Tensor, taps: np.ndarray) -> Tensor:
    """Separable Gaussian filter per channel, 'valid' borders."""
    n, c, h, w = x.shape
    k = taps.astype(x.dtype)
    flat = reshape(x, (n * c, 1, h, w))
    flat = F.conv2d(flat, Tensor(k.reshape(1, 1, -1, 1)))
    flat = F.conv2d(flat, Tensor(k.reshape(1, 1, 1, -1)))
    return reshape(flat, (n, c) + flat.shape[2:])


def _ssim_terms(x: Tensor, y: Tensor, cfg: MsSsimConfig, taps: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-(n, c) mean SSIM and mean contrast-structure term."""
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_x = _blur(x, taps)
    mu_y = _blur(y, taps)
    mu_xx, mu_yy, mu_xy = square(mu_x), square(mu_y), mu_x * mu_y
    var_x = _blur(square(x), taps) - mu_xx
    var_y = _blur(square(y), taps) - mu_yy
    cov = _blur(x * y, taps) - mu_xy
    cs_map = (2.0 * cov + c2) / (var_x + var_y + c2)
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    ssim = mean(lum * cs_map, axis=(2, 3))
    cs = mean(cs_map, axis=(2, 3))
    return ssim, cs


def ms_ssim_tensor(pred: Tensor, target: Tensor, cfg: MsSsimConfig | None = None) -> Tensor:
    """Differentiable MS-SSIM averaged over batch and channels.

    Contrast-structure terms of the finer scales and the full SSIM of the
    coarsest scale are clamped at a tiny positive floor, raised to their
    weights and multiplied. Images too small for every scale use fewer scales
    with the leading weights renormalised.
    """
    cfg = cfg or MsSsimConfig()
    pred, target = _lift(pred), _lift(target)
    _check_same(pred, target, "ms_ssim")
    h, w = pred.shape[2:]
    scales = usable_scales(h, w, cfg)
    weights = np.asarray(cfg.weights[:scales])
    if scales < cfg.scales:
        log.info("MS-SSIM: %dx%d input admits %d of %d scales", h, w, scales, cfg.scales)
        weights = weights / weights.sum()
    taps = gaussian_window(cfg.window, cfg.sigma)
    x, y = pred, target
    total = None
    for s in range(scales):
        ssim, cs = _ssim_terms(x, y, cfg, taps)
        term = ssim if s == scales - 1 else cs
        factor = power(clip_min(term, 1e-12), float(weights[s]))
        total = factor if total is None else total * factor
        if s < scales - 1:
            x, y = F.avg_pool2(x), F.avg_pool2(y)
    return mean(total)


def ms_ssim(pred, target, cfg: MsSsimConfig | None = None) -> float:
    return ms_ssim_tensor(_lift(pred), _lift(target), cfg).item()


def reconstruction_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error."""
    _check_same(pred, target, "reconstruction_loss")
    return mean(tabs(pred - target))


def structural_loss(pred: Tensor, target: Tensor, cfg: MsSsimConfig | None = None) -> Tensor:
    """``1 - MS-SSIM``."""
    return 1.0 - ms_ssim_tensor(pred, target, cfg)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target, "mse_loss")
    return mean(square(pred - target))


def distillation_loss(student_taps: list, teacher_taps: list) -> Tensor:
    """Sum over tap pairs of the mean squared difference.

    Teacher features are detached, so no gradient reaches the teacher.
    """
    if len(student_taps) != len(teacher_taps):
        raise ValueError(f"distillation: {len(student_taps)} student taps vs {len(teacher_taps)} teacher taps")
    if not student_taps:
        raise ValueError("distillation: empty tap list")
    total = None
    for i, (s, t) in enumerate(zip(student_taps, teacher_taps)):
        if s.shape != t.shape:
            raise ValueError(f"distillation: tap pair {i} shapes differ, student {s.shape} vs teacher {t.shape}")
        term = mse_loss(s, t.detach())
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    reconstruction: Tensor
    structural: Tensor
    distillation: Tensor | None = None


def overall_loss(
    pred: Tensor,
    target: Tensor,
    student_taps: list | None,
    teacher_taps: list | None,
    weights: LossWeights,
    cfg: MsSsimConfig | None = None,
) -> LossBreakdown:
    """``L_r + alpha*L_s + beta*L_d`` evaluated as ``(L_r + alpha*L_s) + beta*L_d``.

    The distillation term is skipped entirely when beta is 0 or no taps are given.
    """
    l_r = reconstruction_loss(pred, target)
    total = l_r
    l_s = None
    if weights.alpha > 0:
        l_s = structural_loss(pred, target, cfg)
        total = total + weights.alpha * l_s
    l_d = None
    if weights.beta > 0 and student_taps:
        l_d = distillation_loss(student_taps, teacher_taps)
        total = total + weights.beta * l_d
    if l_s is None:
        # reported only; kept off the tape
        with no_grad():
            l_s = structural_loss(Tensor(pred.data), Tensor(target.data), cfg)
    return LossBreakdown(total, l_r, l_s, l_d)


def teacher_loss(g_out: Tensor, j: Tensor, gamma: float, cfg: MsSsimConfig | None = None) -> Tensor:
    """``mean((g - J)^2) + gamma * (1 - MS-SSIM(g, J))``."""
    loss = mse_loss(g_out, j)
    if gamma > 0:
        loss = loss + gamma * structural_loss(g_out, j, cfg)
    return loss


def psnr(pred, target, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"psnr: shapes differ, {p.shape} vs {t.shape}")
    err = np.mean((p - t) ** 2)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / err))
