import math

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from lwisp.losses import (
    MS_SSIM_WEIGHTS,
    LossWeights,
    MsSsimConfig,
    distillation_loss,
    ms_ssim,
    overall_loss,
    psnr,
    reconstruction_loss,
    structural_loss,
    teacher_loss,
    usable_scales,
)
from lwisp.tensor import Tensor


def ref_ms_ssim(x, y):
    """Independent MS-SSIM: explicit 2-D Gaussian windows, per image and channel."""
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5**2))
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    scales = 1
    while scales < 5 and min(x.shape[2:]) // 2**scales >= 11:
        scales += 1
    w = np.array(MS_SSIM_WEIGHTS[:scales])
    w /= w.sum()
    n, c = x.shape[:2]
    vals = np.ones((n, c))
    for s in range(scales):
        for i in range(n):
            for k in range(c):
                a, b = x[i, k], y[i, k]

                def filt(img):
                    return np.einsum("hwij,ij->hw", sliding_window_view(img, (11, 11)), win)

                mx, my = filt(a), filt(b)
                vx = filt(a * a) - mx * mx
                vy = filt(b * b) - my * my
                cov = filt(a * b) - mx * my
                cs = (2 * cov + c2) / (vx + vy + c2)
                lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
                term = (lum * cs).mean() if s == scales - 1 else cs.mean()
                vals[i, k] *= max(term, 1e-12) ** w[s]
        if s < scales - 1:
            h2, w2 = x.shape[2] // 2, x.shape[3] // 2
            x = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))
            y = y[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))
    return vals.mean()


def pair(seed=0, shape=(1, 3, 64, 64), noise=0.05):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.1, 0.9, shape)
    return np.clip(t + rng.uniform(-noise, noise, shape), 0, 1), t


def test_mae_examples():
    t = np.random.default_rng(0).uniform(size=(1, 3, 4, 4))
    assert reconstruction_loss(Tensor(t), Tensor(t)).item() == 0.0
    assert reconstruction_loss(Tensor(t + 0.1), Tensor(t)).item() == pytest.approx(0.1)
    p = np.random.default_rng(1).uniform(size=t.shape)
    acc = 0.0
    for a, b in zip(p.reshape(-1), t.reshape(-1)):
        acc += abs(a - b)
    assert reconstruction_loss(Tensor(p), Tensor(t)).item() == pytest.approx(acc / t.size, rel=1e-12)


def test_mae_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        reconstruction_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))


def test_ms_ssim_identical_is_one():
    _, t = pair()
    assert structural_loss(Tensor(t), Tensor(t)).item() == pytest.approx(0.0, abs=1e-6)


def test_ms_ssim_symmetry():
    p, t = pair(1)
    a = structural_loss(Tensor(p), Tensor(t)).item()
    b = structural_loss(Tensor(t), Tensor(p)).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_ms_ssim_matches_reference():
    p, t = pair(2)
    assert ms_ssim(p, t) == pytest.approx(ref_ms_ssim(p, t), abs=1e-6)


def test_ms_ssim_scale_reduction_and_minimum():
    cfg = MsSsimConfig()
    assert usable_scales(64, 64, cfg) == 3
    assert usable_scales(176, 176, cfg) == 5
    assert usable_scales(11, 40, cfg) == 1
    with pytest.raises(ValueError, match="11x11"):
        ms_ssim(np.zeros((1, 1, 10, 10)), np.zeros((1, 1, 10, 10)))


def test_distillation_examples():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert distillation_loss([a], [a]).item() == 0.0
    assert distillation_loss([Tensor(a.data + 2.0)], [a]).item() == pytest.approx(4.0)
    s = [rng.normal(size=(1, c, 4, 4)) for c in (2, 3, 4)]
    t = [rng.normal(size=x.shape) for x in s]
    expected = sum(np.mean((x - y) ** 2) for x, y in zip(s, t))
    got = distillation_loss([Tensor(x) for x in s], [Tensor(y) for y in t]).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_distillation_detaches_teacher():
    s = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    t = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    distillation_loss([s], [t]).backward()
    assert t.grad is None
    np.testing.assert_allclose(s.grad, 0.5)


def test_distillation_shape_errors():
    with pytest.raises(ValueError, match="pair 0"):
        distillation_loss([Tensor(np.zeros((1, 2, 2, 2)))], [Tensor(np.zeros((1, 3, 2, 2)))])
    with pytest.raises(ValueError):
        distillation_loss([Tensor(np.zeros(1))], [])


def test_overall_loss_components():
    p, t = pair(4, (2, 3, 32, 32))
    rng = np.random.default_rng(5)
    s_taps = [Tensor(rng.normal(size=(2, 4, 8, 8)))]
    t_taps = [Tensor(rng.normal(size=(2, 4, 8, 8)))]
    zero = overall_loss(Tensor(p), Tensor(t), s_taps, t_taps, LossWeights(0, 0))
    assert zero.total.item() == reconstruction_loss(Tensor(p), Tensor(t)).item()
    same = overall_loss(Tensor(t), Tensor(t), s_taps, s_taps, LossWeights())
    assert same.total.item() == pytest.approx(0.0, abs=1e-6)
    parts = overall_loss(Tensor(p), Tensor(t), s_taps, t_taps, LossWeights(0.4, 1.0))
    l_r = np.mean(np.abs(p - t))
    l_s = 1 - ref_ms_ssim(p, t)
    l_d = np.mean((s_taps[0].data - t_taps[0].data) ** 2)
    assert parts.total.item() == pytest.approx(l_r + 0.4 * l_s + l_d, abs=1e-6)


def test_overall_loss_rejects_negative_weights():
    with pytest.raises(ValueError, match="alpha"):
        LossWeights(alpha=-1)


def test_teacher_loss_examples():
    p, t = pair(6, (1, 3, 32, 32))
    assert teacher_loss(Tensor(t), Tensor(t), 0.4).item() == pytest.approx(0.0, abs=1e-6)
    assert teacher_loss(Tensor(t + 0.1), Tensor(t), 0.0).item() == pytest.approx(0.01)
    expected = np.mean((p - t) ** 2) + 0.4 * (1 - ref_ms_ssim(p, t))
    assert teacher_loss(Tensor(p), Tensor(t), 0.4).item() == pytest.approx(expected, abs=1e-6)


def test_psnr_examples():
    t = np.random.default_rng(7).uniform(0, 0.8, (1, 3, 8, 8))
    assert psnr(t + 0.1, t) == pytest.approx(20.0)
    assert psnr(t, t) == math.inf
    p = np.random.default_rng(8).uniform(size=t.shape)
    acc = 0.0
    for a, b in zip(p.reshape(-1), t.reshape(-1)):
        acc += (a - b) ** 2
    assert psnr(p, t) == pytest.approx(10 * math.log10(1 / (acc / t.size)), rel=1e-12)
