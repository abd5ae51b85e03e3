import numpy as np
import pytest

from lwisp import functional as F
from lwisp import tensor as T
from lwisp.nn import CcbCore, Conv2d, ContextualComplement, DownBlock, Fgam, UpStage
from lwisp.tensor import Tensor, no_grad


def rng(seed=0):
    return np.random.default_rng(seed)


def randomize(module, seed):
    r = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = r.normal(0, 0.5, p.shape)


def test_conv_param_count():
    assert Conv2d(3, 16, 3, rng()).num_params() == 448


def test_fgam_zero_weights_give_half():
    f = Fgam(4, rng(), reduction=2, dtype=np.float64)
    for _, p in f.named_parameters():
        p.data[...] = 0.0
    with no_grad():
        out = f(Tensor(np.zeros((1, 4, 5, 5))))
    assert out.shape == (1, 8, 5, 5)
    np.testing.assert_array_equal(out.data, 0.5)


@pytest.mark.parametrize("c", [2, 4, 8])
def test_fgam_doubles_channels(c):
    f = Fgam(c, rng(c), reduction=2, dtype=np.float64)
    with no_grad():
        assert f(Tensor(rng(1).normal(size=(2, c, 6, 7)))).shape == (2, 2 * c, 6, 7)


def test_fgam_rejects_bad_reduction():
    with pytest.raises(ValueError, match="divide"):
        Fgam(6, rng(), reduction=4)


def test_fgam_matches_scripted_composition():
    f = Fgam(4, rng(), reduction=2, dtype=np.float64)
    randomize(f, 3)
    x = rng(4).normal(size=(2, 4, 6, 6))
    with no_grad():
        got = f(Tensor(x)).data
    # channel branch
    gap = x.mean(axis=(2, 3), keepdims=True)
    hid = F.conv2d(Tensor(gap), f.squeeze.weight, f.squeeze.bias).data
    hid = np.where(hid > 0, hid, 0.2 * hid)
    a_c = 1 / (1 + np.exp(-F.conv2d(Tensor(hid), f.excite.weight, f.excite.bias).data))
    # spatial branch
    pooled = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    s = F.conv2d(Tensor(pooled), f.spatial.weight, f.spatial.bias, padding=3).data
    a_s = 1 / (1 + np.exp(-s))
    np.testing.assert_allclose(got, np.concatenate([x + a_c, x + a_s], axis=1), atol=1e-12)


def test_fgam_structural_decomposition():
    for seed in range(5):
        c = 4
        f = Fgam(c, rng(seed), reduction=2, dtype=np.float64)
        randomize(f, seed + 10)
        x = rng(seed + 20).normal(size=(2, c, 7, 5))
        with no_grad():
            out = f(Tensor(x)).data
        chan = out[:, :c] - x
        spat = out[:, c:] - x
        assert np.max(np.abs(chan - chan[:, :, :1, :1])) < 1e-6
        assert np.max(np.abs(spat - spat[:, :1])) < 1e-6


def test_ccb_core_zeroed_decoder_branch():
    core = CcbCore(3, 5, 4, rng(), dtype=np.float64)
    randomize(core.enc_branch, 1)
    for _, p in core.dec_branch.named_parameters():
        p.data[...] = 0.0
    a = rng(2).normal(size=(1, 3, 4, 4))
    d = rng(3).normal(size=(1, 5, 4, 4))
    with no_grad():
        out = core(Tensor(a), Tensor(d)).data
        alone = core.enc_branch(Tensor(a)).data
    assert out.shape == (1, 4, 8, 8)
    np.testing.assert_array_equal(out, alone)


def test_ccb_core_matches_scripted_composition():
    core = CcbCore(3, 5, 4, rng(), dtype=np.float64)
    randomize(core, 7)
    a = Tensor(rng(8).normal(size=(2, 3, 3, 5)))
    d = Tensor(rng(9).normal(size=(2, 5, 3, 5)))

    def branch(b, x):
        y = F.pixel_shuffle(F.conv2d(x, b.adjust.weight, b.adjust.bias), 2)
        return F.conv2d(y, b.refine.weight, b.refine.bias, padding=1)

    with no_grad():
        got = core(a, d).data
        ref = T.add(branch(core.enc_branch, a), branch(core.dec_branch, d)).data
    assert got.shape == (2, 4, 6, 10)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_ccb_core_rejects_mismatched_branches():
    core = CcbCore(2, 2, 2, rng(), dtype=np.float64)
    with pytest.raises(ValueError, match="spatial extent"):
        core(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


def test_complement_identical_weights_give_half():
    comp = ContextualComplement(3, 2, rng(), dtype=np.float64)
    # a 1x1 kernel and a 3x3 kernel with only the centre tap are the same filter
    comp.wide.weight.data[...] = 0.0
    comp.wide.weight.data[:, :, 1, 1] = comp.near.weight.data[:, :, 0, 0]
    comp.wide.bias.data[...] = comp.near.bias.data
    with no_grad():
        c = comp.contrast(Tensor(rng(1).normal(size=(1, 3, 6, 6)))).data
    np.testing.assert_allclose(c, 0.5, atol=1e-15)


def test_complement_channels_and_range():
    comp = ContextualComplement(3, 2, rng(), dtype=np.float64)
    randomize(comp, 4)
    x = rng(5).normal(size=(1, 3, 6, 6))
    core = rng(6).normal(size=(1, 4, 6, 6))
    with no_grad():
        out = comp(Tensor(x), Tensor(core)).data
    assert out.shape == (1, 6, 6, 6)
    c = out[:, 4:]
    assert np.all((c > 0) & (c < 1))
    near = F.conv2d(Tensor(x), comp.near.weight, comp.near.bias).data
    wide = F.conv2d(Tensor(x), comp.wide.weight, comp.wide.bias, padding=2, dilation=2).data
    np.testing.assert_allclose(c, 1 / (1 + np.exp(-(near - wide))), atol=1e-12)
    np.testing.assert_array_equal(out[:, :4], core)


def test_down_blocks_reach_four_by_four():
    h = Tensor(np.zeros((1, 4, 64, 64)))
    cin = 4
    with no_grad():
        for i, w in enumerate((4, 4, 4, 4)):
            block = DownBlock(cin, w, rng(i), "leaky_relu", dict(reduction=2), np.float64)
            h, pre = block(h)
            cin = block.out_channels
    assert h.shape == (1, 8, 4, 4) and pre.shape == (1, 4, 4, 4)


def test_up_stage_doubles_extent():
    stage = UpStage(4, 6, 3, 5, 2, rng(), "leaky_relu", dtype=np.float64)
    with no_grad():
        out = stage(Tensor(np.ones((1, 4, 5, 6))), Tensor(np.ones((1, 6, 5, 6))), Tensor(np.ones((1, 3, 10, 12))))
    assert out.shape == (1, 5, 10, 12)
