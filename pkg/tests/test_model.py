import numpy as np
import pytest

from lwisp.gradcheck import TINY_CONFIG, model_suite
from lwisp.model import (
    LwIspModel,
    ModelConfig,
    TapSet,
    TeacherModel,
    count_conv_layers,
    count_params,
    estimate_flops,
)
from lwisp.tensor import Tensor, no_grad

SMALL = dict(widths=(4, 8, 8, 16), head_width=8, dtype="float64")


def run(model, x, taps=None):
    with no_grad():
        return model(Tensor(x), taps)


def test_student_output_shape_and_range():
    m = LwIspModel(ModelConfig(**SMALL))
    x = np.random.default_rng(0).uniform(0, 1, (2, 4, 16, 32))
    rgb, _ = run(m, x)
    assert rgb.shape == (2, 3, 32, 64)
    assert rgb.data.min() >= 0.0 and rgb.data.max() <= 1.0


def test_student_tap_extents():
    m = LwIspModel(ModelConfig(**SMALL))
    _, taps = run(m, np.zeros((1, 4, 32, 32)), ["up2", "up3", "up4"])
    assert [t.shape[2:] for t in taps] == [(8, 8), (16, 16), (32, 32)]


def test_student_is_deterministic():
    x = np.random.default_rng(1).uniform(0, 1, (1, 4, 16, 16))
    a, _ = run(LwIspModel(ModelConfig(seed=3, **SMALL)), x)
    b, _ = run(LwIspModel(ModelConfig(seed=3, **SMALL)), x)
    np.testing.assert_array_equal(a.data, b.data)


def test_student_rejects_bad_extent():
    m = LwIspModel(ModelConfig(**SMALL))
    with pytest.raises(ValueError, match="16"):
        run(m, np.zeros((1, 4, 24, 32)))
    with pytest.raises(ValueError):
        run(m, np.zeros((1, 3, 32, 32)))


def test_teacher_shape_and_tap_pairing():
    cfg = ModelConfig(**SMALL)
    t = TeacherModel(cfg)
    s = LwIspModel(cfg)
    taps = TapSet()
    j = np.random.default_rng(2).uniform(0, 1, (1, 3, 64, 64))
    out, t_taps = run(t, j, taps.teacher)
    assert out.shape == j.shape
    _, s_taps = run(s, np.zeros((1, 4, 32, 32)), taps.student)
    assert [a.shape for a in t_taps] == [b.shape for b in s_taps]


def test_tapset_parse_and_validation():
    assert TapSet.parse("up2,up3,up4").pairs == [("up2", "up2"), ("up3", "up3"), ("up4", "up4")]
    assert TapSet.parse("down1:up3").pairs == [("down1", "up3")]
    assert str(TapSet.parse("up2:up3,up4")) == "up2:up3,up4"
    with pytest.raises(ValueError, match="tap location"):
        TapSet.parse("mid7")


def test_default_accounting():
    m = LwIspModel()
    plain = LwIspModel(ModelConfig(use_fgam=False))
    params = count_params(m)
    assert 1_500_000 <= params <= 2_500_000
    assert count_params(plain) < params
    flops = estimate_flops(m, (1, 4, 112, 112))
    assert 3e9 <= flops <= 6e9
    assert count_conv_layers(m)["trunk"] == 24


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(widths=(1, 2, 3))
    with pytest.raises(ValueError):
        ModelConfig(activation="tanh")
    assert ModelConfig.from_dict(ModelConfig(widths=(8, 8, 8, 8)).to_dict()) == ModelConfig(widths=(8, 8, 8, 8))


def test_full_model_gradients_every_coordinate():
    # every coordinate of every parameter of the tiny student, one seed
    results = model_suite(0, max_coords=None)
    assert results
    bad = [r for r in results if not r.passed]
    assert not bad, bad
    assert TINY_CONFIG["dtype"] == "float64"


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def analytic_params_without_fgam(widths, head_width):
    w0, w1, w2, w3 = widths
    total = conv_params(4, w0, 3) + conv_params(w0, w0, 3)
    cin = w0
    for w in widths:
        total += conv_params(cin, w, 3) + conv_params(w, w, 3)
        cin = w
    total += conv_params(w3, w3, 1) + conv_params(2 * w3, w3, 3) + conv_params(w3, w3, 3)

    def stage(c_enc, c_dec, c_ctx, cout, fusion_out):
        cc = cout // 2
        n = conv_params(c_enc, 4 * cout, 1) + conv_params(c_dec, 4 * cout, 1) + 2 * conv_params(cout, cout, 3)
        n += conv_params(c_ctx, cc, 1) + conv_params(c_ctx, cc, 3)
        widths_f = [cout + cc] + fusion_out
        return n + sum(conv_params(a, b, 3) for a, b in zip(widths_f[:-1], widths_f[1:]))

    dec = w3
    ctx = [w0, w0, w1, w2]
    for level in (3, 2, 1, 0):
        cout = widths[level]
        total += stage(widths[level], dec, ctx[level], cout, [cout, cout])
        dec = cout
    total += stage(w0, w0, 1, head_width, [head_width, head_width, 3])
    return total


def test_params_without_fgam_match_analytic_count():
    for widths, hw in (((16, 32, 64, 128), 24), ((4, 8, 8, 16), 8)):
        m = LwIspModel(ModelConfig(widths=widths, head_width=hw, use_fgam=False))
        assert count_params(m) == analytic_params_without_fgam(widths, hw)


def test_batch_members_are_independent():
    m = LwIspModel(ModelConfig(**SMALL))
    x = np.random.default_rng(5).uniform(size=(2, 4, 16, 16))
    single, _ = run(m, x[:1])
    both, _ = run(m, x)
    np.testing.assert_array_equal(both.data[:1], single.data)


def test_global_vector_is_wired_in():
    m = LwIspModel(ModelConfig(**SMALL))
    x = np.random.default_rng(6).uniform(size=(1, 4, 16, 16))
    before, _ = run(m, x)
    m.trunk.global_proj.weight.data = np.random.default_rng(7).normal(size=m.trunk.global_proj.weight.shape)
    after, _ = run(m, x)
    assert np.max(np.abs(after.data - before.data)) > 0
