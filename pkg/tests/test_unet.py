import numpy as np
import pytest

from tverskyseg.gradcheck import check_end_to_end
from tverskyseg.kernels import ShapeError
from tverskyseg.unet import ModelConfig, build_dilated_unet3d, build_unet3d, forward, init_params


def small(**kw):
    base = dict(depth=2, base_channels=4)
    base.update(kw)
    return ModelConfig(**base)


def test_channel_doubling():
    m = build_unet3d(ModelConfig(depth=2, base_channels=8))
    assert m.params["enc0.conv2.weight"].shape[0] == 8
    assert m.params["enc1.conv2.weight"].shape[0] == 16
    assert m.params["bottleneck.conv2.weight"].shape[0] == 32
    assert m.params["head.weight"].shape == (2, 8, 1, 1, 1)


def test_parameter_count_matches_layer_arithmetic():
    cfg = ModelConfig(depth=2, base_channels=8)
    m = build_unet3d(cfg)

    def conv(cin, cout, k):
        return cout * cin * k ** 3 + cout

    expected = (
        conv(1, 8, 3) + conv(8, 8, 3) + conv(8, 8, 2)
        + conv(8, 16, 3) + conv(16, 16, 3) + conv(16, 16, 2)
        + conv(16, 32, 3) + conv(32, 32, 3)
        + conv(32, 16, 2) + conv(32, 16, 3) + conv(16, 16, 3)
        + conv(16, 8, 2) + conv(16, 8, 3) + conv(8, 8, 3)
        + conv(8, 2, 1)
    )
    assert m.num_params() == expected
    assert m.params["enc1.conv1.weight"].size + m.params["enc1.conv1.bias"].size == 16 * 8 * 27 + 16


def test_strided_conv_replaces_pooling():
    strided = build_unet3d(small())
    pooled = build_unet3d(small(downsample_mode="max_pool"))
    assert strided.params["enc0.down.weight"].shape == (4, 4, 2, 2, 2)
    assert not any(".down." in n for n in pooled.params)
    assert ModelConfig().downsample_mode == "strided_conv"


@pytest.mark.parametrize("mode", ["strided_conv", "max_pool"])
def test_output_shape_and_probabilities(mode, rng):
    m = init_params(build_unet3d(small(downsample_mode=mode)), 0)
    x = rng.standard_normal((2, 1, 8, 12, 4)).astype(np.float32)
    p = forward(m, x).data
    assert p.shape == (2, 2, 8, 12, 4)
    assert p.dtype == np.float32
    assert (p >= 0).all() and (p <= 1).all()
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6


def test_32_cube_depth_2():
    m = init_params(build_unet3d(ModelConfig(depth=2, base_channels=2)), 0)
    assert forward(m, np.zeros((1, 1, 32, 32, 32), np.float32)).shape == (1, 2, 32, 32, 32)


def test_non_divisible_extent_names_divisor():
    m = build_unet3d(ModelConfig(depth=2, base_channels=2))
    with pytest.raises(ShapeError, match=r"divisible by 4.*pad by 2 to 32"):
        forward(m, np.zeros((1, 1, 30, 30, 30), np.float32))


def test_zero_weights_give_even_split():
    m = build_unet3d(small())
    p = forward(m, np.random.default_rng(0).standard_normal((1, 1, 4, 4, 4))).data
    assert (p == 0.5).all()


def test_init_deterministic_and_bias_free():
    a = init_params(build_unet3d(small()), 7)
    b = init_params(build_unet3d(small()), 7)
    c = init_params(build_unet3d(small()), 8)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
        if name.endswith(".bias"):
            assert not a.params[name].data.any()
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_init_variance():
    # enc1.conv2 at base 64: 128 x 128 x 27 weights, fan_in = 128 * 27
    m = init_params(build_unet3d(ModelConfig(depth=2, base_channels=64)), 0)
    w = m.params["enc1.conv2.weight"].data.astype(np.float64)
    assert w.size >= 1e5
    target = 2.0 / (w.shape[1] * 27)
    assert abs(w.var() / target - 1) < 0.05
    up = m.params["dec1.up.weight"].data.astype(np.float64)
    assert abs(up.var() / (2.0 / (up.shape[0] * 8)) - 1) < 0.05


def test_skip_ablation_changes_output(rng):
    m = init_params(build_unet3d(small()), 3)
    x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    base = forward(m, x).data
    for s in range(2):
        ablated = m.forward(x, zero_skips=(s,)).data
        assert np.abs(ablated - base).max() > 1e-4


def test_down_then_up_restores_extent(rng):
    for depth in (1, 2, 3):
        m = init_params(build_unet3d(ModelConfig(depth=depth, base_channels=2)), 0)
        shape = tuple(int(v) * 2 ** depth for v in rng.integers(1, 3, size=3))
        assert m.forward(np.zeros((1, 1) + shape)).shape == (1, 2) + shape


# -- dilated bottleneck -----------------------------------------------------------


def test_dilated_receptive_field():
    cfg = ModelConfig(depth=1, dilated_bottleneck=True, bottleneck_dilations=(1, 2, 4))
    assert cfg.bottleneck_receptive_field() == 1 + 2 * (1 + 2 + 4) == 15


def test_single_dilation_equals_plain_bottleneck(rng):
    plain = init_params(build_unet3d(small()), 5)
    dil = init_params(build_unet3d(small(dilated_bottleneck=True, bottleneck_dilations=(1,))), 5)
    assert list(plain.params) == list(dil.params)
    for n in plain.params:
        assert plain.params[n].shape == dil.params[n].shape
        np.testing.assert_array_equal(plain.params[n].data, dil.params[n].data)
    x = rng.standard_normal((1, 1, 12, 12, 12))
    np.testing.assert_array_equal(plain.forward(x).data, dil.forward(x).data)


def test_dilated_bottleneck_extent_check():
    cfg = ModelConfig(depth=2, base_channels=2, dilated_bottleneck=True)
    with pytest.raises(ShapeError, match="minimum input extent is 60"):
        build_dilated_unet3d(cfg, input_extent=32)
    m = build_dilated_unet3d(ModelConfig(depth=1, base_channels=2, dilated_bottleneck=True), input_extent=32)
    assert m.forward(np.zeros((1, 1, 32, 32, 32))).shape == (1, 2, 32, 32, 32)
    with pytest.raises(ShapeError, match="at least 60"):
        build_unet3d(cfg).forward(np.zeros((1, 1, 32, 32, 32)))


def test_dilated_builder_requires_flag():
    with pytest.raises(ValueError):
        build_dilated_unet3d(small())


@pytest.mark.parametrize("kw", [dict(depth=0), dict(base_channels=0), dict(downsample_mode="avg"),
                                dict(dilated_bottleneck=True, bottleneck_dilations=())])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


# -- gradients --------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_end_to_end_gradient(seed):
    result = check_end_to_end(seed=seed)
    assert result.passed, result.summary()
    assert result.skipped < result.checked / 4


def test_end_to_end_gradient_max_pool():
    result = check_end_to_end(seed=0, downsample_mode="max_pool")
    assert result.passed, result.summary()


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        build_unet3d(small()).backward(np.zeros(1))


def test_load_state_validates_names():
    m = build_unet3d(small())
    state = dict(m.state())
    state.pop("head.bias")
    with pytest.raises(ValueError, match="head.bias"):
        m.load_state(state)
