import numpy as np
import pytest

from murax.augment import IDENTITY, AugmentConfig, AugmentParams, apply, hflip, sample_params


def test_same_counter_same_params():
    cfg = AugmentConfig()
    assert sample_params(cfg, 5, 2, 17) == sample_params(cfg, 5, 2, 17)
    assert sample_params(cfg, 5, 2, 17) != sample_params(cfg, 5, 3, 17)


def test_flip_prob_zero_never_flips():
    cfg = AugmentConfig(flip_prob=0.0)
    assert not any(sample_params(cfg, 0, 0, i).flip for i in range(500))


def test_disabled_config_gives_identity():
    assert sample_params(AugmentConfig(enabled=False), 1, 1, 1) == IDENTITY


def test_sampled_ranges_monte_carlo():
    cfg = AugmentConfig()
    ps = [sample_params(cfg, 11, 0, i) for i in range(2000)]
    angles = np.array([p.angle for p in ps])
    scales = np.array([p.scale for p in ps])
    bright = np.array([p.brightness for p in ps])
    assert angles.min() >= -30 and angles.max() <= 30
    assert scales.min() >= 0.95 and scales.max() <= 1.30
    assert bright.min() >= 0.80 and bright.max() <= 1.20
    assert 0.4 < np.mean([p.flip for p in ps]) < 0.6


@pytest.mark.parametrize("bad", [
    dict(flip_prob=1.5), dict(max_rotation=-1), dict(scale_range=(1.2, 1.0)), dict(brightness_range=(0.0, 1.0)),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        AugmentConfig(**bad)


def test_identity_params_leave_image(rng):
    img = rng.random((32, 32))
    np.testing.assert_allclose(apply(img, IDENTITY), img, atol=1e-6)
    # forcing the warp path with zero rotation and unit scale must also be exact
    np.testing.assert_allclose(apply(img, AugmentParams(angle=1e-12)), img, atol=1e-6)


def test_flip_is_involution(rng):
    img = rng.random((16, 16))
    assert np.array_equal(hflip(hflip(img)), img)
    flipped = apply(img, AugmentParams(flip=True))
    assert np.array_equal(apply(flipped, AugmentParams(flip=True)), img)


def test_brightness_scales_constant_image():
    out = apply(np.full((8, 8), 0.5), AugmentParams(brightness=1.2))
    np.testing.assert_allclose(out, 0.6, atol=1e-12)


def test_output_range_and_size(rng):
    cfg = AugmentConfig()
    img = rng.random((24, 24))
    for i in range(50):
        out = apply(img, sample_params(cfg, 3, 0, i))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_rotation_round_trip_interior():
    yy, xx = np.mgrid[0:64, 0:64]
    img = 0.5 + 0.4 * np.sin(xx / 6.0) * np.cos(yy / 7.0)
    back = apply(apply(img, AugmentParams(angle=20.0)), AugmentParams(angle=-20.0))
    inner = slice(7, 57)
    assert np.mean(np.abs(back[inner, inner] - img[inner, inner])) < 0.02


def test_scale_up_zooms_about_centre():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = apply(img, AugmentParams(scale=1.3))
    assert np.unravel_index(np.argmax(out), out.shape) == (10, 10)


def test_scale_down_pads_with_zero():
    out = apply(np.ones((20, 20)), AugmentParams(scale=0.8))
    assert out[0, 0] == 0.0 and out[10, 10] == pytest.approx(1.0)
