import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualview.encoding import DualViewPair, ThirdChannelMode, consistency_residual, decode, encode
from dualview.imageio import GrayImage, RgbImage, read_ppm, write_ppm

MODES = list(ThirdChannelMode)


def pixel_pair(cc, mlo):
    return DualViewPair(GrayImage(np.array([[cc]])), GrayImage(np.array([[mlo]])))


def test_sum_channel():
    rgb = encode(pixel_pair(0.3, 0.4), ThirdChannelMode.SUM).data[:, 0, 0]
    assert rgb == pytest.approx([0.3, 0.4, 0.7])


def test_absdiff_channel():
    assert encode(pixel_pair(0.3, 0.4), ThirdChannelMode.ABSDIFF).data[2, 0, 0] == pytest.approx(0.1)


def test_sum_clamps():
    assert encode(pixel_pair(0.8, 0.9), ThirdChannelMode.SUM).data[2, 0, 0] == 1.0


def test_zero_channel():
    assert encode(pixel_pair(0.8, 0.9), ThirdChannelMode.ZERO).data[2, 0, 0] == 0.0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        DualViewPair(GrayImage(np.zeros((2, 2))), GrayImage(np.zeros((2, 3))))


def test_decode_black():
    pair = decode(RgbImage(np.zeros((3, 4, 4))))
    assert not pair.cc.data.any() and not pair.mlo.data.any()


def random_pair(rng, shape=(6, 5)):
    return DualViewPair(GrayImage(rng.random(shape)), GrayImage(rng.random(shape)))


@pytest.mark.parametrize("mode", MODES)
def test_decode_inverts_encode(mode):
    pair = random_pair(np.random.default_rng(0))
    back = decode(encode(pair, mode))
    assert back.cc == pair.cc and back.mlo == pair.mlo


@pytest.mark.parametrize("mode", MODES)
def test_decode_after_file_round_trip(tmp_path, mode):
    rng = np.random.default_rng(1)
    for i in range(50):
        pair = random_pair(rng)
        write_ppm(encode(pair, mode), tmp_path / "e.ppm")
        back = decode(read_ppm(tmp_path / "e.ppm"))
        assert np.abs(back.cc.data - pair.cc.data).max() <= 1 / 65535
        assert np.abs(back.mlo.data - pair.mlo.data).max() <= 1 / 65535


@pytest.mark.parametrize("mode", MODES)
def test_residual_zero_by_construction(mode):
    pair = random_pair(np.random.default_rng(2))
    assert consistency_residual(encode(pair, mode), mode) == 0.0


def test_residual_all_ones_over_zero_mode():
    data = encode(random_pair(np.random.default_rng(3)), ThirdChannelMode.ZERO).data.copy()
    data[2] = 1.0
    assert consistency_residual(RgbImage(data), ThirdChannelMode.ZERO) == 1.0


def test_residual_matches_brute_force():
    rng = np.random.default_rng(4)
    img = RgbImage(rng.random((3, 7, 9)))
    total = 0.0
    for y in range(7):
        for x in range(9):
            r, g, b = img.data[:, y, x]
            total += abs(b - abs(r - g))
    assert consistency_residual(img, ThirdChannelMode.ABSDIFF) == pytest.approx(total / 63, abs=1e-15)


views = arrays(np.float64, (4, 4), elements=st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(views, views, st.sampled_from(MODES))
def test_blue_symmetric_and_in_range(a, b, mode):
    ab = encode(DualViewPair(GrayImage(a), GrayImage(b)), mode)
    ba = encode(DualViewPair(GrayImage(b), GrayImage(a)), mode)
    assert np.array_equal(ab.data[2], ba.data[2])
    assert ab.data.min() >= 0 and ab.data.max() <= 1
