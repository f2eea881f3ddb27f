import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sodiff.data import synthetic_corpus
from sodiff.jpeg_codec import (
    BASE_CHROMA,
    BASE_LUMA,
    dct2,
    degrade,
    idct2,
    quant_tables,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)


def naive_dct2(block):
    """Direct O(N^4) orthonormal DCT-II summation."""
    n = block.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            cu = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            cv = math.sqrt(1 / n) if v == 0 else math.sqrt(2 / n)
            s = 0.0
            for x in range(n):
                for y in range(n):
                    s += (
                        block[x, y]
                        * math.cos((2 * x + 1) * u * math.pi / (2 * n))
                        * math.cos((2 * y + 1) * v * math.pi / (2 * n))
                    )
            out[u, v] = cu * cv * s
    return out


def libjpeg_tables(qf):
    """Tables Pillow's libjpeg writes for ``quality=qf``, natural order."""
    im = Image.fromarray(np.zeros((8, 8, 3), np.uint8))
    buf = io.BytesIO()
    im.save(buf, "JPEG", quality=qf, subsampling=0)
    buf.seek(0)
    q = Image.open(buf).quantization
    return np.array(q[0]).reshape(8, 8), np.array(q[1]).reshape(8, 8)


def mse(a, b):
    return float(np.mean((a - b) ** 2))


@pytest.fixture(scope="module")
def natural_crop():
    skdata = pytest.importorskip("skimage.data")
    return skdata.astronaut()[96:160, 192:256] / 255.0


# ---------------------------------------------------------------- tables


def test_qf50_is_base_tables():
    t = quant_tables(50)
    np.testing.assert_array_equal(t.luma, BASE_LUMA)
    np.testing.assert_array_equal(t.chroma, BASE_CHROMA)


def test_qf100_all_ones():
    t = quant_tables(100)
    assert (t.luma == 1).all() and (t.chroma == 1).all()


def test_qf5_dc_entries_match_libjpeg():
    # recorded from libjpeg (Pillow) at quality=5
    t = quant_tables(5)
    assert t.luma[0, 0] == 160
    assert t.chroma[0, 0] == 170


@pytest.mark.parametrize("qf", [1, 5, 10, 20, 37, 50, 51, 75, 90, 95, 100])
def test_tables_match_libjpeg(qf):
    luma, chroma = libjpeg_tables(qf)
    t = quant_tables(qf)
    np.testing.assert_array_equal(t.luma, luma)
    np.testing.assert_array_equal(t.chroma, chroma)


def test_tables_monotone_in_qf():
    prev = quant_tables(5)
    for qf in range(6, 96):
        cur = quant_tables(qf)
        assert (cur.luma <= prev.luma).all() and (cur.chroma <= prev.chroma).all()
        prev = cur


@pytest.mark.parametrize("qf", [0, 101, -3, 2.5])
def test_tables_reject_bad_qf(qf):
    with pytest.raises(ValueError):
        quant_tables(qf)


def test_tables_deterministic_and_bounded():
    for qf in range(1, 101):
        a, b = quant_tables(qf), quant_tables(qf)
        np.testing.assert_array_equal(a.luma, b.luma)
        assert a.luma.min() >= 1 and a.luma.max() <= 255


# ---------------------------------------------------------------- dct


def test_dct_matches_naive_summation():
    rng = np.random.default_rng(0)
    for _ in range(5):
        block = rng.normal(size=(8, 8)) * 50
        np.testing.assert_allclose(dct2(block), naive_dct2(block), atol=1e-10)


def test_dct_constant_block():
    c = 3.7
    out = dct2(np.full((8, 8), c))
    assert out[0, 0] == pytest.approx(8 * c, abs=1e-12)
    out[0, 0] = 0
    assert np.abs(out).max() < 1e-12


def test_dct_zero_block():
    assert not dct2(np.zeros((8, 8))).any()
    assert not idct2(np.zeros((8, 8))).any()


def test_dct_round_trip_1000_blocks():
    blocks = np.random.default_rng(1).uniform(-255, 255, size=(1000, 8, 8))
    err = np.abs(idct2(dct2(blocks)) - blocks).max()
    assert err <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=64, max_size=64))
def test_dct_round_trip_property(values):
    block = np.array(values).reshape(8, 8)
    assert np.abs(idct2(dct2(block)) - block).max() <= 1e-9


# ---------------------------------------------------------------- degrade


def test_color_transform_round_trip():
    rgb = np.random.default_rng(2).uniform(0, 255, (16, 16, 3))
    np.testing.assert_allclose(ycbcr_to_rgb(rgb_to_ycbcr(rgb)), rgb, atol=1e-6)


def test_degrade_identity_on_exact_multiples():
    # qf=100 divides by 1, so integer-valued YCbCr blocks quantize to
    # themselves only if their DCT is integral; a constant-per-block image is.
    rng = np.random.default_rng(3)
    levels = rng.integers(0, 256, size=(4, 4, 3))
    img = np.kron(levels, np.ones((8, 8, 1))) / 255.0
    out = degrade(img, 100)
    assert np.abs(out - img).max() <= 1 / 255 + 1e-12


def test_degrade_constant_image():
    img = np.full((40, 24, 3), [0.2, 0.6, 0.9])
    for qf in (1, 5, 30, 95):
        out = degrade(img, qf)
        assert out.shape == img.shape
        assert np.ptp(out.reshape(-1, 3), axis=0).max() <= 1 / 255 + 1e-12


@pytest.mark.parametrize("subsample", ["444", "420", "4:2:0"])
def test_degrade_shape_and_range(subsample):
    img = np.random.default_rng(4).random((37, 50, 3))
    out = degrade(img, 30, subsample)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out * 255, np.round(out * 255), atol=1e-9)


def test_degrade_rejects_bad_args():
    img = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        degrade(img, 0)
    with pytest.raises(ValueError):
        degrade(img, 50, "422")
    with pytest.raises(ValueError):
        degrade(np.zeros((8, 8)), 50)


def test_degrade_deterministic(natural_crop):
    np.testing.assert_array_equal(degrade(natural_crop, 17), degrade(natural_crop, 17))


def test_natural_crop_distortion_ordering(natural_crop):
    m5, m20, m50 = (mse(degrade(natural_crop, q), natural_crop) for q in (5, 20, 50))
    # recorded: 4.19e-3, 1.44e-3, 7.38e-4
    assert m5 > m20 > m50
    assert m5 == pytest.approx(4.189e-3, rel=1e-2)


def test_420_is_lossier_than_444(natural_crop):
    assert mse(degrade(natural_crop, 50, "420"), natural_crop) > mse(degrade(natural_crop, 50, "444"), natural_crop)


def test_degrade_near_idempotent():
    for x in synthetic_corpus(5, 64, seed=11):
        for q in (10, 40):
            once = degrade(x, q)
            assert mse(degrade(once, q), once) < mse(once, x)


def test_distortion_monotone_over_corpus():
    corpus = synthetic_corpus(10, 64, seed=5)
    means = [np.mean([mse(degrade(x, q), x) for x in corpus]) for q in (5, 10, 20, 50, 90)]
    assert all(a > b for a, b in zip(means, means[1:]))
