from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from lumaforge.errors import ContractError, ImageIOError
from lumaforge.imagecore import (
    ColorSpace,
    PixelRgb,
    RasterImage,
    clamp01,
    from_u8,
    linear_to_srgb,
    load_image,
    pixel_digest,
    save_image,
    srgb_eotf,
    srgb_oetf,
    srgb_to_linear,
    to_u8,
)


def test_eotf_fixed_points_and_midpoint():
    assert srgb_eotf(np.array(0.0)) == 0.0
    assert srgb_eotf(np.array(1.0)) == pytest.approx(1.0, abs=1e-12)
    assert srgb_eotf(np.array(0.5)) == pytest.approx(0.21404, abs=1e-5)
    assert srgb_oetf(np.array(0.21404)) == pytest.approx(0.5, abs=1e-5)


def test_linear_roundtrip_random_samples():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=10_000)
    assert np.max(np.abs(srgb_oetf(srgb_eotf(x)) - x)) < 1e-6


def test_space_tags_are_enforced(textured):
    lin = srgb_to_linear(textured)
    assert lin.space is ColorSpace.LINEAR
    with pytest.raises(ContractError):
        srgb_to_linear(lin)
    back = linear_to_srgb(lin)
    assert np.max(np.abs(back.data - textured.data)) < 1e-5
    with pytest.raises(ContractError):
        save_image(lin, "never.png")


def test_raster_image_rejects_bad_data():
    with pytest.raises(ContractError):
        RasterImage(np.zeros((4, 4)))
    with pytest.raises(ContractError):
        RasterImage(np.full((2, 2, 3), 1.5))
    with pytest.raises(ContractError):
        RasterImage(np.full((2, 2, 3), np.nan))
    with pytest.raises(ContractError):
        PixelRgb(0.1, -0.2, 0.3)


def test_raster_image_is_immutable(textured):
    with pytest.raises(ValueError):
        textured.data[0, 0, 0] = 0.0
    assert textured.pixel(0, 0) == PixelRgb(*(float(v) for v in textured.data[0, 0]))


def test_png_roundtrip_is_lossless(tmp_path):
    rng = np.random.default_rng(3)
    u8 = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    img = from_u8(u8)
    path = save_image(img, tmp_path / "a.png")
    back = load_image(path)
    assert np.array_equal(to_u8(back), u8)
    assert pixel_digest(back) == pixel_digest(img)


def test_black_png_loads_as_zeros(tmp_path):
    path = tmp_path / "black.png"
    Image.new("RGB", (8, 8)).save(path)
    img = load_image(path)
    assert img.data.size == 192
    assert not img.data.any()


def test_grayscale_is_replicated(tmp_path):
    path = tmp_path / "gray.png"
    Image.fromarray(np.arange(16, dtype=np.uint8).reshape(4, 4) * 10).save(path)
    img = load_image(path)
    assert img.shape == (4, 4, 3)
    assert np.array_equal(img.data[..., 0], img.data[..., 1])
    assert np.array_equal(img.data[..., 1], img.data[..., 2])


def test_alpha_is_dropped(tmp_path):
    path = tmp_path / "rgba.png"
    Image.new("RGBA", (3, 2), (10, 20, 30, 40)).save(path)
    img = load_image(path)
    assert to_u8(img)[0, 0].tolist() == [10, 20, 30]


def test_unreadable_and_unsupported_files(tmp_path):
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image at all")
    with pytest.raises(ImageIOError):
        load_image(junk)
    with pytest.raises(ImageIOError):
        load_image(tmp_path / "missing.png")
    bmp = tmp_path / "x.bmp"
    Image.new("RGB", (2, 2)).save(bmp)
    with pytest.raises(ImageIOError, match="unsupported"):
        load_image(bmp)
    with pytest.raises(ImageIOError):
        save_image(RasterImage.filled(2, 2, (0.5, 0.5, 0.5)), tmp_path / "x.tiff")


def test_digest_depends_on_pixels_and_shape():
    a = RasterImage.filled(2, 3, (0.5, 0.5, 0.5))
    b = RasterImage.filled(3, 2, (0.5, 0.5, 0.5))
    c = RasterImage.filled(2, 3, (0.5, 0.5, 0.52))
    assert pixel_digest(a) != pixel_digest(b)
    assert pixel_digest(a) != pixel_digest(c)
    assert pixel_digest(a) == pixel_digest(RasterImage.filled(2, 3, (0.5, 0.5, 0.5)))


def test_to_u8_rounds_half_up():
    img = RasterImage(np.full((1, 1, 3), 0.5))
    assert to_u8(img)[0, 0, 0] == 128


def test_clamp01_is_idempotent():
    raw = np.random.default_rng(5).uniform(-0.5, 1.5, size=(6, 7, 3))
    once = clamp01(raw)
    assert once.min() >= 0.0 and once.max() <= 1.0
    assert np.array_equal(clamp01(once), once)
    inside = (raw >= 0.0) & (raw <= 1.0)
    assert np.array_equal(once[inside], raw[inside])
    assert RasterImage.filled(1, 1, (0.2, 0.2, 0.2)).with_data(np.full((1, 1, 3), 2.0)).data.tolist() == [[[1.0, 1.0, 1.0]]]
