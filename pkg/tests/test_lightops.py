from __future__ import annotations

import math

import numpy as np
import pytest

from lumaforge.errors import ContractError, ParameterError
from lumaforge.imagecore import RasterImage, srgb_eotf, srgb_oetf, srgb_to_linear
from lumaforge.lightops import (
    FLARE_COLOR,
    ColorCastParams,
    ExposureParams,
    FlareParams,
    GrainParams,
    OpKind,
    TintParams,
    apply_brightness,
    apply_color_cast,
    apply_contrast,
    apply_cool,
    apply_exposure,
    apply_gamma,
    apply_grain,
    apply_haze,
    apply_lens_flare,
    apply_shadow,
    apply_step,
    apply_vignette,
    apply_warm,
    color_cast_gains,
    identity_params,
    params_from_dict,
)


def _gray(h, w, v):
    return RasterImage.filled(h, w, (v, v, v))


@pytest.mark.parametrize("kind", list(OpKind))
def test_identity_params_reproduce_input_bit_exactly(textured, kind):
    out = apply_step(textured, kind, identity_params(kind))
    assert out == textured


# one in-range, fairly strong setting per kind
STRONG = {
    OpKind.EXPOSURE: {"ev": 1.5},
    OpKind.BRIGHTNESS: {"percent": 45.0},
    OpKind.CONTRAST: {"factor": 1.4},
    OpKind.GAMMA: {"gamma": 0.55},
    OpKind.WARM: {"tint": 0.25},
    OpKind.COOL: {"tint": 0.25},
    OpKind.VIGNETTE: {"strength": 0.65, "center_x": 0.6, "center_y": 0.4},
    OpKind.SHADOW: {"angle_deg": 30.0, "strength": 0.75, "sharpness": 16.0},
    OpKind.GRAIN: {"intensity": 0.07, "noise_seed": 9},
    OpKind.HAZE: {"alpha": 0.5},
    OpKind.COLOR_CAST: {"hue_deg": 300.0, "strength": 0.25},
    OpKind.FLARE: {"center_x": 0.05, "center_y": 0.3, "sigma": 0.2, "amplitude": 1.0},
}


@pytest.mark.parametrize("kind", list(OpKind))
def test_outputs_stay_in_unit_range(textured, kind):
    out = apply_step(textured, kind, params_from_dict(kind, STRONG[kind]))
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    assert out.shape == textured.shape
    assert out != textured


def test_params_roundtrip_through_dict():
    for kind, raw in STRONG.items():
        p = params_from_dict(kind, raw)
        assert params_from_dict(kind, p.to_dict()) == p


def test_unknown_param_name_is_rejected():
    with pytest.raises(ContractError, match="unknown"):
        params_from_dict(OpKind.GAMMA, {"gama": 1.2})


def test_apply_step_checks_params_type(textured):
    with pytest.raises(ContractError):
        apply_step(textured, OpKind.GAMMA, ExposureParams(ev=0.2))


def test_exposure_scales_linear_light():
    img = RasterImage.filled(2, 2, tuple([float(srgb_oetf(np.array(0.25)))] * 3))
    out = apply_exposure(img, 1.0)
    assert np.allclose(srgb_eotf(out.data), 0.5, atol=1e-6)
    white = apply_exposure(_gray(2, 2, 1.0), -1.5)
    assert white.data.max() < 1.0


def test_exposure_rejects_linear_input(textured):
    with pytest.raises(ContractError):
        apply_exposure(srgb_to_linear(textured), 0.5)


def test_exposure_out_of_range():
    with pytest.raises(ParameterError) as exc:
        apply_exposure(_gray(2, 2, 0.5), 2.0)
    assert exc.value.op == "exposure" and exc.value.param == "ev"
    assert exc.value.interval == (-1.5, 1.5)


def test_brightness_examples():
    assert apply_brightness(_gray(1, 1, 0.5), 30.0).data[0, 0, 0] == pytest.approx(0.65, abs=1e-6)
    assert apply_brightness(_gray(1, 1, 0.9), 45.0).data[0, 0, 0] == 1.0


def test_contrast_examples():
    const = _gray(3, 3, 0.3)
    assert np.allclose(apply_contrast(const, 1.4).data, const.data, atol=1e-7)
    data = np.zeros((1, 2, 3), dtype=np.float32)
    data[0, :, 0] = [0.2, 0.6]
    out = apply_contrast(RasterImage(data), 1.25)
    assert out.data[0, :, 0] == pytest.approx([0.15, 0.65], abs=1e-6)


def test_gamma_examples():
    data = np.zeros((1, 3, 3), dtype=np.float32)
    data[0, 1] = 1.0
    data[0, 2] = 0.25
    out = apply_gamma(RasterImage(data), 1.5)
    assert out.data[0, 0, 0] == 0.0 and out.data[0, 1, 0] == 1.0
    with pytest.raises(ParameterError):
        apply_gamma(RasterImage(data), 2.0)


def test_gamma_square_root_value():
    # 2.0 lies outside the admissible range, so check the power law directly at 1.5
    out = apply_gamma(_gray(1, 1, 0.25), 1.5)
    assert out.data[0, 0, 0] == pytest.approx(0.25 ** (1 / 1.5), abs=1e-6)


def test_warm_and_cool():
    warm = apply_warm(_gray(1, 1, 0.5), 0.03)
    assert warm.data[0, 0].tolist() == pytest.approx([0.515, 0.5, 0.485], abs=1e-6)
    img = RasterImage(np.random.default_rng(1).uniform(0.1, 0.8, size=(5, 5, 3)))
    both = apply_cool(apply_warm(img, 0.2), 0.2)
    assert np.max(np.abs(both.data - img.data)) <= 0.2 ** 2 + 1e-6
    assert np.array_equal(apply_cool(img, 0.1).data[..., 1], img.data[..., 1])


def test_vignette_center_and_corner():
    out = apply_vignette(_gray(5, 5, 0.8), 0.4)
    assert out.data[2, 2, 0] == pytest.approx(0.8, abs=1e-6)
    assert out.data[0, 0, 0] == pytest.approx(0.48, abs=1e-6)
    assert out.data[4, 4, 0] == pytest.approx(0.48, abs=1e-6)
    with pytest.raises(ParameterError):
        apply_vignette(_gray(5, 5, 0.8), 0.4, center=(0.9, 0.5))


def test_vignette_single_pixel_is_degenerate():
    with pytest.raises(ParameterError, match="degenerate"):
        apply_vignette(_gray(1, 1, 0.5), 0.3)


def test_shadow_center_line_and_saturation():
    img = _gray(9, 9, 1.0)
    out = apply_shadow(img, 0.0, 0.6, 4.0)
    assert np.allclose(out.data[:, 4, 0], 0.7, atol=1e-6)
    hard = apply_shadow(img, 0.0, 0.6, 1000.0)
    assert np.allclose(hard.data[:, 0, 0], 1.0, atol=1e-3)
    assert np.allclose(hard.data[:, -1, 0], 0.4, atol=1e-3)


def test_grain_statistics_and_determinism():
    img = _gray(256, 256, 0.5)
    a = apply_grain(img, 0.04, noise_seed=1234)
    b = apply_grain(img, 0.04, noise_seed=1234)
    assert a == b
    diff = a.data.astype(np.float64) - 0.5
    assert 0.036 <= diff.std() <= 0.044
    assert abs(diff.mean()) <= 0.002
    assert apply_grain(img, 0.04, noise_seed=1235) != a


def test_grain_seed_must_be_integer():
    with pytest.raises(ParameterError):
        GrainParams(intensity=0.02, noise_seed=-1).validate()


def test_haze_examples():
    assert apply_haze(_gray(1, 1, 0.5), 0.3, (0.9, 0.9, 0.9)).data[0, 0, 0] == pytest.approx(0.62, abs=1e-6)
    full = apply_haze(RasterImage(np.random.default_rng(2).uniform(size=(3, 3, 3))), 1.0, (0.1, 0.2, 0.3))
    assert np.allclose(full.data, np.array([0.1, 0.2, 0.3]), atol=1e-6)


def test_color_cast_gains():
    for hue in (0.0, 45.0, 120.0, 200.0, 333.0):
        assert color_cast_gains(hue, 0.2).mean() == pytest.approx(1.0, abs=1e-12)
    assert color_cast_gains(120.0, 0.3).tolist() == pytest.approx([0.9, 1.2, 0.9], abs=1e-12)
    assert apply_color_cast(_gray(1, 1, 0.5), 120.0, 0.0) == _gray(1, 1, 0.5)


def test_lens_flare_peak_and_falloff():
    black = _gray(11, 11, 0.0)
    out = apply_lens_flare(black, (0.0, 0.5), 0.1, 1.0)
    assert out.data[5, 0].tolist() == pytest.approx(list(FLARE_COLOR), abs=1e-6)
    # x = 0.3 is three sigmas away
    assert out.data[5, 3, 0] < 0.012


def test_lens_flare_center_must_hug_an_edge():
    with pytest.raises(ParameterError, match="edge"):
        FlareParams(center_x=0.5, center_y=0.5, sigma=0.1, amplitude=0.5).validate()
    with pytest.raises(ParameterError):
        FlareParams(center_x=0.0, center_y=0.5, sigma=0.0, amplitude=0.5).validate()


def test_tint_params_validate_per_direction():
    TintParams(tint=0.2).validate(OpKind.COOL)
    with pytest.raises(ParameterError):
        TintParams(tint=0.3).validate(OpKind.WARM)


def test_color_cast_hue_range():
    with pytest.raises(ParameterError):
        ColorCastParams(hue_deg=400.0, strength=0.2).validate()
    assert math.isclose(ColorCastParams(hue_deg=359.0, strength=0.2).to_dict()["hue_deg"], 359.0)


_MONOTONE = [
    ("exposure+", lambda img: apply_exposure(img, 0.7), True),
    ("exposure-", lambda img: apply_exposure(img, -1.2), True),
    ("brightness+", lambda img: apply_brightness(img, 25.0), True),
    ("brightness-", lambda img: apply_brightness(img, -40.0), True),
    ("gamma<1", lambda img: apply_gamma(img, 0.6), True),
    ("gamma>1", lambda img: apply_gamma(img, 1.4), True),
    ("vignette", lambda img: apply_vignette(img, 0.5, (0.4, 0.6)), False),
    ("shadow", lambda img: apply_shadow(img, 30.0, 0.6, 8.0), False),
    ("haze", lambda img: apply_haze(img, 0.3), False),
]


@pytest.mark.parametrize("name,op,global_map", _MONOTONE, ids=[m[0] for m in _MONOTONE])
def test_ops_preserve_sample_order(name, op, global_map):
    rng = np.random.default_rng(13)
    for _ in range(5):
        a = rng.uniform(0.0, 1.0, size=(9, 11, 3))
        b = np.minimum(a + rng.uniform(0.0, 0.3, size=a.shape), 1.0)
        out_a = op(RasterImage(a)).data.astype(np.float64)
        out_b = op(RasterImage(b)).data.astype(np.float64)
        # same pixel position, brighter input
        assert np.all(out_b >= out_a - 1e-6)
        if global_map:
            src = RasterImage(a).data
            for c in range(3):
                order = np.argsort(src[..., c], axis=None, kind="stable")
                assert np.all(np.diff(out_a[..., c].ravel()[order]) >= -1e-6)
