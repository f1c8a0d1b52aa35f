"""
Lighting operations applied to RasterImages.

- Twelve kinds (warm and cool are separate kinds of one temperature family)
- Each kind has a frozen params dataclass that round-trips through a dict
- Every op validates its params against an absolute admissible range,
  short-circuits at identity params and clamps its output to [0, 1]
- Only exposure leaves sRGB space (it round-trips through linear light)
"""
from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Any, Callable, ClassVar, Dict, Mapping, Tuple, Type

import numpy as np

from .errors import ContractError, ParameterError
from .imagecore import ColorSpace, RasterImage, srgb_eotf, srgb_oetf

logger = logging.getLogger(__name__)

DEFAULT_HAZE_COLOR: Tuple[float, float, float] = (0.82, 0.84, 0.86)
FLARE_COLOR: Tuple[float, float, float] = (1.0, 0.96, 0.82)
VIGNETTE_POWER = 2.5
VIGNETTE_CENTER_JITTER = 0.1
FLARE_EDGE_BAND = 0.15

# slack for bounds that sampled floats land on exactly
_EPS = 1e-9


class OpKind(str, Enum):
    EXPOSURE = "exposure"
    SHADOW = "shadow"
    WARM = "warm"
    COOL = "cool"
    VIGNETTE = "vignette"
    CONTRAST = "contrast"
    GAMMA = "gamma"
    BRIGHTNESS = "brightness"
    GRAIN = "grain"
    HAZE = "haze"
    COLOR_CAST = "color_cast"
    FLARE = "flare"


SEVERE_ONLY = frozenset({OpKind.COLOR_CAST, OpKind.FLARE})


# Absolute ranges: the identity value plus the union of every severity tier.
ADMISSIBLE: Dict[OpKind, Dict[str, Tuple[float, float]]] = {
    OpKind.EXPOSURE: {"ev": (-1.5, 1.5)},
    OpKind.BRIGHTNESS: {"percent": (-45.0, 45.0)},
    OpKind.CONTRAST: {"factor": (0.6, 1.4)},
    OpKind.GAMMA: {"gamma": (0.55, 1.5)},
    OpKind.WARM: {"tint": (0.0, 0.25)},
    OpKind.COOL: {"tint": (0.0, 0.25)},
    OpKind.VIGNETTE: {
        "strength": (0.0, 0.65),
        "center_x": (0.5 - VIGNETTE_CENTER_JITTER, 0.5 + VIGNETTE_CENTER_JITTER),
        "center_y": (0.5 - VIGNETTE_CENTER_JITTER, 0.5 + VIGNETTE_CENTER_JITTER),
        "power": (0.0, math.inf),
    },
    OpKind.SHADOW: {
        "strength": (0.0, 0.75),
        "sharpness": (0.0, math.inf),
        "angle_deg": (-math.inf, math.inf),
    },
    OpKind.GRAIN: {"intensity": (0.0, 0.07)},
    OpKind.HAZE: {"alpha": (0.0, 1.0)},
    OpKind.COLOR_CAST: {"hue_deg": (0.0, 360.0), "strength": (0.0, 0.25)},
    OpKind.FLARE: {
        "center_x": (0.0, 1.0),
        "center_y": (0.0, 1.0),
        "sigma": (0.0, 1.0),
        "amplitude": (0.0, math.inf),
    },
}

# open lower bounds (the value itself is not admissible)
_OPEN_LOW = {(OpKind.VIGNETTE, "power"), (OpKind.SHADOW, "sharpness"), (OpKind.FLARE, "sigma")}


def check_range(kind: OpKind, name: str, value: float) -> float:
    """Return `value` as float if it lies in the admissible range of (kind, name)."""
    lo, hi = ADMISSIBLE[kind][name]
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ParameterError(kind.value, name, value, reason="not a number")
    if not math.isfinite(v):
        raise ParameterError(kind.value, name, value, reason="not finite")
    if (kind, name) in _OPEN_LOW:
        if v <= lo or v > hi:
            raise ParameterError(kind.value, name, value, reason=f"must lie in ({lo}, {hi}]")
    elif v < lo - _EPS or v > hi + _EPS:
        raise ParameterError(kind.value, name, value, (lo, hi))
    return v


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class OpParams:
    kind: ClassVar[OpKind]

    def to_dict(self) -> Dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def is_identity(self) -> bool:
        return False

    def validate(self, kind: OpKind | None = None) -> None:
        kind = kind or self.kind
        for f in fields(self):
            if f.name in ADMISSIBLE[kind]:
                check_range(kind, f.name, getattr(self, f.name))


@dataclass(frozen=True)
class ExposureParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.EXPOSURE
    ev: float = 0.0

    def is_identity(self) -> bool:
        return self.ev == 0.0


@dataclass(frozen=True)
class BrightnessParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.BRIGHTNESS
    percent: float = 0.0

    def is_identity(self) -> bool:
        return self.percent == 0.0


@dataclass(frozen=True)
class ContrastParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.CONTRAST
    factor: float = 1.0

    def is_identity(self) -> bool:
        return self.factor == 1.0


@dataclass(frozen=True)
class GammaParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.GAMMA
    gamma: float = 1.0

    def is_identity(self) -> bool:
        return self.gamma == 1.0


@dataclass(frozen=True)
class TintParams(OpParams):
    """Shared by WARM and COOL; the kind carries the direction."""
    kind: ClassVar[OpKind] = OpKind.WARM
    tint: float = 0.0

    def is_identity(self) -> bool:
        return self.tint == 0.0


@dataclass(frozen=True)
class VignetteParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.VIGNETTE
    strength: float = 0.0
    center_x: float = 0.5
    center_y: float = 0.5
    power: float = VIGNETTE_POWER

    def is_identity(self) -> bool:
        return self.strength == 0.0


@dataclass(frozen=True)
class ShadowParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.SHADOW
    angle_deg: float = 0.0
    strength: float = 0.0
    sharpness: float = 4.0

    def is_identity(self) -> bool:
        return self.strength == 0.0


@dataclass(frozen=True)
class GrainParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.GRAIN
    intensity: float = 0.0
    noise_seed: int = 0

    def is_identity(self) -> bool:
        return self.intensity == 0.0

    def validate(self, kind: OpKind | None = None) -> None:
        super().validate(kind)
        if isinstance(self.noise_seed, bool) or not isinstance(self.noise_seed, int) or not (0 <= self.noise_seed < 2**128):
            raise ParameterError("grain", "noise_seed", self.noise_seed, reason="must be a non-negative integer below 2**128")


@dataclass(frozen=True)
class HazeParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.HAZE
    alpha: float = 0.0
    haze_color: Tuple[float, float, float] = DEFAULT_HAZE_COLOR

    def __post_init__(self):
        object.__setattr__(self, "haze_color", tuple(float(c) for c in self.haze_color))

    def is_identity(self) -> bool:
        return self.alpha == 0.0

    def validate(self, kind: OpKind | None = None) -> None:
        super().validate(kind)
        if len(self.haze_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.haze_color):
            raise ParameterError("haze", "haze_color", self.haze_color, (0.0, 1.0))


@dataclass(frozen=True)
class ColorCastParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.COLOR_CAST
    hue_deg: float = 0.0
    strength: float = 0.0

    def is_identity(self) -> bool:
        return self.strength == 0.0


@dataclass(frozen=True)
class FlareParams(OpParams):
    kind: ClassVar[OpKind] = OpKind.FLARE
    center_x: float = 0.0
    center_y: float = 0.5
    sigma: float = 0.1
    amplitude: float = 0.0

    def is_identity(self) -> bool:
        return self.amplitude == 0.0

    def validate(self, kind: OpKind | None = None) -> None:
        super().validate(kind)
        edge = min(self.center_x, 1.0 - self.center_x, self.center_y, 1.0 - self.center_y)
        if edge > FLARE_EDGE_BAND + _EPS:
            raise ParameterError(
                "flare", "center", (self.center_x, self.center_y),
                reason=f"must lie within {FLARE_EDGE_BAND} of a frame edge (distance {edge:.4f})",
            )


PARAMS_TYPES: Dict[OpKind, Type[OpParams]] = {
    OpKind.EXPOSURE: ExposureParams,
    OpKind.BRIGHTNESS: BrightnessParams,
    OpKind.CONTRAST: ContrastParams,
    OpKind.GAMMA: GammaParams,
    OpKind.WARM: TintParams,
    OpKind.COOL: TintParams,
    OpKind.VIGNETTE: VignetteParams,
    OpKind.SHADOW: ShadowParams,
    OpKind.GRAIN: GrainParams,
    OpKind.HAZE: HazeParams,
    OpKind.COLOR_CAST: ColorCastParams,
    OpKind.FLARE: FlareParams,
}


def params_from_dict(kind: OpKind | str, data: Mapping[str, Any]) -> OpParams:
    """Build the params object for `kind` from a plain mapping (manifest or CLI)."""
    kind = OpKind(kind)
    cls = PARAMS_TYPES[kind]
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ContractError(f"{kind.value}: unknown parameter(s) {', '.join(unknown)}")
    values = dict(data)
    if "noise_seed" in values:
        values["noise_seed"] = int(values["noise_seed"])
    if "haze_color" in values:
        values["haze_color"] = tuple(values["haze_color"])
    return cls(**values)


def identity_params(kind: OpKind | str) -> OpParams:
    return PARAMS_TYPES[OpKind(kind)]()


# ---------------------------------------------------------------- operations

def _srgb(img: RasterImage, op: str) -> np.ndarray:
    if img.space != ColorSpace.SRGB:
        raise ContractError(f"{op} expects an srgb image, got {img.space.value}")
    return img.data.astype(np.float64)


def _done(img: RasterImage, out: np.ndarray) -> RasterImage:
    return img.with_data(out)


def apply_exposure(img: RasterImage, ev: float) -> RasterImage:
    """Scale linear light by 2**ev, then re-encode to sRGB."""
    ev = check_range(OpKind.EXPOSURE, "ev", ev)
    data = _srgb(img, "exposure")
    if ev == 0.0:
        return img
    linear = srgb_eotf(data) * (2.0 ** ev)
    return _done(img, srgb_oetf(linear))


def apply_brightness(img: RasterImage, percent: float) -> RasterImage:
    percent = check_range(OpKind.BRIGHTNESS, "percent", percent)
    data = _srgb(img, "brightness")
    if percent == 0.0:
        return img
    return _done(img, data * (1.0 + percent / 100.0))


def apply_contrast(img: RasterImage, factor: float) -> RasterImage:
    """Per-channel affine rescale about the channel mean."""
    factor = check_range(OpKind.CONTRAST, "factor", factor)
    data = _srgb(img, "contrast")
    if factor == 1.0:
        return img
    mu = data.mean(axis=(0, 1), keepdims=True)
    return _done(img, (data - mu) * factor + mu)


def apply_gamma(img: RasterImage, gamma: float) -> RasterImage:
    gamma = check_range(OpKind.GAMMA, "gamma", gamma)
    data = _srgb(img, "gamma")
    if gamma == 1.0:
        return img
    return _done(img, np.power(data, 1.0 / gamma))


def apply_color_temperature(img: RasterImage, tint: float, direction: str) -> RasterImage:
    """Warm boosts red and suppresses blue by `tint`; cool mirrors it. Green is untouched."""
    try:
        kind = {"warm": OpKind.WARM, "cool": OpKind.COOL}[str(getattr(direction, "value", direction))]
    except KeyError:
        raise ContractError(f"color temperature direction must be 'warm' or 'cool', got {direction!r}")
    tint = check_range(kind, "tint", tint)
    data = _srgb(img, kind.value)
    if tint == 0.0:
        return img
    if kind is OpKind.WARM:
        gains = np.array([1.0 + tint, 1.0, 1.0 - tint])
    else:
        gains = np.array([1.0 - tint, 1.0, 1.0 + tint])
    return _done(img, data * gains)


def apply_warm(img: RasterImage, tint: float) -> RasterImage:
    return apply_color_temperature(img, tint, "warm")


def apply_cool(img: RasterImage, tint: float) -> RasterImage:
    return apply_color_temperature(img, tint, "cool")


def apply_vignette(img: RasterImage, strength: float, center: Tuple[float, float] = (0.5, 0.5),
                   power: float = VIGNETTE_POWER) -> RasterImage:
    """Radial power-law darkening: m(r) = 1 - strength * (r / r_max) ** power.

    Pixel positions are integer indices; the normalized center maps to
    (cx * (W - 1), cy * (H - 1)) and r_max is the distance to the farthest corner.
    """
    p = VignetteParams(strength=strength, center_x=center[0], center_y=center[1], power=power)
    p.validate()
    data = _srgb(img, "vignette")
    if p.strength == 0.0:
        return img
    h, w = img.height, img.width
    cx, cy = p.center_x * (w - 1), p.center_y * (h - 1)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(xs - cx, ys - cy)
    r_max = max(r[0, 0], r[0, -1], r[-1, 0], r[-1, -1])
    if r_max <= 0.0:
        raise ParameterError("vignette", "geometry", (h, w), reason="degenerate image, farthest corner at distance 0")
    mask = 1.0 - p.strength * np.power(r / r_max, p.power)
    return _done(img, data * mask[:, :, None])


def _logistic(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def shadow_coordinate(height: int, width: int, angle_deg: float) -> np.ndarray:
    """Projection of centered pixel coordinates onto (cos a, sin a), rescaled to [-1, 1]."""
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    u = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    v = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    t = (u[None, :] * c + v[:, None] * s) / (abs(c) + abs(s))
    return np.clip(t, -1.0, 1.0)


def apply_shadow(img: RasterImage, angle_deg: float, strength: float, sharpness: float) -> RasterImage:
    """Directional shadow: m = 1 - strength * logistic(sharpness * t). The t > 0 half is shadowed."""
    p = ShadowParams(angle_deg=angle_deg, strength=strength, sharpness=sharpness)
    p.validate()
    data = _srgb(img, "shadow")
    if p.strength == 0.0:
        return img
    t = shadow_coordinate(img.height, img.width, p.angle_deg)
    mask = 1.0 - p.strength * _logistic(p.sharpness * t)
    return _done(img, data * mask[:, :, None])


def grain_noise(shape: Tuple[int, ...], noise_seed: int) -> np.ndarray:
    """Unit gaussian field from a Philox generator keyed by `noise_seed`."""
    rng = np.random.Generator(np.random.Philox(key=int(noise_seed)))
    return rng.standard_normal(shape)


def apply_grain(img: RasterImage, intensity: float, noise_seed: int) -> RasterImage:
    p = GrainParams(intensity=intensity, noise_seed=noise_seed)
    p.validate()
    data = _srgb(img, "grain")
    if p.intensity == 0.0:
        return img
    return _done(img, data + p.intensity * grain_noise(data.shape, p.noise_seed))


def apply_haze(img: RasterImage, alpha: float, haze_color: Tuple[float, float, float] = DEFAULT_HAZE_COLOR) -> RasterImage:
    p = HazeParams(alpha=alpha, haze_color=tuple(haze_color))
    p.validate()
    data = _srgb(img, "haze")
    if p.alpha == 0.0:
        return img
    c = np.asarray(p.haze_color, dtype=np.float64)
    return _done(img, data * (1.0 - p.alpha) + c * p.alpha)


def color_cast_gains(hue_deg: float, strength: float) -> np.ndarray:
    """Mean-centered per-channel gains toward the fully saturated hue."""
    d = np.asarray(colorsys.hsv_to_rgb((hue_deg % 360.0) / 360.0, 1.0, 1.0), dtype=np.float64)
    return 1.0 + strength * (d - d.mean())


def apply_color_cast(img: RasterImage, hue_deg: float, strength: float) -> RasterImage:
    p = ColorCastParams(hue_deg=hue_deg, strength=strength)
    p.validate()
    data = _srgb(img, "color_cast")
    if p.strength == 0.0:
        return img
    return _done(img, data * color_cast_gains(p.hue_deg, p.strength))


def apply_lens_flare(img: RasterImage, center: Tuple[float, float], sigma: float, amplitude: float) -> RasterImage:
    """Additive warm-white gaussian near a frame edge, in normalized coordinates."""
    p = FlareParams(center_x=center[0], center_y=center[1], sigma=sigma, amplitude=amplitude)
    p.validate()
    data = _srgb(img, "flare")
    if p.amplitude == 0.0:
        return img
    xn = np.linspace(0.0, 1.0, img.width)
    yn = np.linspace(0.0, 1.0, img.height)
    d2 = (xn[None, :] - p.center_x) ** 2 + (yn[:, None] - p.center_y) ** 2
    blob = p.amplitude * np.exp(-d2 / (2.0 * p.sigma ** 2))
    return _done(img, data + blob[:, :, None] * np.asarray(FLARE_COLOR))


# ---------------------------------------------------------------- dispatch

_DISPATCH: Dict[OpKind, Callable[[RasterImage, Any], RasterImage]] = {
    OpKind.EXPOSURE: lambda img, p: apply_exposure(img, p.ev),
    OpKind.BRIGHTNESS: lambda img, p: apply_brightness(img, p.percent),
    OpKind.CONTRAST: lambda img, p: apply_contrast(img, p.factor),
    OpKind.GAMMA: lambda img, p: apply_gamma(img, p.gamma),
    OpKind.WARM: lambda img, p: apply_warm(img, p.tint),
    OpKind.COOL: lambda img, p: apply_cool(img, p.tint),
    OpKind.VIGNETTE: lambda img, p: apply_vignette(img, p.strength, (p.center_x, p.center_y), p.power),
    OpKind.SHADOW: lambda img, p: apply_shadow(img, p.angle_deg, p.strength, p.sharpness),
    OpKind.GRAIN: lambda img, p: apply_grain(img, p.intensity, p.noise_seed),
    OpKind.HAZE: lambda img, p: apply_haze(img, p.alpha, p.haze_color),
    OpKind.COLOR_CAST: lambda img, p: apply_color_cast(img, p.hue_deg, p.strength),
    OpKind.FLARE: lambda img, p: apply_lens_flare(img, (p.center_x, p.center_y), p.sigma, p.amplitude),
}


def apply_step(img: RasterImage, kind: OpKind | str, params: OpParams) -> RasterImage:
    """Apply one (kind, params) step; params must be the dataclass registered for `kind`."""
    kind = OpKind(kind)
    expected = PARAMS_TYPES[kind]
    if not isinstance(params, expected):
        raise ContractError(f"{kind.value} expects {expected.__name__}, got {type(params).__name__}")
    logger.debug("apply %s %s", kind.value, params.to_dict())
    return _DISPATCH[kind](img, params)
