"""
Raster images for the lighting pipeline.

A RasterImage is an immutable H x W x 3 float32 array tagged with its color
space. Samples stay in [0, 1] across every public function; conversion to
8-bit only happens when saving or hashing.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, ImageIOError

logger = logging.getLogger(__name__)

# IEC 61966-2-1 piecewise curve
_A = 0.055
_B = 12.92
_SRGB_KNEE = 0.04045
_LINEAR_KNEE = 0.0031308
_P = 2.4

SUPPORTED_FORMATS = {"PNG": (".png",), "JPEG": (".jpg", ".jpeg")}


class ColorSpace(str, Enum):
    SRGB = "srgb"
    LINEAR = "linear"


@dataclass(frozen=True)
class PixelRgb:
    r: float
    g: float
    b: float

    def __post_init__(self):
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ContractError(f"PixelRgb.{name}={v!r} outside [0, 1]")

    def __iter__(self) -> Iterator[float]:
        return iter((self.r, self.g, self.b))

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b], dtype=np.float32)


@dataclass(frozen=True, eq=False)
class RasterImage:
    data: np.ndarray
    space: ColorSpace = ColorSpace.SRGB

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractError(f"RasterImage expects H x W x 3 data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError(f"RasterImage needs at least one pixel, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("RasterImage samples must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ContractError("RasterImage samples must lie in [0, 1]; clamp first")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "space", ColorSpace(self.space))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return 3

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, space: ColorSpace | None = None) -> "RasterImage":
        """New image with the same tag (or `space`), clamping `data` into [0, 1]."""
        return RasterImage(clamp01(data), self.space if space is None else space)

    def pixel(self, x: int, y: int) -> PixelRgb:
        r, g, b = (float(v) for v in self.data[y, x])
        return PixelRgb(r, g, b)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.data, other.data)

    @classmethod
    def filled(cls, height: int, width: int, rgb: Tuple[float, float, float],
               space: ColorSpace = ColorSpace.SRGB) -> "RasterImage":
        data = np.empty((height, width, 3), dtype=np.float32)
        data[...] = np.asarray(rgb, dtype=np.float32)
        return cls(data, space)


def _require(img: RasterImage, space: ColorSpace, op: str) -> None:
    if img.space != space:
        raise ContractError(f"{op} expects a {space.value} image, got {img.space.value}")


def srgb_eotf(s: np.ndarray) -> np.ndarray:
    """sRGB-encoded samples to linear light; accepts any array."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= _SRGB_KNEE, s / _B, ((s + _A) / (1.0 + _A)) ** _P)


def srgb_oetf(v: np.ndarray) -> np.ndarray:
    """Linear light to sRGB encoding; negative inputs are treated as zero."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    return np.where(v <= _LINEAR_KNEE, v * _B, (1.0 + _A) * v ** (1.0 / _P) - _A)


def srgb_to_linear(img: RasterImage) -> RasterImage:
    _require(img, ColorSpace.SRGB, "srgb_to_linear")
    return img.with_data(srgb_eotf(img.data), ColorSpace.LINEAR)


def linear_to_srgb(img: RasterImage) -> RasterImage:
    _require(img, ColorSpace.LINEAR, "linear_to_srgb")
    return img.with_data(srgb_oetf(img.data), ColorSpace.SRGB)


def clamp01(data: np.ndarray) -> np.ndarray:
    """Samples clipped into [0, 1]. NaN passes through for RasterImage to reject."""
    return np.clip(np.asarray(data), 0.0, 1.0)


def to_u8(img: RasterImage) -> np.ndarray:
    # round half up
    return np.floor(np.clip(img.data.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_u8(arr: np.ndarray, space: ColorSpace = ColorSpace.SRGB) -> RasterImage:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ContractError(f"from_u8 expects uint8 data, got {arr.dtype}")
    return RasterImage(arr.astype(np.float32) / np.float32(255.0), space)


def pixel_digest(img: RasterImage) -> str:
    """SHA-256 over the 8-bit pixel buffer (not the encoded file bytes)."""
    u8 = np.ascontiguousarray(to_u8(img))
    h = hashlib.sha256()
    h.update(f"{img.height}x{img.width}x3;".encode("ascii"))
    h.update(u8.tobytes())
    return h.hexdigest()


def _format_for_suffix(path: Path) -> str:
    suffix = path.suffix.lower()
    for fmt, suffixes in SUPPORTED_FORMATS.items():
        if suffix in suffixes:
            return fmt
    raise ImageIOError(f"unsupported image format {suffix!r} for {path} (PNG or JPEG only)")


def load_image(path: str | Path) -> RasterImage:
    """Decode a PNG/JPEG into an sRGB-tagged image.

    Grayscale is replicated to three channels and alpha is dropped.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise ImageIOError(f"{path}: unsupported format {fmt} (PNG or JPEG only)")
            if im.mode not in ("RGB", "L", "RGBA", "LA", "P", "I;16", "I", "CMYK"):
                raise ImageIOError(f"{path}: unsupported pixel mode {im.mode}")
            if im.mode in ("I;16", "I"):
                # 16-bit grayscale: scale down before replication
                arr16 = np.asarray(im, dtype=np.float64)
                gray = np.clip(np.floor(arr16 / 257.0 + 0.5), 0, 255).astype(np.uint8)
                rgb = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                if im.mode in ("L", "LA"):
                    logger.debug("%s: grayscale input replicated to RGB", path)
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as e:
        raise ImageIOError(f"image not found: {path}") from e
    except UnidentifiedImageError as e:
        raise ImageIOError(f"{path}: not a readable image") from e
    except OSError as e:
        if isinstance(e, ImageIOError):
            raise
        raise ImageIOError(f"{path}: {e}") from e
    return from_u8(rgb)


def save_image(img: RasterImage, path: str | Path, quality: int = 95) -> Path:
    """Encode an sRGB image as PNG or JPEG, chosen by the file suffix."""
    path = Path(path)
    _require(img, ColorSpace.SRGB, "save_image")
    fmt = _format_for_suffix(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil = Image.fromarray(to_u8(img))
    try:
        if fmt == "JPEG":
            pil.save(path, format=fmt, quality=quality)
        else:
            pil.save(path, format=fmt)
    except OSError as e:
        raise ImageIOError(f"cannot write {path}: {e}") from e
    return path
