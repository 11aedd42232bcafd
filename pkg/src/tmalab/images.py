"""Image containers and patch extraction for spot images.

Images use a top-left origin with integer pixel centers; coordinates are
(x, y) = (column, row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

# Integer luminance weights (ITU-R BT.601 scaled by 1000), applied with
# half-up rounding so the conversion is exactly reproducible.
_LUMA_R = 299
_LUMA_G = 587
_LUMA_B = 114


class DataError(Exception):
    """Unusable input data (unreadable images, malformed files, bad records)."""


@dataclass(frozen=True)
class GrayImage:
    """Single-channel 8-bit image."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.size == 0:
            raise ValueError("gray image must be a non-empty 2-D array")
        if p.dtype != np.uint8:
            if not np.issubdtype(p.dtype, np.integer):
                raise ValueError("gray image pixels must be integers in [0, 255]")
            if p.min() < 0 or p.max() > 255:
                raise ValueError("gray image pixels must be in [0, 255]")
            p = p.astype(np.uint8)
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class RgbImage:
    """Three-channel 8-bit image, channel order RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] == 0 or p.shape[1] == 0:
            raise ValueError("rgb image must be a non-empty (h, w, 3) array")
        if p.dtype != np.uint8:
            if not np.issubdtype(p.dtype, np.integer):
                raise ValueError("rgb image pixels must be integers in [0, 255]")
            if p.min() < 0 or p.max() > 255:
                raise ValueError("rgb image pixels must be in [0, 255]")
            p = p.astype(np.uint8)
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Patch:
    """Square window of intensities centred on an image position.

    Pixels may be float valued: patches produced by photometric transforms
    keep their transformed values unclamped.
    """

    pixels: np.ndarray
    center: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("patch must be square")
        if p.shape[0] % 2 != 1:
            raise ValueError("patch window must be odd")
        object.__setattr__(self, "pixels", p)

    @property
    def window(self) -> int:
        return self.pixels.shape[0]


def load_image(path) -> RgbImage:
    """Load a PNG or 8-bit TIFF file as an RGB image."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "TIFF"):
                raise DataError(f"unsupported format {im.format!r} for {path}")
            if im.format == "TIFF" and im.mode not in ("L", "P", "RGB", "RGBA"):
                raise DataError(f"only 8-bit TIFF is supported, got mode {im.mode!r}")
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"cannot read image file {path}") from None
    except UnidentifiedImageError:
        raise DataError(f"cannot decode image file {path}") from None
    if arr.size == 0:
        raise DataError(f"zero-sized image {path}")
    return RgbImage(arr)


def save_image(img, path) -> None:
    """Write an image to PNG or TIFF depending on the file suffix."""
    if isinstance(img, GrayImage):
        pil = Image.fromarray(np.asarray(img.pixels), mode="L")
    elif isinstance(img, RgbImage):
        pil = Image.fromarray(np.asarray(img.pixels), mode="RGB")
    else:
        raise TypeError("expected GrayImage or RgbImage")
    pil.save(path)


def to_gray(img: RgbImage) -> GrayImage:
    """Convert RGB to single channel with fixed integer luminance weights."""
    p = img.pixels.astype(np.int64)
    gray = (_LUMA_R * p[:, :, 0] + _LUMA_G * p[:, :, 1] + _LUMA_B * p[:, :, 2] + 500) // 1000
    return GrayImage(gray.astype(np.uint8))


def mirror_pad(img: GrayImage, margin: int) -> np.ndarray:
    """Reflect the image content across its borders by `margin` pixels."""
    h, w = img.pixels.shape
    if margin > min(h, w) - 1:
        raise ValueError("padding margin exceeds image size")
    return np.pad(img.pixels, margin, mode="reflect")


def extract_patch(img: GrayImage, center: tuple[int, int], window: int) -> Patch:
    """Extract a window x window patch centred at (x, y).

    Patches overlapping the image border are completed by mirroring the
    image content, so any in-bounds center is valid.
    """
    if window % 2 != 1:
        raise ValueError("window must be odd")
    x, y = center
    h, w = img.pixels.shape
    if window > 2 * min(h, w):
        raise ValueError("window larger than twice the image dimension")
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"center {center} outside image bounds {w}x{h}")
    r = window // 2
    padded = mirror_pad(img, r)
    # padded[y + r, x + r] is the original pixel (x, y)
    block = padded[y : y + window, x : x + window]
    return Patch(block.copy(), center=(x, y))
