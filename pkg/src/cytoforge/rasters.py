"""8-bit RGB raster helpers.

Images are plain ``numpy.uint8`` arrays of shape ``(height, width, 3)``,
row-major, which is the in-memory layout every module works with.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError

# slide exports are far larger than PIL's decompression-bomb default
Image.MAX_IMAGE_PIXELS = None


def as_rgb(pixels) -> np.ndarray:
    """Validate and return ``pixels`` as a contiguous ``(H, W, 3)`` uint8 array."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) RGB array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"image must be at least 1x1, got {arr.shape[1]}x{arr.shape[0]}")
    if arr.dtype != np.uint8:
        raise DimensionError(f"expected uint8 pixels, got {arr.dtype}")
    return np.ascontiguousarray(arr)


def from_buffer(buffer: bytes, width: int, height: int) -> np.ndarray:
    """Wrap a row-major RGB byte buffer; its length must be ``width * height * 3``."""
    if width < 1 or height < 1:
        raise DimensionError("width and height must be >= 1")
    if len(buffer) != width * height * 3:
        raise DimensionError(
            f"buffer holds {len(buffer)} bytes, expected {width * height * 3} for {width}x{height} RGB"
        )
    return np.frombuffer(buffer, dtype=np.uint8).reshape(height, width, 3).copy()


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(pixels: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_rgb(pixels), mode="RGB").save(path, format="PNG")
