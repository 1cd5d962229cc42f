"""Raster conventions and bit-exact file IO.

Array conventions used throughout the package:

* image        -- ``(H, W, 3)`` uint8, row-major RGB
* mask         -- ``(H, W)`` uint8 with values in {0, 1}; 1 = occluded
* anomaly map  -- ``(H, W)`` float array with every value in [0, 1]

Images and masks are exchanged as 8-bit PNG (RGB or grayscale; grayscale
images are promoted to RGB on load). Anomaly maps use a small raw binary
format (".amap", little-endian) so that severity estimation stays exact:

    magic "AMAP" | version u32 = 1 | height u32 | width u32 | H*W float32

All loaders reject files whose declared dimensions disagree with the
payload size. Everything here is a pure function of its inputs; the
returned arrays are owned by the caller and never shared.
"""
from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import FormatError

__all__ = [
    "as_image",
    "as_mask",
    "as_anomaly_map",
    "read_image",
    "write_image",
    "read_mask",
    "write_mask",
    "read_amap",
    "write_amap",
]

_AMAP_MAGIC = b"AMAP"
_AMAP_VERSION = 1


# ---------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------

def as_image(arr) -> np.ndarray:
    """Validate ``arr`` as an (H, W, 3) uint8 RGB image and return it."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image dimensions must be >= 1")
    if arr.dtype != np.uint8:
        raise ValueError(f"image dtype must be uint8, got {arr.dtype}")
    return arr


def as_mask(arr) -> np.ndarray:
    """Validate ``arr`` as an (H, W) binary mask of dtype uint8."""
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"mask must have shape (H, W), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("mask dimensions must be >= 1")
    if arr.dtype != np.uint8:
        raise ValueError(f"mask dtype must be uint8 or bool, got {arr.dtype}")
    if arr.max(initial=0) > 1:
        raise ValueError("mask values must be 0 or 1")
    return arr


def as_anomaly_map(arr) -> np.ndarray:
    """Validate ``arr`` as an (H, W) float anomaly map with values in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"anomaly map must have shape (H, W), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("anomaly map dimensions must be >= 1")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("anomaly map contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("anomaly map values must lie in [0, 1]")
    return arr


# ---------------------------------------------------------------------
# PNG image IO
# ---------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB or grayscale PNG as an (H, W, 3) uint8 array.

    Grayscale files are promoted to RGB. Any other mode (palette, alpha,
    16-bit, ...) is rejected with :class:`FormatError`.
    """
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            if mode == "L":
                im = im.convert("RGB")
            elif mode != "RGB":
                raise FormatError(
                    f"{path}: unsupported image mode {mode!r}; "
                    "expected 8-bit RGB or grayscale"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image file") from exc
    return as_image(arr)


def write_image(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) uint8 array as an 8-bit RGB PNG (lossless)."""
    image = as_image(image)
    ensure_parent_dir(path)
    PILImage.fromarray(image, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------
# Mask IO (8-bit grayscale PNG; 1 -> 255, 0 -> 0; decode >=128 -> 1)
# ---------------------------------------------------------------------

def read_mask(path) -> np.ndarray:
    """Read a binary mask from an 8-bit grayscale PNG.

    Pixels >= 128 decode to 1, everything else to 0, so masks written by
    third-party tools as 255/0 interoperate.
    """
    try:
        with PILImage.open(path) as im:
            if im.mode != "L":
                raise FormatError(
                    f"{path}: mask file must be 8-bit grayscale, got mode {im.mode!r}"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image file") from exc
    return as_mask((arr >= 128).astype(np.uint8))


def write_mask(mask: np.ndarray, path) -> None:
    """Write a binary mask as an 8-bit grayscale PNG (1 -> 255, 0 -> 0)."""
    mask = as_mask(mask)
    ensure_parent_dir(path)
    PILImage.fromarray(mask * np.uint8(255), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------
# Anomaly map IO (".amap")
# ---------------------------------------------------------------------

def write_amap(amap: np.ndarray, path) -> None:
    """Write an anomaly map to ``path`` in the raw ".amap" format.

    Values are stored as little-endian float32, row-major. Raises
    :class:`ValueError` if any value lies outside [0, 1].
    """
    amap = as_anomaly_map(amap)
    h, w = amap.shape
    payload = np.ascontiguousarray(amap, dtype="<f4").tobytes()
    ensure_parent_dir(path)
    with open(path, "wb") as f:
        f.write(_AMAP_MAGIC)
        f.write(struct.pack("<III", _AMAP_VERSION, h, w))
        f.write(payload)


def read_amap(path) -> np.ndarray:
    """Read an ".amap" file back into an (H, W) float32 array.

    Round-trips :func:`write_amap` exactly at float32 precision.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != _AMAP_MAGIC:
        raise FormatError(f"{path}: bad magic, not an .amap file")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != _AMAP_VERSION:
        raise FormatError(f"{path}: unsupported .amap version {version}")
    if h < 1 or w < 1:
        raise FormatError(f"{path}: invalid dimensions {h}x{w}")
    expected = 16 + 4 * h * w
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload size {len(data) - 16} disagrees with "
            f"declared dimensions {h}x{w}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w)
    values = values.astype(np.float32)  # own, native-order copy
    if not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0:
        raise FormatError(f"{path}: anomaly values outside [0, 1]")
    return values


def ensure_parent_dir(path) -> None:
    """Create the parent directory of ``path`` if it does not exist."""
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
