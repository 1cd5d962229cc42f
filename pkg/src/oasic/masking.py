"""Gray masking and occlusion-severity estimation.

Once an occlusion mask is known, the compromised pixels are replaced
with a fixed mid-gray so a classifier sees a neutral signal instead of
the occluder's texture. Severity is simply the mean of the anomaly map:
for a binary map it equals the occluded-pixel fraction exactly, and for
calibrated soft maps it tracks the true coverage closely.
"""
from __future__ import annotations

import numpy as np

from .imaging import as_anomaly_map, as_image, as_mask

__all__ = ["gray_mask", "estimate_severity"]


def gray_mask(image: np.ndarray, mask: np.ndarray, g: int = 127) -> np.ndarray:
    """Replace masked pixels with gray value ``g`` on all channels."""
    image = as_image(image)
    mask = as_mask(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}"
        )
    if not 0 <= g <= 255:
        raise ValueError("gray value must be an 8-bit intensity")
    out = image.copy()
    out[mask == 1] = g
    return out


def estimate_severity(amap: np.ndarray) -> float:
    """Occlusion severity: mean anomaly-map value, in [0, 1]."""
    amap = as_anomaly_map(amap)
    return float(np.mean(amap, dtype=np.float64))
