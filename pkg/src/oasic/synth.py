"""Synthetic occlusion generation.

Occlusion masks are carved out of fractal gradient ("Perlin") noise so the
occluded area forms smooth, spatially coherent blobs rather than
salt-and-pepper pixels. A mask is obtained by thresholding the noise field
at the quantile matching the requested coverage; the threshold rule is
exact, so a mask for coverage ``c`` on an HxW field always contains
``floor(c*H*W)`` occluded pixels. Occluded pixels are then filled either
with a uniform gray value or with a tiled texture image at a random
per-image offset.

All functions are pure: randomness enters only through explicit seeds,
so datasets can be regenerated bit-identically.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .imaging import as_image, as_mask

__all__ = [
    "PerlinParams",
    "GrayFill",
    "TextureFill",
    "FillSpec",
    "perlin_field",
    "mask_from_field",
    "apply_occlusion",
    "occlude_image",
    "synth_dataset",
    "OccludedDataset",
]


@dataclass(frozen=True)
class PerlinParams:
    """Parameters of the fractal gradient-noise field.

    ``base_frequency`` is in cycles per image edge; each further octave
    doubles the frequency and scales amplitude by ``persistence``.
    """

    seed: int
    octaves: int = 4
    persistence: float = 0.5
    base_frequency: float = 4.0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError("persistence must be in (0, 1]")
        if self.base_frequency <= 0.0:
            raise ValueError("base_frequency must be > 0")


@dataclass(frozen=True)
class GrayFill:
    """Fill occluded pixels with a uniform gray value (default mid-gray)."""

    g: int = 127

    def __post_init__(self):
        if not 0 <= self.g <= 255:
            raise ValueError("gray value must be an 8-bit intensity")


@dataclass(frozen=True)
class TextureFill:
    """Fill occluded pixels from a tiled texture image.

    The tiling offset (dx, dy) is drawn once per image from
    ``offset_seed``, so repeated occlusions of one image are identical.
    """

    texture: np.ndarray
    offset_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "texture", as_image(self.texture))
        if self.offset_seed < 0:
            raise ValueError("offset_seed must be non-negative")


FillSpec = GrayFill | TextureFill


# ---------------------------------------------------------------------
# Gradient noise
# ---------------------------------------------------------------------

def _fade(t):
    # Perlin's quintic smoothstep: zero first and second derivative at 0, 1.
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _octave_noise(width, height, freq, seed):
    """One octave of 2D gradient noise, sampled at pixel centers."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    angles = rng.uniform(0.0, 2.0 * np.pi, 256)
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    perm = rng.permutation(256)

    u = (np.arange(width) + 0.5) / width * freq
    v = (np.arange(height) + 0.5) / height * freq
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    fu = u - iu
    fv = v - iv

    def corner(ox, oy):
        hx = perm[(iu + ox) & 255]
        h = perm[(hx[None, :] + (iv + oy)[:, None]) & 255]
        g = grads[h]
        return g[..., 0] * (fu - ox)[None, :] + g[..., 1] * (fv - oy)[:, None]

    n00 = corner(0, 0)
    n10 = corner(1, 0)
    n01 = corner(0, 1)
    n11 = corner(1, 1)
    wu = _fade(fu)[None, :]
    wv = _fade(fv)[:, None]
    nx0 = n00 + wu * (n10 - n00)
    nx1 = n01 + wu * (n11 - n01)
    return nx0 + wv * (nx1 - nx0)


def perlin_field(width: int, height: int, params: PerlinParams) -> np.ndarray:
    """Fractal gradient-noise field of shape (height, width) in [0, 1].

    The field sums ``params.octaves`` gradient-noise layers with amplitude
    ``persistence**k`` and frequency ``base_frequency * 2**k``, then
    min-max normalizes the result so (non-constant fields) span [0, 1]
    exactly. Deterministic for fixed params.
    """
    if width < 1 or height < 1:
        raise ValueError("field dimensions must be >= 1")
    total = np.zeros((height, width))
    for k in range(params.octaves):
        freq = params.base_frequency * (2.0 ** k)
        amp = params.persistence ** k
        octave_seed = [int(params.seed), k]
        total += amp * _octave_noise(width, height, freq, octave_seed)
    lo = total.min()
    hi = total.max()
    if hi == lo:
        return np.zeros_like(total)
    return (total - lo) / (hi - lo)


# ---------------------------------------------------------------------
# Masks and fills
# ---------------------------------------------------------------------

def mask_from_field(field: np.ndarray, coverage: float) -> np.ndarray:
    """Threshold a scalar field into a mask with exact pixel coverage.

    Exactly ``floor(coverage * H * W)`` pixels are set: every pixel
    strictly above the (1 - coverage)-quantile of the field, plus pixels
    tied at the quantile value taken in ascending row-major order until
    the count is reached.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2 or field.size == 0:
        raise ValueError("field must be a non-empty 2D array")
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must lie in [0, 1]")
    n = field.size
    k = int(math.floor(coverage * n))
    mask = np.zeros(n, dtype=np.uint8)
    if k > 0:
        flat = field.ravel()
        q = np.partition(flat, n - k)[n - k]
        above = flat > q
        mask[above] = 1
        short = k - int(above.sum())
        if short > 0:
            ties = np.flatnonzero(flat == q)[:short]
            mask[ties] = 1
    return mask.reshape(field.shape)


def apply_occlusion(image: np.ndarray, mask: np.ndarray, fill: FillSpec) -> np.ndarray:
    """Replace masked pixels of ``image`` according to ``fill``.

    Gray fill sets all channels of occluded pixels to ``g``. Texture fill
    copies pixel (i, j) from the tiled texture at (i + dy, j + dx) modulo
    the texture size, with (dx, dy) drawn once from the fill's offset
    seed. Visible pixels are returned byte-identical.
    """
    image = as_image(image)
    mask = as_mask(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}"
        )
    out = image.copy()
    sel = mask == 1
    if not sel.any():
        return out
    if isinstance(fill, GrayFill):
        out[sel] = fill.g
    elif isinstance(fill, TextureFill):
        tex = fill.texture
        th, tw = tex.shape[:2]
        rng = np.random.default_rng(np.random.SeedSequence(fill.offset_seed))
        dx = int(rng.integers(tw))
        dy = int(rng.integers(th))
        h, w = image.shape[:2]
        rows = (np.arange(h) + dy) % th
        cols = (np.arange(w) + dx) % tw
        tiled = tex[np.ix_(rows, cols)]
        out[sel] = tiled[sel]
    else:
        raise TypeError(f"unsupported fill spec: {fill!r}")
    return out


def occlude_image(image: np.ndarray, coverage: float, params: PerlinParams,
                  fill: FillSpec) -> tuple[np.ndarray, np.ndarray]:
    """Occlude one image at the given coverage; returns (image, mask)."""
    image = as_image(image)
    h, w = image.shape[:2]
    field = perlin_field(w, h, params)
    mask = mask_from_field(field, coverage)
    return apply_occlusion(image, mask, fill), mask


# ---------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------

@dataclass
class OccludedDataset:
    """A labeled image set with synthetic occlusions and their ground truth."""

    images: list[np.ndarray]
    labels: list[str]
    coverages: list[float]  # realized occluded fraction per image
    masks: list[np.ndarray]
    seeds: list[int]        # per-image seed used for coverage/field/offset


def _per_image_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def synth_dataset(images, labels, p_max: float, params: PerlinParams,
                  fill: FillSpec, seed: int) -> OccludedDataset:
    """Occlude a labeled image set with per-image coverage ~ U(0, p_max).

    Each image i draws its coverage, noise field and (for texture fills)
    tiling offset from a seed derived from (seed, i), so the whole dataset
    is reproducible and any single image can be regenerated alone. The
    realized coverage (exact occluded fraction) is recorded per image.
    """
    images = list(images)
    labels = list(labels)
    if not images:
        raise ValueError("input image set is empty")
    if len(labels) != len(images):
        raise ValueError("labels length does not match image count")
    if not 0.0 <= p_max <= 1.0:
        raise ValueError("p_max must lie in [0, 1]")

    out_images: list[np.ndarray] = []
    coverages: list[float] = []
    masks: list[np.ndarray] = []
    seeds: list[int] = []
    for i, image in enumerate(images):
        img_seed = _per_image_seed(seed, i)
        rng = np.random.default_rng(img_seed)
        coverage = float(rng.uniform(0.0, p_max)) if p_max > 0.0 else 0.0
        img_params = dataclasses.replace(params, seed=int(rng.integers(2 ** 63)))
        img_fill = fill
        if isinstance(fill, TextureFill):
            img_fill = dataclasses.replace(fill, offset_seed=int(rng.integers(2 ** 63)))
        occluded, mask = occlude_image(image, coverage, img_params, img_fill)
        out_images.append(occluded)
        coverages.append(float(int(mask.sum()) / mask.size))
        masks.append(mask)
        seeds.append(img_seed)
    return OccludedDataset(out_images, labels, coverages, masks, seeds)
