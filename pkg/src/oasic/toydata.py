"""Deterministic toy dataset and procedural occluder textures.

The toy classes are vertical sinusoidal stripe patterns that differ in
hue and spatial frequency, plus small per-image phase jitter and pixel
noise — separable enough that classification failures under occlusion
are attributable to the occlusion, not the task.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .synth import PerlinParams, perlin_field

__all__ = ["ToySplit", "ToyDataset", "gen_toy_dataset", "bundled_texture",
           "TEXTURE_NAMES"]

TEXTURE_NAMES = ("leaf", "smoke")


@dataclass
class ToySplit:
    images: list[np.ndarray]
    labels: list[str]
    names: list[str]


@dataclass
class ToyDataset:
    train: ToySplit
    test: ToySplit
    classes: list[str]


def _render(c: int, n_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    # Saturation is kept moderate so class hues sit close enough together
    # that heavy occlusion genuinely erodes the margin between them.
    hue = c / n_classes
    hi = np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.90))
    lo = np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.35))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    x = np.arange(size)
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * (c + 2) * x / size + phase)
    row = lo[None, :] + (hi - lo)[None, :] * wave[:, None]   # (size, 3)
    img = np.broadcast_to(row[None, :, :], (size, size, 3)) * 255.0
    noise = rng.integers(-8, 9, (size, size, 3))
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def gen_toy_dataset(classes: int = 8, per_class: int = 40, size: int = 128,
                    seed: int = 0) -> ToyDataset:
    """Striped-pattern classification set with a 75/25 train/test split.

    Class c renders vertical stripes at frequency c+2 cycles in hue
    c/classes; every image gets its own phase and +-8 intensity noise
    from a seed derived from (seed, class, index). The split is by index
    within each class (first 75% train), so it is stable under reruns.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 4:
        raise ValueError("need at least four images per class for the split")
    if size < 1:
        raise ValueError("image size must be >= 1")

    class_names = [f"c{c}" for c in range(classes)]
    train = ToySplit([], [], [])
    test = ToySplit([], [], [])
    n_train = int(per_class * 0.75)
    for c in range(classes):
        for i in range(per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), c, i]))
            img = _render(c, classes, size, rng)
            split = train if i < n_train else test
            split.images.append(img)
            split.labels.append(class_names[c])
            split.names.append(f"c{c}_{i:03d}")
    return ToyDataset(train=train, test=test, classes=class_names)


def bundled_texture(name: str, size: int = 256) -> np.ndarray:
    """Procedural occluder texture, deterministic for a given (name, size).

    ``"leaf"``: dark-green foliage-like blobs with speckle.
    ``"smoke"``: light, low-saturation gradient-noise haze.
    """
    if name == "leaf":
        blobs = perlin_field(size, size, PerlinParams(
            seed=101, octaves=3, persistence=0.55, base_frequency=6.0))
        veins = perlin_field(size, size, PerlinParams(
            seed=104, octaves=5, persistence=0.6, base_frequency=24.0))
        dark = np.array([5.0, 14.0, 4.0])
        light = np.array([18.0, 42.0, 14.0])
        base = np.where((blobs > 0.5)[..., None], light, dark)
        img = base * (0.6 + 0.8 * veins)[..., None]
        speckle = np.random.default_rng(103).integers(-45, 46, (size, size, 3))
        return np.clip(img + speckle, 0, 255).astype(np.uint8)
    if name == "smoke":
        haze = perlin_field(size, size, PerlinParams(
            seed=201, octaves=4, persistence=0.5, base_frequency=3.0))
        v = 200.0 + 45.0 * haze
        return np.clip(np.stack([v, v, v], axis=-1), 0, 255).astype(np.uint8)
    raise ValueError(f"unknown texture {name!r}; choose from {TEXTURE_NAMES}")
