"""Patch features: handcrafted descriptors and externally computed embeddings.

Images are divided into a non-overlapping grid of square patches
(trailing rows/columns that do not fill a patch are discarded) and each
patch is described by a unit-norm feature vector. Two sources are
supported: a fast handcrafted 14-dim descriptor computed here, and
precomputed embedding grids loaded from ``.oemb`` files written by an
external extractor. Both yield the same :class:`PatchEmbeddingGrid` type,
so everything downstream is agnostic to where features came from.

.oemb layout (little-endian): magic ``OEMB``, u32 version (=1), u32
grid_h, u32 grid_w, u32 dim, u32 patch_size, then grid_h*grid_w*dim
float32 values in row-major patch order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .imaging import as_image, ensure_parent_dir

__all__ = [
    "PatchEmbeddingGrid",
    "FeatureDescriptor",
    "HandcraftedExtractor",
    "OembDirectoryExtractor",
    "make_extractor",
    "pooled_feature",
    "read_oemb",
    "write_oemb",
]

_OEMB_MAGIC = b"OEMB"
_OEMB_VERSION = 1
_NORM_TOL = 1e-4


@dataclass(eq=False)
class PatchEmbeddingGrid:
    """Per-patch feature vectors for one image.

    ``vectors`` has shape (grid_h, grid_w, dim), float32; every vector is
    unit-norm, except vectors that were exactly zero before normalization,
    which stay zero.
    """

    grid_h: int
    grid_w: int
    dim: int
    patch_size: int
    vectors: np.ndarray

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.dim < 1:
            raise ValueError("feature dimension must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch size must be >= 1")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        expected = (self.grid_h, self.grid_w, self.dim)
        if self.vectors.shape != expected:
            raise ValueError(
                f"vector array shape {self.vectors.shape} != {expected}"
            )


@dataclass(frozen=True)
class FeatureDescriptor:
    """Identifies a feature space: extractor name, dimension, patch size."""

    name: str
    dim: int
    patch_size: int

    @classmethod
    def from_extractor(cls, extractor) -> "FeatureDescriptor":
        return cls(extractor.name, extractor.dim, extractor.patch_size)

    def compatible_with(self, other: "FeatureDescriptor") -> bool:
        # Name is informative only; dim and patch geometry must agree.
        return self.dim == other.dim and self.patch_size == other.patch_size


def _normalize_rows(vecs: np.ndarray) -> np.ndarray:
    """L2-normalize along the last axis; all-zero vectors stay zero."""
    norms = np.linalg.norm(vecs, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return vecs / safe


def pooled_feature(grid: PatchEmbeddingGrid) -> np.ndarray:
    """Image-level feature: mean of patch vectors, re-normalized to unit
    length (all-zero mean stays zero). Returns float64 (dim,)."""
    mean = grid.vectors.reshape(-1, grid.dim).astype(np.float64).mean(axis=0)
    return _normalize_rows(mean)


# ---------------------------------------------------------------------
# Handcrafted descriptor
# ---------------------------------------------------------------------

class HandcraftedExtractor:
    """14-dim per-patch descriptor: mean RGB (3) and per-channel std (3)
    on intensities scaled to [0, 1], plus a magnitude-weighted 8-bin
    gradient-orientation histogram of the luminance channel, all L2
    normalized as one vector.

    Orientation uses Rec. 601 luma, central-difference gradients computed
    within each patch independently, angles folded modulo pi into 8 equal
    bins, and the histogram is averaged by patch area so descriptor scale
    does not depend on patch size.
    """

    name = "handcrafted"
    dim = 14

    def __init__(self, patch_size: int = 16):
        if patch_size < 1:
            raise ValueError("patch size must be >= 1")
        self.patch_size = patch_size

    def extract(self, image: np.ndarray, stem: str | None = None) -> PatchEmbeddingGrid:
        image = as_image(image)
        ps = self.patch_size
        h, w = image.shape[:2]
        gh, gw = h // ps, w // ps
        if gh < 1 or gw < 1:
            raise ValueError(
                f"image {w}x{h} is smaller than one {ps}x{ps} patch"
            )
        rgb = image[: gh * ps, : gw * ps].astype(np.float64) / 255.0
        # (gh, gw, ps, ps, 3) view of the patch grid
        patches = rgb.reshape(gh, ps, gw, ps, 3).transpose(0, 2, 1, 3, 4)

        means = patches.mean(axis=(2, 3))
        stds = patches.std(axis=(2, 3))

        luma = (0.299 * patches[..., 0]
                + 0.587 * patches[..., 1]
                + 0.114 * patches[..., 2])
        if ps == 1:
            hist = np.zeros((gh, gw, 8))
        else:
            gy, gx = np.gradient(luma, axis=(2, 3))
            mag = np.hypot(gx, gy)
            theta = np.mod(np.arctan2(gy, gx), np.pi)
            bins = np.minimum((theta / np.pi * 8.0).astype(np.int64), 7)
            patch_idx = np.arange(gh * gw).reshape(gh, gw, 1, 1)
            flat = (patch_idx * 8 + bins).ravel()
            hist = np.bincount(flat, weights=mag.ravel(), minlength=gh * gw * 8)
            hist = hist.reshape(gh, gw, 8) / (ps * ps)

        feats = np.concatenate([means, stds, hist], axis=-1)
        feats = _normalize_rows(feats)
        return PatchEmbeddingGrid(gh, gw, self.dim, ps, feats.astype(np.float32))


# ---------------------------------------------------------------------
# .oemb files
# ---------------------------------------------------------------------

def write_oemb(grid: PatchEmbeddingGrid, path) -> None:
    """Write a patch embedding grid to ``path`` in .oemb format."""
    path = Path(path)
    ensure_parent_dir(path)
    header = struct.pack(
        "<4sIIIII", _OEMB_MAGIC, _OEMB_VERSION,
        grid.grid_h, grid.grid_w, grid.dim, grid.patch_size,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.vectors, dtype="<f4").tobytes())


def read_oemb(path) -> PatchEmbeddingGrid:
    """Read and validate a .oemb file.

    Raises FormatError on bad magic/version, zero dimensions, payload
    length mismatch, non-finite values, or vectors that are neither
    unit-norm (within 1e-4) nor exactly zero.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header")
    magic, version, gh, gw, dim, ps = struct.unpack_from("<4sIIIII", data, 0)
    if magic != _OEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _OEMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if gh < 1 or gw < 1 or dim < 1 or ps < 1:
        raise FormatError(f"{path}: zero grid/feature dimension")
    expected = 24 + 4 * gh * gw * dim
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload is {len(data)} bytes, expected {expected}"
        )
    vecs = np.frombuffer(data, dtype="<f4", offset=24).reshape(gh, gw, dim)
    if not np.isfinite(vecs).all():
        raise FormatError(f"{path}: non-finite feature values")
    norms = np.linalg.norm(vecs.astype(np.float64), axis=-1)
    bad = (norms != 0.0) & (np.abs(norms - 1.0) > _NORM_TOL)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FormatError(
            f"{path}: vector ({i},{j}) has norm {norms[i, j]:.6f}, "
            "expected unit or zero"
        )
    return PatchEmbeddingGrid(gh, gw, dim, ps, vecs.copy())


class OembDirectoryExtractor:
    """Serves precomputed embeddings from a directory of .oemb files.

    Lookup is by image stem: ``extract(image, stem="x")`` reads
    ``<directory>/x.oemb``. The directory must be non-empty; feature
    dimension and patch size are taken from the first file (sorted by
    name) and enforced on every read.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        files = sorted(self.directory.glob("*.oemb"))
        if not files:
            raise FormatError(f"{self.directory}: no .oemb files found")
        first = read_oemb(files[0])
        self.dim = first.dim
        self.patch_size = first.patch_size
        self.name = f"oemb:{self.directory}"

    def extract(self, image: np.ndarray | None = None,
                stem: str | None = None) -> PatchEmbeddingGrid:
        if stem is None:
            raise ValueError("oemb extraction requires an image stem")
        path = self.directory / f"{stem}.oemb"
        if not path.exists():
            raise FileNotFoundError(f"no embedding for {stem!r}: {path}")
        grid = read_oemb(path)
        if grid.dim != self.dim or grid.patch_size != self.patch_size:
            raise FormatError(
                f"{path}: dim/patch_size ({grid.dim},{grid.patch_size}) "
                f"disagree with directory ({self.dim},{self.patch_size})"
            )
        return grid


def make_extractor(spec: str, patch_size: int = 16):
    """Build an extractor from a CLI-style spec string.

    ``"handcrafted"`` gives the built-in descriptor; ``"oemb:<dir>"``
    serves precomputed embeddings from a directory.
    """
    if spec == "handcrafted":
        return HandcraftedExtractor(patch_size=patch_size)
    if spec.startswith("oemb:"):
        directory = spec[len("oemb:"):]
        if not directory:
            raise ValueError("oemb spec needs a directory: oemb:<dir>")
        return OembDirectoryExtractor(directory)
    raise ValueError(f"unknown feature spec {spec!r}")
