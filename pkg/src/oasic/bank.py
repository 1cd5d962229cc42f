"""Reference memory bank and anomaly-map scoring.

The bank holds the patch vectors of one reference image per class (the
image whose pooled embedding is most similar to its class centroid). A
test patch's raw anomaly score is its cosine distance to the nearest
bank entry; calibration maps raw distances into [0, 1] by an affine
stretch between the median clean-patch distance (a_lo) and the 95th
percentile of truly-occluded-patch distances (a_hi). Patch-level scores
are bilinearly upsampled to pixel resolution.

.bank layout (little-endian): magic ``OBNK``, u32 version (=1), u32 dim,
u32 patch_size, u32 entry count, f32 a_lo, f32 a_hi (both NaN when
uncalibrated), a label table (u32 count, then length-prefixed UTF-8
strings), one u32 label index per entry, then count*dim float32 entries.
The extractor name is not persisted.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCalibrationError, FormatError
from .features import FeatureDescriptor, PatchEmbeddingGrid, pooled_feature
from .imaging import as_image, as_mask, ensure_parent_dir

__all__ = [
    "MemoryBank",
    "build_bank",
    "raw_score",
    "score_image",
    "calibrate",
    "calibration_from_distances",
    "upsample_patch_grid",
    "read_bank",
    "write_bank",
]

_BANK_MAGIC = b"OBNK"
_BANK_VERSION = 1
_NORM_TOL = 1e-4


@dataclass
class MemoryBank:
    """Reference patch vectors plus optional score calibration."""

    entries: np.ndarray          # (N, dim) float32, unit or zero rows
    entry_labels: list[str]      # source class per entry, length N
    descriptor: FeatureDescriptor
    a_lo: float | None = None
    a_hi: float | None = None
    # Chosen reference image index per class; in-memory only, not persisted.
    reference_indices: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2 or self.entries.shape[0] == 0:
            raise ValueError("bank must hold a non-empty (N, dim) entry array")
        if self.entries.shape[1] != self.descriptor.dim:
            raise ValueError("entry dimension disagrees with descriptor")
        if len(self.entry_labels) != self.entries.shape[0]:
            raise ValueError("entry_labels length does not match entries")
        if (self.a_lo is None) != (self.a_hi is None):
            raise ValueError("a_lo and a_hi must be set together")
        if self.a_lo is not None and not self.a_lo < self.a_hi:
            raise ValueError("calibration requires a_lo < a_hi")

    @property
    def calibrated(self) -> bool:
        return self.a_lo is not None


def build_bank(images, labels, extractor, stems=None) -> MemoryBank:
    """Select one reference image per class and bank its patch vectors.

    The reference is the image whose pooled embedding has the highest
    cosine similarity to the (re-normalized) mean pooled embedding of its
    class; ties go to the lowest image index. Entries are stored class by
    class in sorted label order, patches in row-major order.
    """
    images = list(images)
    labels = [str(s) for s in labels]
    if not images:
        raise ValueError("input image set is empty")
    if len(labels) != len(images):
        raise ValueError("labels length does not match image count")
    if stems is None:
        stems = [None] * len(images)

    grids: dict[int, PatchEmbeddingGrid] = {}
    pooled: dict[int, np.ndarray] = {}
    entry_rows = []
    entry_labels: list[str] = []
    reference_indices: dict[str, int] = {}
    for cls in sorted(set(labels)):
        idxs = [i for i, s in enumerate(labels) if s == cls]
        for i in idxs:
            if i not in grids:
                grids[i] = extractor.extract(images[i], stem=stems[i])
                pooled[i] = pooled_feature(grids[i])
        centroid = np.mean([pooled[i] for i in idxs], axis=0)
        norm = np.linalg.norm(centroid)
        if norm > 0.0:
            centroid = centroid / norm
        sims = np.array([pooled[i] @ centroid for i in idxs])
        best = idxs[int(np.argmax(sims))]  # first max = lowest index
        reference_indices[cls] = best
        g = grids[best]
        entry_rows.append(g.vectors.reshape(-1, g.dim))
        entry_labels.extend([cls] * (g.grid_h * g.grid_w))

    descriptor = FeatureDescriptor.from_extractor(extractor)
    return MemoryBank(
        entries=np.concatenate(entry_rows, axis=0),
        entry_labels=entry_labels,
        descriptor=descriptor,
        reference_indices=reference_indices,
    )


def raw_score(bank: MemoryBank, grid: PatchEmbeddingGrid) -> np.ndarray:
    """Cosine distance from each patch to its nearest bank entry.

    Returns a (grid_h, grid_w) float64 array in [0, 2]; a zero test
    vector is at distance exactly 1 from every entry.
    """
    if grid.dim != bank.descriptor.dim:
        raise ValueError(
            f"grid dim {grid.dim} != bank dim {bank.descriptor.dim}"
        )
    vecs = grid.vectors.reshape(-1, grid.dim).astype(np.float64)
    sims = vecs @ bank.entries.astype(np.float64).T
    d = 1.0 - sims.max(axis=1)
    # Float dust can push a perfect self-match cosine past 1; clamp at 0.
    np.maximum(d, 0.0, out=d)
    return d.reshape(grid.grid_h, grid.grid_w)


def upsample_patch_grid(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly upsample a patch-level grid to pixel resolution.

    Pixel centers map to fractional grid coordinates (align-corners
    false); coordinates beyond the outermost patch centers clamp to the
    edge value, so corner pixels equal their corner patch exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("values must be a non-empty 2D array")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    gh, gw = values.shape

    def axis_coords(n_out, n_grid):
        c = (np.arange(n_out) + 0.5) * n_grid / n_out - 0.5
        c = np.clip(c, 0.0, n_grid - 1.0)
        i0 = np.floor(c).astype(np.int64)
        i0 = np.minimum(i0, n_grid - 1)
        i1 = np.minimum(i0 + 1, n_grid - 1)
        return i0, i1, c - i0

    y0, y1, fy = axis_coords(out_h, gh)
    x0, x1, fx = axis_coords(out_w, gw)
    fy = fy[:, None]
    fx = fx[None, :]
    return (values[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + values[np.ix_(y0, x1)] * (1 - fy) * fx
            + values[np.ix_(y1, x0)] * fy * (1 - fx)
            + values[np.ix_(y1, x1)] * fy * fx)


def score_image(bank: MemoryBank, image: np.ndarray, extractor,
                stem: str | None = None) -> np.ndarray:
    """Pixel-level anomaly map in [0, 1] for one image.

    Raw nearest-entry distances are calibrated by
    clamp((d - a_lo) / (a_hi - a_lo), 0, 1) and bilinearly upsampled to
    the image's resolution. The bank must be calibrated.
    """
    if not bank.calibrated:
        raise ValueError("bank is not calibrated; run calibration first")
    image = as_image(image)
    grid = extractor.extract(image, stem=stem)
    d = raw_score(bank, grid)
    patch_scores = np.clip((d - bank.a_lo) / (bank.a_hi - bank.a_lo), 0.0, 1.0)
    h, w = image.shape[:2]
    return upsample_patch_grid(patch_scores, h, w)


def _patch_center_truth(mask: np.ndarray, grid: PatchEmbeddingGrid) -> np.ndarray:
    """Per-patch occlusion truth: the mask value at each patch's center pixel."""
    h, w = mask.shape
    cy = np.minimum(((np.arange(grid.grid_h) + 0.5) * h / grid.grid_h).astype(np.int64), h - 1)
    cx = np.minimum(((np.arange(grid.grid_w) + 0.5) * w / grid.grid_w).astype(np.int64), w - 1)
    return mask[np.ix_(cy, cx)] == 1


def calibration_from_distances(clean: np.ndarray, occluded: np.ndarray) -> tuple[float, float]:
    """Calibration interval from raw distance samples.

    a_lo is the median of clean-patch distances; a_hi the 95th percentile
    of truly-occluded-patch distances (linear interpolation). Raises
    DegenerateCalibrationError when a_hi <= a_lo.
    """
    clean = np.asarray(clean, dtype=np.float64).ravel()
    occluded = np.asarray(occluded, dtype=np.float64).ravel()
    if clean.size == 0 or occluded.size == 0:
        raise ValueError("calibration needs both clean and occluded samples")
    a_lo = float(np.median(clean))
    a_hi = float(np.percentile(occluded, 95))
    if not a_lo < a_hi:
        raise DegenerateCalibrationError(
            f"clean and occluded distances are not separable "
            f"(a_lo={a_lo:.6g}, a_hi={a_hi:.6g})"
        )
    return a_lo, a_hi


def calibrate(bank: MemoryBank, clean_images, occluded_images, occlusion_masks,
              extractor, clean_stems=None, occluded_stems=None) -> MemoryBank:
    """Fit the (a_lo, a_hi) score calibration; returns a new bank.

    Clean distances pool every patch of every clean image. Occluded
    distances keep only patches whose center pixel falls inside the
    ground-truth occlusion mask.
    """
    clean_images = list(clean_images)
    occluded_images = list(occluded_images)
    occlusion_masks = list(occlusion_masks)
    if len(occluded_images) != len(occlusion_masks):
        raise ValueError("occluded image and mask counts differ")
    if clean_stems is None:
        clean_stems = [None] * len(clean_images)
    if occluded_stems is None:
        occluded_stems = [None] * len(occluded_images)
    if not clean_images or not occluded_images:
        raise ValueError("calibration needs both clean and occluded images")

    clean_d = []
    for img, stem in zip(clean_images, clean_stems):
        clean_d.append(raw_score(bank, extractor.extract(img, stem=stem)).ravel())

    occ_d = []
    for img, mask, stem in zip(occluded_images, occlusion_masks, occluded_stems):
        grid = extractor.extract(img, stem=stem)
        d = raw_score(bank, grid)
        truth = _patch_center_truth(as_mask(mask), grid)
        occ_d.append(d[truth])
    occ_d = np.concatenate(occ_d) if occ_d else np.empty(0)
    if occ_d.size == 0:
        raise ValueError("no occluded patches found; check masks/coverage")

    a_lo, a_hi = calibration_from_distances(np.concatenate(clean_d), occ_d)
    return dataclasses.replace(bank, a_lo=a_lo, a_hi=a_hi)


# ---------------------------------------------------------------------
# .bank files
# ---------------------------------------------------------------------

def write_bank(bank: MemoryBank, path) -> None:
    """Write a memory bank to ``path`` in .bank format."""
    path = Path(path)
    ensure_parent_dir(path)
    n, dim = bank.entries.shape
    table = list(dict.fromkeys(bank.entry_labels))  # first-appearance order
    index_of = {s: i for i, s in enumerate(table)}
    a_lo = bank.a_lo if bank.calibrated else float("nan")
    a_hi = bank.a_hi if bank.calibrated else float("nan")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIII", _BANK_MAGIC, _BANK_VERSION,
                            dim, bank.descriptor.patch_size, n))
        f.write(struct.pack("<ff", a_lo, a_hi))
        f.write(struct.pack("<I", len(table)))
        for s in table:
            b = s.encode("utf-8")
            f.write(struct.pack("<I", len(b)))
            f.write(b)
        idx = np.array([index_of[s] for s in bank.entry_labels], dtype="<u4")
        f.write(idx.tobytes())
        f.write(np.ascontiguousarray(bank.entries, dtype="<f4").tobytes())


def read_bank(path) -> MemoryBank:
    """Read and validate a .bank file.

    The extractor name is not stored on disk, so the loaded descriptor
    carries an empty name; dim and patch_size come from the header.
    """
    path = Path(path)
    data = path.read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise FormatError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    magic, version, dim, patch_size, count = take("<4sIIII")
    if magic != _BANK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _BANK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1 or patch_size < 1 or count < 1:
        raise FormatError(f"{path}: zero dim/patch_size/entry count")
    a_lo, a_hi = take("<ff")
    lo_nan, hi_nan = np.isnan(a_lo), np.isnan(a_hi)
    if lo_nan != hi_nan:
        raise FormatError(f"{path}: half-set calibration")
    calibrated = not lo_nan
    if calibrated and not a_lo < a_hi:
        raise FormatError(f"{path}: calibration requires a_lo < a_hi")

    (n_labels,) = take("<I")
    table = []
    for _ in range(n_labels):
        (ln,) = take("<I")
        if off + ln > len(data):
            raise FormatError(f"{path}: truncated label table")
        table.append(data[off:off + ln].decode("utf-8"))
        off += ln
    idx_bytes = 4 * count
    vec_bytes = 4 * count * dim
    if len(data) != off + idx_bytes + vec_bytes:
        raise FormatError(
            f"{path}: payload is {len(data)} bytes, "
            f"expected {off + idx_bytes + vec_bytes}"
        )
    idx = np.frombuffer(data, dtype="<u4", count=count, offset=off)
    off += idx_bytes
    if idx.size and int(idx.max()) >= n_labels:
        raise FormatError(f"{path}: label index out of range")
    entries = np.frombuffer(data, dtype="<f4", offset=off).reshape(count, dim)
    if not np.isfinite(entries).all():
        raise FormatError(f"{path}: non-finite entries")
    norms = np.linalg.norm(entries.astype(np.float64), axis=1)
    bad = (norms != 0.0) & (np.abs(norms - 1.0) > _NORM_TOL)
    if bad.any():
        raise FormatError(f"{path}: entry {int(np.flatnonzero(bad)[0])} "
                          "is neither unit-norm nor zero")

    return MemoryBank(
        entries=entries.copy(),
        entry_labels=[table[i] for i in idx],
        descriptor=FeatureDescriptor(name="", dim=dim, patch_size=patch_size),
        a_lo=float(a_lo) if calibrated else None,
        a_hi=float(a_hi) if calibrated else None,
    )
