"""Dump vision-transformer patch embeddings to per-image .oemb files.

Runs a torchvision ViT backbone over a directory tree of images and
writes one ``<stem>.oemb`` per image (the patch-grid feature format the
``oasic`` package reads back via ``--features oemb:<dir>``), plus a
``manifest.csv`` of ``stem,grid_h,grid_w,dim``. Vectors are the
encoder's patch tokens (class token dropped), L2-normalized.

Backbone ids are torchvision ViT constructors (``vit_b_16``,
``vit_b_32``, ``vit_l_16``, ``vit_l_32``, ``vit_h_14``); plain ids load
pretrained weights (downloaded on first use, aborting if unavailable),
and a ``:random`` suffix loads the architecture with seeded random
weights — useful offline and for tests, where only the plumbing
matters. Inference runs under ``no_grad`` in eval mode, so a fixed
checkpoint always produces identical files.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from oasic import PatchEmbeddingGrid, write_oemb

__all__ = ["ExportJob", "load_backbone", "export", "main", "run"]

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
_RANDOM_INIT_SEED = 0


@dataclass
class ExportJob:
    in_dir: Path
    out_dir: Path
    backbone: str = "vit_b_16"
    batch: int = 8
    device: str = "cpu"

    def __post_init__(self):
        self.in_dir = Path(self.in_dir)
        self.out_dir = Path(self.out_dir)
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")


def load_backbone(spec: str, device: str = "cpu"):
    """Instantiate a torchvision ViT from a backbone id string."""
    import torchvision.models as tvm

    name, _, variant = spec.partition(":")
    if variant not in ("", "random"):
        raise ValueError(f"unknown backbone variant {variant!r}")
    ctor = getattr(tvm, name, None)
    if not name.startswith("vit_") or ctor is None:
        raise ValueError(
            f"unknown backbone {name!r}; expected a torchvision ViT id "
            "like vit_b_16 or vit_b_32"
        )
    if variant == "random":
        torch.manual_seed(_RANDOM_INIT_SEED)
        model = ctor(weights=None)
    else:
        model = ctor(weights="DEFAULT")
    model.eval()
    return model.to(device)


def _load_tensor(path: Path, size: int) -> torch.Tensor:
    """One image file -> normalized (3, size, size) float tensor."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - _IMAGENET_MEAN) / _IMAGENET_STD
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _patch_tokens(model, batch: torch.Tensor) -> torch.Tensor:
    """(N, 3, S, S) -> (N, grid_h*grid_w, dim) encoder patch tokens."""
    x = model._process_input(batch)
    cls = model.class_token.expand(x.shape[0], -1, -1)
    x = torch.cat([cls, x], dim=1)
    return model.encoder(x)[:, 1:, :]


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors),
                     where=norms > 0.0)


def export(job: ExportJob, model=None) -> tuple[int, int]:
    """Export every image under ``job.in_dir``; returns (written, skipped).

    Unreadable images are skipped with a warning on stderr and counted
    in the second tuple element; everything else aborts with an
    exception. The manifest lists written files only.
    """
    if not job.in_dir.is_dir():
        raise FileNotFoundError(f"{job.in_dir} is not a directory")
    if model is None:
        model = load_backbone(job.backbone, job.device)

    paths = sorted(p for p in job.in_dir.rglob("*")
                   if p.suffix.lower() in _IMAGE_SUFFIXES)
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        dup = next(s for s in stems if stems.count(s) > 1)
        raise ValueError(
            f"duplicate image stem {dup!r}; output names would collide")

    size = model.image_size
    ps = model.patch_size
    grid_n = size // ps
    dim = model.hidden_dim

    job.out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    skipped = 0
    rows = []
    batch_tensors: list[torch.Tensor] = []
    batch_stems: list[str] = []

    def flush():
        nonlocal written
        if not batch_tensors:
            return
        stack = torch.stack(batch_tensors).to(job.device)
        with torch.no_grad():
            tokens = _patch_tokens(model, stack)
        feats = tokens.cpu().numpy().astype(np.float32)
        for stem, flat in zip(batch_stems, feats):
            vectors = _unit_rows(flat).reshape(grid_n, grid_n, dim)
            grid = PatchEmbeddingGrid(grid_n, grid_n, dim, ps, vectors)
            write_oemb(grid, job.out_dir / f"{stem}.oemb")
            rows.append((stem, grid_n, grid_n, dim))
            written += 1
        batch_tensors.clear()
        batch_stems.clear()

    for path in paths:
        try:
            tensor = _load_tensor(path, size)
        except (OSError, UnidentifiedImageError, ValueError) as e:
            print(f"warning: skipping {path}: {e}", file=sys.stderr)
            skipped += 1
            continue
        batch_tensors.append(tensor)
        batch_stems.append(path.stem)
        if len(batch_tensors) == job.batch:
            flush()
    flush()

    with open(job.out_dir / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stem", "grid_h", "grid_w", "dim"])
        w.writerows(rows)
    return written, skipped


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Write per-image .oemb patch embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="embed a directory of images")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--backbone", default="vit_b_16",
                   help="torchvision ViT id, optionally with :random")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--device", default="cpu")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    job = ExportJob(in_dir=args.in_dir, out_dir=args.out_dir,
                    backbone=args.backbone, batch=args.batch,
                    device=args.device)
    try:
        written, skipped = export(job)
    except Exception as e:  # backbone load failures included: abort
        print(f"error: {e}", file=sys.stderr)
        return 1
    note = f", skipped {skipped} unreadable" if skipped else ""
    print(f"wrote {written} files{note}")
    return 0


def main() -> None:
    sys.exit(run())
