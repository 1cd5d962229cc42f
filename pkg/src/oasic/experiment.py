"""End-to-end evaluation harness.

Runs the full pipeline on a labeled dataset (the built-in toy set or a
directory of class-labeled PNGs): builds and calibrates a memory bank,
trains the classifier pool plus baselines, then sweeps a grid of
occlusion levels x occluder types over the test split, evaluating five
configurations that isolate each part of the pipeline:

  oasic_full        gray masking + severity-selected pool member
  mask_only         gray masking, fixed highest-level member
  selection_only    severity-selected member on the raw occluded image
  occlusion_trained one classifier trained on texture-occluded data
  clean_baseline    the clean-data classifier, no masking

Per-level work is independent and runs on a thread pool sized by the
``OASIC_THREADS`` environment variable (default 1 = serial); results are
identical regardless of thread count because every image draws its
randomness from its own derived seed.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bank import build_bank, calibrate, raw_score, upsample_patch_grid
from .features import make_extractor, pooled_feature
from .imaging import read_image, write_amap, write_image, write_mask
from .masking import estimate_severity, gray_mask
from .metrics import EvalCurve, auc_occ, auroc, average_precision
from .pool import (DEFAULT_LEVELS, select_model, train_classifier, train_pool)
from .seeding import derive_seed
from .synth import GrayFill, PerlinParams, TextureFill, occlude_image, synth_dataset
from .thresholding import otsu_threshold, parse_threshold_spec, threshold_fixed
from .toydata import bundled_texture, gen_toy_dataset

__all__ = [
    "ExperimentConfig",
    "Report",
    "run_experiment",
    "write_report",
    "parse_config_file",
    "load_labeled_dir",
    "CONFIG_NAMES",
]

CONFIG_NAMES = ("oasic_full", "mask_only", "selection_only",
                "occlusion_trained", "clean_baseline")


@dataclass
class ExperimentConfig:
    """Knobs of one experiment run; every field has a CLI/config-file key."""

    data_dir: str | None = None      # labeled PNG tree; None = toy set
    classes: int = 8                 # toy-set shape
    per_class: int = 40
    image_size: int = 128
    features: str = "handcrafted"
    patch_size: int = 8              # finer than the extractor default: sharper masks at 128 px
    pool_levels: tuple[float, ...] = DEFAULT_LEVELS
    levels: tuple[float, ...] = DEFAULT_LEVELS
    occlusion_types: tuple[str, ...] = ("gray", "leaf", "smoke")
    baseline_texture: str = "smoke"  # fill used to train the occlusion_trained baseline
    threshold: str = "otsu"          # or "fixed:<value>"
    gray_value: int = 127
    epochs: int = 200
    step: float = 0.1
    batch: int = 32
    calibration_coverage: float = 0.5
    seed: int = 0
    out_dir: str | None = None
    dump_intermediates: bool = False

    def __post_init__(self):
        self.pool_levels = tuple(sorted({float(v) for v in self.pool_levels}))
        self.levels = tuple(sorted({float(v) for v in self.levels}))
        self.occlusion_types = tuple(self.occlusion_types)
        if not self.levels:
            raise ValueError("levels must be non-empty")
        if not self.pool_levels:
            raise ValueError("pool_levels must be non-empty")
        if not self.occlusion_types:
            raise ValueError("occlusion_types must be non-empty")
        parse_threshold_spec(self.threshold)  # fail early on bad specs

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentConfig":
        """Build a config from flat string key=value pairs (config file or
        CLI overrides); unknown keys are rejected."""
        kwargs = {}
        for key, raw in mapping.items():
            if key not in _FIELD_PARSERS:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _FIELD_PARSERS[key](raw)
        return cls(**kwargs)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


_FIELD_PARSERS = {
    "data_dir": str,
    "classes": int,
    "per_class": int,
    "image_size": int,
    "features": str,
    "patch_size": int,
    "pool_levels": _parse_floats,
    "levels": _parse_floats,
    "occlusion_types": _parse_names,
    "baseline_texture": str,
    "threshold": str,
    "gray_value": int,
    "epochs": int,
    "step": float,
    "batch": int,
    "calibration_coverage": float,
    "seed": int,
    "out_dir": str,
    "dump_intermediates": _parse_bool,
}


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` config file; '#' lines and blanks ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_labeled_dir(path):
    """Load ``<dir>/<label>/*.png`` into (images, labels, names)."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    images, labels, names = [], [], []
    for sub in sorted(p for p in path.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.png"))
        for f in files:
            images.append(read_image(f))
            labels.append(sub.name)
            names.append(f.stem)
    if not images:
        raise ValueError(f"{path}: no <label>/*.png images found")
    return images, labels, names


def _split_by_index(images, labels, names, frac=0.75):
    """Per-class index split; the first ``frac`` of each class trains."""
    by_label: dict[str, list[int]] = {}
    for i, s in enumerate(labels):
        by_label.setdefault(s, []).append(i)
    train_idx, test_idx = [], []
    for s in sorted(by_label):
        idxs = by_label[s]
        k = int(len(idxs) * frac)
        if k < 1 or k >= len(idxs):
            raise ValueError(f"class {s!r} is too small to split")
        train_idx.extend(idxs[:k])
        test_idx.extend(idxs[k:])
    pick = lambda idxs: ([images[i] for i in idxs], [labels[i] for i in idxs],
                         [names[i] for i in idxs])
    return pick(train_idx), pick(test_idx)


# ---------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------

def _fmt_level(v: float) -> str:
    return format(v, "g")


@dataclass
class Report:
    """Aggregated experiment results.

    Nested dict keys are strings (levels formatted compactly) so the
    structure round-trips through JSON unchanged.  ``accuracies`` is the
    raw config -> level -> accuracy table; ``auc_occ`` is empty when the
    run had only one level (a curve needs at least two points).
    """

    config: dict
    accuracies: dict[str, dict[str, float]]
    auc_occ: dict[str, float]
    severity_error: dict[str, dict[str, float]]
    segmentation: dict[str, dict[str, dict[str, float]]]
    segmentation_mean: dict[str, dict[str, float]]
    specialist: dict[str, dict[str, float]]

    def curve(self, name: str) -> EvalCurve:
        cells = self.accuracies[name]
        levels = sorted(float(k) for k in cells)
        return EvalCurve(tuple(levels),
                         tuple(cells[_fmt_level(v)] for v in levels))

    @property
    def curves(self) -> dict[str, EvalCurve]:
        return {name: self.curve(name) for name in self.accuracies}

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "accuracies": self.accuracies,
            "auc_occ": self.auc_occ,
            "severity_error": self.severity_error,
            "segmentation": self.segmentation,
            "segmentation_mean": self.segmentation_mean,
            "specialist": self.specialist,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Report":
        return cls(config=d["config"], accuracies=d["accuracies"],
                   auc_occ=d["auc_occ"],
                   severity_error=d["severity_error"],
                   segmentation=d["segmentation"],
                   segmentation_mean=d["segmentation_mean"],
                   specialist=d["specialist"])


def write_report(report: Report, out_dir) -> None:
    """Write report.json plus curves.csv / segmentation.csv summaries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "curves.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config", "level", "accuracy"])
        for name in sorted(report.accuracies):
            cells = report.accuracies[name]
            for lv in sorted(cells, key=float):
                w.writerow([name, lv, repr(cells[lv])])
    with open(out_dir / "segmentation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["type", "level", "auroc", "ap"])
        for t in sorted(report.segmentation):
            cells = report.segmentation[t]
            for lv in sorted(cells, key=float):
                w.writerow([t, lv, repr(cells[lv]["auroc"]),
                            repr(cells[lv]["ap"])])


# ---------------------------------------------------------------------
# The experiment
# ---------------------------------------------------------------------

def _fill_for(type_name: str, gray_value: int, offset_seed: int):
    if type_name == "gray":
        return GrayFill(gray_value)
    return TextureFill(bundled_texture(type_name), offset_seed=offset_seed)


def _thread_count() -> int:
    raw = os.environ.get("OASIC_THREADS", "").strip()
    if not raw:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError("OASIC_THREADS must be >= 1")
    return n


def run_experiment(config: ExperimentConfig) -> Report:
    """Run the full train/calibrate/evaluate cycle; returns the report.

    When ``config.out_dir`` is set, report.json and the CSV summaries are
    written there as well (plus per-image intermediates when
    ``dump_intermediates`` is on).
    """
    if config.features.startswith("oemb:"):
        # Occluded variants are synthesized in memory, so precomputed
        # embedding directories cannot serve them.
        raise ValueError(
            "the evaluation harness requires on-the-fly features; "
            "precomputed oemb directories only work for single-image ops"
        )
    master = config.seed

    if config.data_dir is not None:
        images, labels, names = load_labeled_dir(config.data_dir)
        (train_images, train_labels, train_names), \
            (test_images, test_labels, test_names) = _split_by_index(
                images, labels, names)
    else:
        toy = gen_toy_dataset(config.classes, config.per_class,
                              config.image_size, derive_seed(master, "toy"))
        train_images, train_labels, train_names = (
            toy.train.images, toy.train.labels, toy.train.names)
        test_images, test_labels, test_names = (
            toy.test.images, toy.test.labels, toy.test.names)

    extractor = make_extractor(config.features, config.patch_size)
    noise = PerlinParams(seed=0)

    # Bank + calibration on the training split.
    bank = build_bank(train_images, train_labels, extractor)
    calib_images, calib_masks = [], []
    for i, img in enumerate(train_images):
        occ, mask = occlude_image(
            img, config.calibration_coverage,
            PerlinParams(seed=derive_seed(master, "calib", i)),
            GrayFill(config.gray_value))
        calib_images.append(occ)
        calib_masks.append(mask)
    bank = calibrate(bank, train_images, calib_images, calib_masks, extractor)

    # Pool and baselines.
    pool = train_pool(train_images, train_labels, extractor,
                      levels=config.pool_levels, params=noise,
                      fill=GrayFill(config.gray_value), epochs=config.epochs,
                      step=config.step, batch=config.batch,
                      seed=derive_seed(master, "pool"))
    p_max = max(config.pool_levels)
    occ_ds = synth_dataset(train_images, train_labels, p_max, noise,
                           TextureFill(bundled_texture(config.baseline_texture)),
                           seed=derive_seed(master, "occ-train-data"))
    occ_trained = train_classifier(
        occ_ds.images, train_labels, p_max, extractor, epochs=config.epochs,
        step=config.step, batch=config.batch,
        seed=derive_seed(master, "occ-train-fit"))
    if 0.0 in pool.members:
        clean_clf = pool.members[0.0]
    else:
        clean_clf = train_classifier(
            train_images, train_labels, 0.0, extractor, epochs=config.epochs,
            step=config.step, batch=config.batch,
            seed=derive_seed(master, "clean-fit"))
    mask_only_clf = pool.members[p_max]

    mode, fixed_tau = parse_threshold_spec(config.threshold)
    dump_dir = None
    if config.out_dir is not None and config.dump_intermediates:
        dump_dir = Path(config.out_dir) / "intermediates"

    levels = config.levels  # sorted and deduplicated by the config

    def eval_level(level: float):
        """All per-image work for one occlusion level; self-seeded."""
        lv = _fmt_level(level)
        correct = {name: [] for name in CONFIG_NAMES}
        sev_err = {t: [] for t in config.occlusion_types}
        seg = {t: {"auroc": [], "ap": []} for t in config.occlusion_types}
        spec_correct = {p: [] for p in pool.levels}
        for t in config.occlusion_types:
            for j, img in enumerate(test_images):
                s = derive_seed(master, "eval", lv, t, j)
                fill = _fill_for(t, config.gray_value,
                                 offset_seed=derive_seed(s, "offset"))
                occluded, truth = occlude_image(
                    img, level, PerlinParams(seed=derive_seed(s, "field")), fill)
                realized = int(truth.sum()) / truth.size

                grid = extractor.extract(occluded)
                d = raw_score(bank, grid)
                patch = np.clip((d - bank.a_lo) / (bank.a_hi - bank.a_lo),
                                0.0, 1.0)
                amap = upsample_patch_grid(patch, *occluded.shape[:2])
                tau = otsu_threshold(amap) if mode == "otsu" else fixed_tau
                omask = threshold_fixed(amap, tau)
                masked = gray_mask(occluded, omask, config.gray_value)
                shat = estimate_severity(amap)

                f_raw = pooled_feature(grid)
                f_masked = pooled_feature(extractor.extract(masked))
                sel_p = select_model(pool, shat)

                preds = {
                    "oasic_full": pool.members[sel_p].predict(f_masked)[0],
                    "mask_only": mask_only_clf.predict(f_masked)[0],
                    "selection_only": pool.members[sel_p].predict(f_raw)[0],
                    "occlusion_trained": occ_trained.predict(f_raw)[0],
                    "clean_baseline": clean_clf.predict(f_raw)[0],
                }
                for name, pred in preds.items():
                    correct[name].append(pred == test_labels[j])
                sev_err[t].append(abs(shat - realized))
                k = int(truth.sum())
                if 0 < k < truth.size:
                    seg[t]["auroc"].append(auroc(amap.ravel(), truth.ravel()))
                    seg[t]["ap"].append(
                        average_precision(amap.ravel(), truth.ravel()))
                if t == "gray":
                    for p, clf in pool.members.items():
                        spec_correct[p].append(
                            clf.predict(f_raw)[0] == test_labels[j])

                if dump_dir is not None:
                    base = dump_dir / t / f"level_{lv}"
                    write_image(occluded, base / f"{test_names[j]}_occ.png")
                    write_amap(np.clip(amap, 0.0, 1.0),
                               base / f"{test_names[j]}.amap")
                    write_mask(omask, base / f"{test_names[j]}_mask.png")
                    write_mask(truth, base / f"{test_names[j]}_truth.png")
                    write_image(masked, base / f"{test_names[j]}_masked.png")
        return level, correct, sev_err, seg, spec_correct

    workers = min(_thread_count(), len(levels))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = dict((r[0], r[1:]) for r in ex.map(eval_level, levels))
    else:
        results = dict((r[0], r[1:]) for r in map(eval_level, levels))

    # Aggregate.
    accuracies: dict[str, dict[str, float]] = {
        name: {} for name in CONFIG_NAMES}
    severity_error: dict[str, dict[str, float]] = {
        t: {} for t in config.occlusion_types}
    segmentation: dict[str, dict[str, dict[str, float]]] = {
        t: {} for t in config.occlusion_types}
    specialist: dict[str, dict[str, float]] = {}
    for level in levels:
        correct, sev_err, seg, spec_correct = results[level]
        lv = _fmt_level(level)
        for name in CONFIG_NAMES:
            accuracies[name][lv] = float(np.mean(correct[name]))
        for t in config.occlusion_types:
            severity_error[t][lv] = float(np.mean(sev_err[t]))
            if seg[t]["auroc"]:
                segmentation[t][lv] = {
                    "auroc": float(np.mean(seg[t]["auroc"])),
                    "ap": float(np.mean(seg[t]["ap"])),
                }
        specialist[lv] = {
            _fmt_level(p): float(np.mean(v))
            for p, v in spec_correct.items() if v
        }

    segmentation_mean = {
        t: {
            "auroc": float(np.mean([c["auroc"] for c in cells.values()])),
            "ap": float(np.mean([c["ap"] for c in cells.values()])),
        }
        for t, cells in segmentation.items() if cells
    }
    report = Report(
        config={k: (list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(config).items()},
        accuracies=accuracies,
        auc_occ={},
        severity_error=severity_error,
        segmentation=segmentation,
        segmentation_mean=segmentation_mean,
        specialist=specialist,
    )
    if len(levels) > 1:
        report.auc_occ = {name: auc_occ(report.curve(name))
                          for name in CONFIG_NAMES}
    if config.out_dir is not None:
        write_report(report, config.out_dir)
    return report
