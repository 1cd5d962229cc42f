"""Command-line interface.

One subcommand per pipeline stage so every stage is scriptable on its
own: synthesize occluded datasets, build/calibrate banks, segment and
mask images, estimate severity, train classifier pools, run the
occlusion-aware prediction, and drive the full evaluation harness.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
inputs).
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .bank import calibrate, build_bank, read_bank, score_image, write_bank
from .errors import OasicError
from .experiment import (ExperimentConfig, load_labeled_dir, parse_config_file,
                         run_experiment)
from .features import make_extractor
from .imaging import (read_amap, read_image, read_mask, write_amap,
                      write_image, write_mask)
from .masking import estimate_severity, gray_mask
from .pool import (load_pool, oasic_predict, save_pool, train_pool)
from .seeding import derive_seed
from .synth import GrayFill, PerlinParams, TextureFill, occlude_image, synth_dataset
from .thresholding import otsu_threshold, parse_threshold_spec, threshold_fixed
from .toydata import TEXTURE_NAMES, bundled_texture, gen_toy_dataset

__all__ = ["main", "run"]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the CLI contract
    # reserves 2 for data errors, so remap usage problems to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_fill(spec: str, default_gray: int = 127):
    """Fill spec strings: gray, gray:<g>, texture:<name-or-png>."""
    if spec == "gray":
        return GrayFill(default_gray)
    if spec.startswith("gray:"):
        return GrayFill(int(spec[len("gray:"):]))
    if spec.startswith("texture:"):
        name = spec[len("texture:"):]
        if name in TEXTURE_NAMES:
            return TextureFill(bundled_texture(name))
        return TextureFill(read_image(name))
    raise ValueError(f"unknown fill spec {spec!r}")


def _extractor_for_bank(features: str, bank):
    extractor = make_extractor(features, patch_size=bank.descriptor.patch_size)
    if extractor.dim != bank.descriptor.dim:
        raise ValueError(
            f"feature dim {extractor.dim} does not match bank dim "
            f"{bank.descriptor.dim}"
        )
    return extractor


# ---------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------

def _cmd_synth(args) -> int:
    images, labels, names = load_labeled_dir(args.in_dir)
    params = PerlinParams(seed=0, octaves=args.octaves,
                          persistence=args.persistence,
                          base_frequency=args.base_frequency)
    fill = _parse_fill(args.fill, args.gray)
    ds = synth_dataset(images, labels, args.p_max, params, fill, seed=args.seed)
    out = Path(args.out_dir)
    for img, mask, label, name in zip(ds.images, ds.masks, ds.labels, names):
        write_image(img, out / label / f"{name}.png")
        if args.dump_masks:
            write_mask(mask, out / "_masks" / label / f"{name}.png")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "label", "coverage", "seed"])
        for name, label, cov, seed in zip(names, ds.labels, ds.coverages,
                                          ds.seeds):
            w.writerow([name, label, repr(cov), seed])
    return 0


def _cmd_bank_build(args) -> int:
    images, labels, names = load_labeled_dir(args.in_dir)
    extractor = make_extractor(args.features, args.patch_size)
    bank = build_bank(images, labels, extractor, stems=names)
    write_bank(bank, args.out)
    return 0


def _cmd_bank_calibrate(args) -> int:
    bank = read_bank(args.bank)
    extractor = _extractor_for_bank(args.features, bank)
    images, _, _ = load_labeled_dir(args.in_dir)
    occluded, masks = [], []
    for i, img in enumerate(images):
        occ, mask = occlude_image(
            img, args.coverage,
            PerlinParams(seed=derive_seed(args.seed, "calib", i)),
            GrayFill(args.gray))
        occluded.append(occ)
        masks.append(mask)
    bank = calibrate(bank, images, occluded, masks, extractor)
    write_bank(bank, args.out)
    print(f"a_lo {bank.a_lo:.6f}")
    print(f"a_hi {bank.a_hi:.6f}")
    return 0


def _cmd_segment(args) -> int:
    bank = read_bank(args.bank)
    extractor = _extractor_for_bank(args.features, bank)
    image = read_image(args.image)
    amap = score_image(bank, image, extractor, stem=Path(args.image).stem)
    mode, fixed_tau = parse_threshold_spec(args.threshold)
    tau = otsu_threshold(amap) if mode == "otsu" else fixed_tau
    mask = threshold_fixed(amap, tau)
    if args.out_amap:
        write_amap(amap, args.out_amap)
    if args.out_mask:
        write_mask(mask, args.out_mask)
    print(f"tau {tau:.6f}")
    return 0


def _cmd_mask(args) -> int:
    image = read_image(args.image)
    mask = read_mask(args.mask)
    write_image(gray_mask(image, mask, g=args.gray), args.out)
    return 0


def _cmd_severity(args) -> int:
    print(f"{estimate_severity(read_amap(args.amap)):.6f}")
    return 0


def _cmd_train_pool(args) -> int:
    images, labels, names = load_labeled_dir(args.in_dir)
    extractor = make_extractor(args.features, args.patch_size)
    levels = tuple(float(v) for v in args.levels.split(",") if v.strip())
    pool = train_pool(images, labels, extractor, levels=levels,
                      fill=GrayFill(args.gray), epochs=args.epochs,
                      step=args.step, batch=args.batch, seed=args.seed,
                      stems=names)
    save_pool(pool, args.out_dir)
    return 0


def _cmd_predict(args) -> int:
    bank = read_bank(args.bank)
    pool = load_pool(args.pool)
    extractor = _extractor_for_bank(args.features, bank)
    image = read_image(args.image)
    mode, fixed_tau = parse_threshold_spec(args.threshold)
    result = oasic_predict(
        pool, bank, image, extractor, stem=Path(args.image).stem,
        gray=args.gray, threshold="otsu" if mode == "otsu" else fixed_tau)
    print(f"label {result.label}")
    print(f"severity {result.severity:.6f}")
    print(f"tau {result.tau:.6f}")
    print(f"selected_p {format(result.selected_p, 'g')}")
    return 0


def _cmd_evaluate(args) -> int:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    for pair in args.set or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        mapping[key.strip()] = value.strip()
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.features is not None:
        mapping["features"] = args.features
    if args.threshold is not None:
        mapping["threshold"] = args.threshold
    if args.dump_intermediates:
        mapping["dump_intermediates"] = "true"
    mapping["out_dir"] = args.out_dir
    config = ExperimentConfig.from_mapping(mapping)
    report = run_experiment(config)
    for name in sorted(report.auc_occ):
        print(f"auc_occ {name} {report.auc_occ[name]:.6f}")
    return 0


def _cmd_toy(args) -> int:
    toy = gen_toy_dataset(args.classes, args.per_class, args.size, args.seed)
    out = Path(args.out_dir)
    for split_name, split in (("train", toy.train), ("test", toy.test)):
        for img, label, name in zip(split.images, split.labels, split.names):
            write_image(img, out / split_name / label / f"{name}.png")
    return 0


# ---------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------

def _add_feature_flags(p, patch_size=True):
    p.add_argument("--features", default="handcrafted",
                   help="handcrafted or oemb:<dir>")
    if patch_size:
        p.add_argument("--patch-size", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oasic",
                     description="Occlusion-aware image classification tools")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="occlude a labeled image tree")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--p-max", type=float, required=True)
    p.add_argument("--fill", default="gray",
                   help="gray, gray:<g>, or texture:<name-or-png>")
    p.add_argument("--gray", type=int, default=127)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--octaves", type=int, default=4)
    p.add_argument("--persistence", type=float, default=0.5)
    p.add_argument("--base-frequency", type=float, default=4.0)
    p.add_argument("--dump-masks", action="store_true")
    p.set_defaults(func=_cmd_synth)

    bank = sub.add_parser("bank", help="memory-bank operations")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True,
                                   parser_class=_Parser)
    p = bank_sub.add_parser("build", help="build a bank from clean images")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    _add_feature_flags(p)
    p.set_defaults(func=_cmd_bank_build)
    p = bank_sub.add_parser("calibrate",
                            help="fit score calibration on synthetic occlusions")
    p.add_argument("--bank", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coverage", type=float, default=0.5)
    p.add_argument("--gray", type=int, default=127)
    p.add_argument("--seed", type=int, default=0)
    _add_feature_flags(p, patch_size=False)
    p.set_defaults(func=_cmd_bank_calibrate)

    p = sub.add_parser("segment", help="score an image and threshold the map")
    p.add_argument("--bank", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", default="otsu",
                   help="otsu or fixed:<value>")
    p.add_argument("--out-amap")
    p.add_argument("--out-mask")
    _add_feature_flags(p, patch_size=False)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("mask", help="gray out masked pixels of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gray", type=int, default=127)
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("severity", help="mean anomaly of a .amap file")
    p.add_argument("--amap", required=True)
    p.set_defaults(func=_cmd_severity)

    p = sub.add_parser("train-pool",
                       help="train occlusion-specialized classifiers")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--levels", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--gray", type=int, default=127)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_feature_flags(p)
    p.set_defaults(func=_cmd_train_pool)

    p = sub.add_parser("predict", help="occlusion-aware classification")
    p.add_argument("--bank", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", default="otsu")
    p.add_argument("--gray", type=int, default=127)
    _add_feature_flags(p, patch_size=False)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="run the evaluation harness")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--features")
    p.add_argument("--threshold")
    p.add_argument("--dump-intermediates", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("toy", help="write the built-in toy dataset")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_toy)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # -h exits 0; usage errors exit 1 via _Parser
        return int(e.code or 0)
    try:
        return args.func(args)
    except (OasicError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
