"""A reduced end-to-end benchmark run.

Runs the five-configuration evaluation (full pipeline, masking only,
selection only, occlusion-trained baseline, clean baseline) on a
coarsened occlusion grid and prints the accuracy-vs-occlusion table
plus the area under each curve. Report files land in
./demo_out/benchmark (or the directory given as the first argument).
The full ten-level experiment is the same call with
ExperimentConfig(seed=...) alone; it takes a few minutes.
"""

import sys
from pathlib import Path

from oasic import ExperimentConfig, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "benchmark"

config = ExperimentConfig(
    levels=(0.0, 0.2, 0.4, 0.6, 0.8),
    pool_levels=(0.0, 0.2, 0.4, 0.6, 0.8),
    seed=42,
    out_dir=str(out),
)
print("running the benchmark on a coarse level grid (about a minute)...")
report = run_experiment(config)

names = sorted(report.accuracies)
level_keys = sorted(report.accuracies[names[0]], key=float)
print("\naccuracy by occlusion level")
print(f"{'config':<18}" + "".join(f"{k:>8}" for k in level_keys))
for name in names:
    cells = report.accuracies[name]
    print(f"{name:<18}" + "".join(f"{cells[k]:8.2f}" for k in level_keys))

print("\narea under the accuracy curve (higher = more robust)")
for name, value in sorted(report.auc_occ.items(), key=lambda kv: -kv[1]):
    print(f"  {name:<18} {value:.3f}")

print("\nmean segmentation quality per occluder type")
for t, cell in sorted(report.segmentation_mean.items()):
    print(f"  {t:<6} AUROC {cell['auroc']:.3f}  AP {cell['ap']:.3f}")

print(f"\nreport.json / curves.csv / segmentation.csv in {out}")
