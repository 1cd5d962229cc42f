"""Walk through the occlusion synthesizer: fields, masks, and fills.

Generates a fractal noise field, thresholds it into masks at several
exact coverages, and applies the three bundled fill styles to one toy
image. Outputs land in ./demo_out/synthesis (or the directory given as
the first argument).
"""

import sys
from pathlib import Path

import numpy as np

from oasic import (
    GrayFill,
    PerlinParams,
    TextureFill,
    apply_occlusion,
    bundled_texture,
    gen_toy_dataset,
    mask_from_field,
    perlin_field,
    write_image,
    write_mask,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "synthesis"

# One smooth field; more octaves add finer detail on top of the blobs.
field = perlin_field(256, 256, PerlinParams(seed=7))
write_image(np.repeat((field * 255).astype(np.uint8)[..., None], 3, axis=2),
            out / "field.png")
print(f"field: 256x256, values in [{field.min():.3f}, {field.max():.3f}]")

# Thresholding the field gives coherent blobs with exact pixel counts.
for coverage in (0.1, 0.3, 0.5):
    mask = mask_from_field(field, coverage)
    write_mask(mask, out / f"mask_{coverage}.png")
    print(f"coverage {coverage}: {int(mask.sum())} of {mask.size} pixels "
          f"({mask.mean():.4f})")

# The same mask rendered with each fill style.
image = gen_toy_dataset(classes=4, per_class=4, size=256, seed=1).train.images[0]
mask = mask_from_field(field, 0.4)
write_image(image, out / "clean.png")
for name, fill in [("gray", GrayFill()),
                   ("leaf", TextureFill(bundled_texture("leaf"))),
                   ("smoke", TextureFill(bundled_texture("smoke")))]:
    write_image(apply_occlusion(image, mask, fill), out / f"occluded_{name}.png")
    print(f"wrote occluded_{name}.png")

print(f"outputs in {out}")
