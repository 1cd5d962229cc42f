"""Severity-informed model selection in action.

Trains a pool of classifiers, each specialized to a different occlusion
level, then sweeps test images occluded at increasing coverage: the
estimated severity routes every image to the member whose training
range matches, and each specialist is at its best near its own level.
"""

import numpy as np

from oasic import (
    GrayFill,
    HandcraftedExtractor,
    PerlinParams,
    build_bank,
    calibrate,
    gen_toy_dataset,
    image_feature,
    oasic_predict,
    occlude_image,
    train_pool,
)

toy = gen_toy_dataset(classes=4, per_class=12, size=128, seed=2)
extractor = HandcraftedExtractor(patch_size=8)

bank = build_bank(toy.train.images, toy.train.labels, extractor)
occluded, masks = [], []
for i, img in enumerate(toy.train.images):
    occ, m = occlude_image(img, 0.5, PerlinParams(seed=200 + i), GrayFill())
    occluded.append(occ)
    masks.append(m)
bank = calibrate(bank, toy.train.images, occluded, masks, extractor)

levels = (0.0, 0.2, 0.4, 0.6, 0.8)
pool = train_pool(toy.train.images, toy.train.labels, extractor,
                  levels=levels, epochs=120, seed=5)
print(f"pool members: {pool.levels}")

print("\ncoverage  severity  selected  correct")
for coverage in (0.0, 0.15, 0.3, 0.45, 0.6, 0.75):
    hits = 0
    severities, selections = [], []
    for j, (img, label) in enumerate(zip(toy.test.images, toy.test.labels)):
        occ, _ = occlude_image(img, coverage, PerlinParams(seed=1000 + j),
                               GrayFill())
        result = oasic_predict(pool, bank, occ, extractor)
        severities.append(result.severity)
        selections.append(result.selected_p)
        hits += result.label == label
    chosen = max(set(selections), key=selections.count)
    print(f"  {coverage:.2f}     {np.mean(severities):.3f}     "
          f"{chosen:.1f}       {hits}/{len(toy.test.images)}")

# Every specialist, scored on raw images at each level: each row's best
# entry sits near the diagonal.
print("\nper-member accuracy on raw occluded images")
print("test level | " + "  ".join(f"f_[0,{p:.1f}]" for p in pool.levels))
for coverage in levels:
    row = []
    for p in pool.levels:
        member = pool.members[p]
        hits = 0
        for j, (img, label) in enumerate(zip(toy.test.images, toy.test.labels)):
            occ, _ = occlude_image(img, coverage, PerlinParams(seed=1000 + j),
                                   GrayFill())
            feats = image_feature(occ, extractor)
            hits += member.predict(feats)[0] == label
        row.append(hits / len(toy.test.images))
    print(f"   {coverage:.1f}     | " + "  ".join(f"{v:8.2f}" for v in row))
