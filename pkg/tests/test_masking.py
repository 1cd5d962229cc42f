"""Gray masking and anomaly-map severity."""
import numpy as np
import pytest

from oasic import estimate_severity, gray_mask


def test_gray_mask_replaces_only_masked_pixels():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (12, 10, 3), dtype=np.uint8)
    mask = (rng.random((12, 10)) < 0.3).astype(np.uint8)
    out = gray_mask(img, mask, g=127)
    sel = mask == 1
    assert (out[sel] == 127).all()
    assert np.array_equal(out[~sel], img[~sel])
    # input is never mutated
    assert img.max() > 127 or img.min() < 127


def test_gray_mask_idempotent():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    mask = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    once = gray_mask(img, mask)
    twice = gray_mask(once, mask)
    assert np.array_equal(once, twice)


def test_gray_mask_empty_and_full():
    img = np.full((5, 5, 3), 42, dtype=np.uint8)
    assert np.array_equal(gray_mask(img, np.zeros((5, 5), dtype=np.uint8)), img)
    assert (gray_mask(img, np.ones((5, 5), dtype=np.uint8), g=9) == 9).all()


def test_gray_mask_validates():
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        gray_mask(img, np.zeros((3, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        gray_mask(img, np.zeros((4, 4), dtype=np.uint8), g=300)


def test_severity_of_binary_map_equals_coverage_exactly():
    rng = np.random.default_rng(2)
    for _ in range(20):
        h, w = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        mask = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        sev = estimate_severity(mask.astype(np.float64))
        assert sev == int(mask.sum()) / mask.size


def test_severity_is_the_mean():
    amap = np.array([[0.0, 0.5], [1.0, 0.5]])
    assert estimate_severity(amap) == 0.5
    assert estimate_severity(np.zeros((3, 3))) == 0.0
    assert estimate_severity(np.ones((3, 3))) == 1.0


def test_severity_float32_maps_accumulate_in_float64():
    # A large near-constant float32 map must not drift from naive
    # single-precision accumulation.
    amap = np.full((512, 512), 0.1, dtype=np.float32)
    assert abs(estimate_severity(amap) - float(np.float32(0.1))) < 1e-12


def test_severity_rejects_bad_maps():
    with pytest.raises(ValueError):
        estimate_severity(np.full((2, 2), -0.5))
    with pytest.raises(ValueError):
        estimate_severity(np.full((2, 2), np.nan))
