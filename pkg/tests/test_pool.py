"""Tests for the occlusion-specialized classifier pool."""

import struct

import numpy as np
import pytest

from oasic import (
    Classifier,
    FeatureDescriptor,
    FormatError,
    GrayFill,
    HandcraftedExtractor,
    ModelPool,
    PerlinParams,
    cross_entropy_and_grad,
    estimate_severity,
    fit_logistic,
    gray_mask,
    image_feature,
    load_pool,
    oasic_predict,
    occlude_image,
    otsu_threshold,
    pooled_feature,
    save_pool,
    select_model,
    softmax,
    threshold_fixed,
    train_classifier,
    train_pool,
)
from oasic.bank import build_bank, calibrate


def softmax_oracle(z):
    """Row-wise softmax via explicit per-row loops."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        row = z[i] - z[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def loss_at(w, b, x, y):
    probs = softmax_oracle(x @ w.T + b)
    n = x.shape[0]
    return -float(np.mean([np.log(probs[i, y[i]]) for i in range(n)]))


def numeric_grads(w, b, x, y, h=1e-6):
    """Central finite differences of the mean cross-entropy."""
    gw = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        gw[idx] = (loss_at(wp, b, x, y) - loss_at(wm, b, x, y)) / (2 * h)
    gb = np.zeros_like(b)
    for i in range(b.size):
        bp, bm = b.copy(), b.copy()
        bp[i] += h
        bm[i] -= h
        gb[i] = (loss_at(w, bp, x, y) - loss_at(w, bm, x, y)) / (2 * h)
    return gw, gb


def blob_data(rng, n_per, centers, scale=0.3):
    """Gaussian blobs around the given centers; returns (x, y)."""
    xs, ys = [], []
    for k, c in enumerate(centers):
        xs.append(rng.normal(0.0, scale, size=(n_per, len(c))) + c)
        ys.append(np.full(n_per, k))
    return np.concatenate(xs), np.concatenate(ys)


def solid_image(rgb, size=32, noise=0.0, rng=None):
    img = np.tile(np.array(rgb, dtype=np.float64), (size, size, 1))
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def two_class_set(rng, n_per=4, size=32):
    """Red-vs-blue solid images: linearly separable pooled features."""
    images, labels = [], []
    for _ in range(n_per):
        images.append(solid_image((205, 60, 55), size, noise=6.0, rng=rng))
        labels.append("red")
        images.append(solid_image((50, 70, 210), size, noise=6.0, rng=rng))
        labels.append("blue")
    return images, labels


def make_pool(levels, dim=3, labels=("a", "b")):
    """Hand-built pool: weights irrelevant, only the level keys matter."""
    desc = FeatureDescriptor(name="x", dim=dim, patch_size=4)
    members = {}
    for p in levels:
        w = np.eye(2, dim) * (1.0 + p)
        members[p] = Classifier(w, np.zeros(2), list(labels),
                                trained_p=p, descriptor=desc)
    return ModelPool(members)


# ---------------------------------------------------------------------
# softmax / loss / gradients
# ---------------------------------------------------------------------

def test_softmax_matches_oracle_and_sums_to_one():
    rng = np.random.default_rng(0)
    z = rng.normal(0.0, 3.0, size=(20, 5))
    got = softmax(z)
    assert np.allclose(got, softmax_oracle(z), atol=1e-12)
    assert np.allclose(got.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(got > 0.0)


def test_softmax_is_stable_for_huge_logits():
    z = np.array([[1e4, 0.0, -1e4], [-1e4, -1e4, -1e4]])
    got = softmax(z)
    assert np.all(np.isfinite(got))
    assert got[0, 0] == pytest.approx(1.0)
    assert np.allclose(got[1], 1.0 / 3.0)


def test_loss_matches_hand_rolled_value():
    # one sample, two classes, zero weights: loss is exactly log(2)
    w = np.zeros((2, 3))
    b = np.zeros(2)
    x = np.array([[0.5, -1.0, 2.0]])
    loss, _, _ = cross_entropy_and_grad(w, b, x, [1])
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(5):
        w = rng.normal(0.0, 0.8, size=(3, 4))
        b = rng.normal(0.0, 0.5, size=3)
        x = rng.normal(0.0, 1.0, size=(5, 4))
        y = rng.integers(0, 3, size=5)
        loss, gw, gb = cross_entropy_and_grad(w, b, x, y)
        assert loss == pytest.approx(loss_at(w, b, x, y), abs=1e-12)
        nw, nb = numeric_grads(w, b, x, y)
        assert np.abs(gw - nw).max() / max(np.abs(nw).max(), 1e-12) < 1e-6
        assert np.abs(gb - nb).max() / max(np.abs(nb).max(), 1e-12) < 1e-6


def test_gradient_is_zero_at_the_optimum_direction():
    # perfectly balanced two-class batch with mirrored features: the
    # zero-weight gradient must itself be mirrored
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    _, gw, gb = cross_entropy_and_grad(np.zeros((2, 2)), np.zeros(2), x, [0, 1])
    assert np.allclose(gw[0], -gw[1])
    assert np.allclose(gb, 0.0)


# ---------------------------------------------------------------------
# fit_logistic
# ---------------------------------------------------------------------

def test_fit_is_deterministic_per_seed():
    rng = np.random.default_rng(11)
    x, y = blob_data(rng, 12, [(0, 2), (2, 0), (-2, -2)])
    w1, b1 = fit_logistic(x, y, 3, epochs=40, seed=5)
    w2, b2 = fit_logistic(x, y, 3, epochs=40, seed=5)
    assert w1.tobytes() == w2.tobytes()
    assert b1.tobytes() == b2.tobytes()
    w3, _ = fit_logistic(x, y, 3, epochs=40, seed=6)
    assert w1.tobytes() != w3.tobytes()


def test_fit_separates_gaussian_blobs():
    rng = np.random.default_rng(3)
    x, y = blob_data(rng, 60, [(0, 3), (3, 0), (-3, -3)])
    w, b = fit_logistic(x, y, 3, epochs=120, seed=0)
    pred = np.argmax(x @ w.T + b, axis=1)
    assert np.mean(pred == y) >= 0.99


def test_fit_input_validation():
    x = np.zeros((4, 2))
    y = np.zeros(4, dtype=int)
    with pytest.raises(ValueError):
        fit_logistic(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ValueError):
        fit_logistic(np.zeros(4), y, 2)
    with pytest.raises(ValueError):
        fit_logistic(x, np.zeros(3, dtype=int), 2)
    with pytest.raises(ValueError):
        fit_logistic(x, y, 2, epochs=0)
    with pytest.raises(ValueError):
        fit_logistic(x, y, 2, batch=0)
    with pytest.raises(ValueError):
        fit_logistic(x, y, 2, step=0.0)


# ---------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------

def test_classifier_predictions_match_softmax_oracle():
    rng = np.random.default_rng(21)
    desc = FeatureDescriptor(name="x", dim=4, patch_size=4)
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    clf = Classifier(w, b, ["a", "b", "c"], trained_p=0.2, descriptor=desc)
    x = rng.normal(size=(10, 4))
    probs = clf.predict_proba(x)
    assert np.allclose(probs, softmax_oracle(x @ w.T + b), atol=1e-12)
    want = [["a", "b", "c"][i] for i in np.argmax(probs, axis=1)]
    assert clf.predict(x) == want
    # a single feature vector is accepted too
    one = clf.predict_proba(x[0])
    assert one.shape == (1, 3)
    assert np.allclose(one[0], probs[0])


def test_classifier_validation():
    desc = FeatureDescriptor(name="x", dim=4, patch_size=4)
    w = np.zeros((2, 4))
    b = np.zeros(2)
    with pytest.raises(ValueError):
        Classifier(np.zeros((1, 4)), np.zeros(1), ["a"], 0.0, desc)
    with pytest.raises(ValueError):
        Classifier(w, b, ["a"], 0.0, desc)
    with pytest.raises(ValueError):
        Classifier(w, np.zeros(3), ["a", "b"], 0.0, desc)
    with pytest.raises(ValueError):
        Classifier(np.zeros((2, 5)), b, ["a", "b"], 0.0, desc)
    with pytest.raises(ValueError):
        Classifier(w, b, ["a", "b"], 1.5, desc)


# ---------------------------------------------------------------------
# ModelPool / select_model
# ---------------------------------------------------------------------

def test_pool_levels_are_sorted():
    pool = make_pool([0.5, 0.0, 0.9, 0.2])
    assert pool.levels == (0.0, 0.2, 0.5, 0.9)
    assert pool.labels == ["a", "b"]


def test_pool_validation():
    with pytest.raises(ValueError):
        ModelPool({})
    with pytest.raises(ValueError):
        make_pool([0.0, 1.5])
    desc = FeatureDescriptor(name="x", dim=3, patch_size=4)
    a = Classifier(np.eye(2, 3), np.zeros(2), ["a", "b"], 0.0, desc)
    b_other = Classifier(np.eye(2, 3), np.zeros(2), ["a", "c"], 0.5, desc)
    with pytest.raises(ValueError):
        ModelPool({0.0: a, 0.5: b_other})
    desc2 = FeatureDescriptor(name="x", dim=5, patch_size=4)
    c = Classifier(np.eye(2, 5), np.zeros(2), ["a", "b"], 0.5, desc2)
    with pytest.raises(ValueError):
        ModelPool({0.0: a, 0.5: c})


def test_select_model_nearest_level():
    pool = make_pool([round(0.1 * i, 1) for i in range(10)])
    assert select_model(pool, 0.43) == 0.4
    assert select_model(pool, 0.0) == 0.0
    assert select_model(pool, 1.0) == 0.9
    assert select_model(pool, 0.87) == 0.9


def test_select_model_breaks_ties_toward_larger_level():
    pool = make_pool([round(0.1 * i, 1) for i in range(10)])
    assert select_model(pool, 0.45) == 0.5
    assert select_model(pool, 0.05) == 0.1
    assert select_model(pool, 0.85) == 0.9


def test_select_model_single_member_and_range():
    pool = make_pool([0.3])
    assert select_model(pool, 0.0) == 0.3
    assert select_model(pool, 1.0) == 0.3
    with pytest.raises(ValueError):
        select_model(pool, -0.01)
    with pytest.raises(ValueError):
        select_model(make_pool([0.0]), 1.01)


# ---------------------------------------------------------------------
# train_classifier / train_pool
# ---------------------------------------------------------------------

def test_image_feature_is_the_pooled_patch_mean():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
    ext = HandcraftedExtractor()
    got = image_feature(img, ext)
    assert np.allclose(got, pooled_feature(ext.extract(img)), atol=0.0)


def test_train_classifier_labels_and_level():
    rng = np.random.default_rng(13)
    images, labels = two_class_set(rng)
    ext = HandcraftedExtractor()
    clf = train_classifier(images, labels, 0.3, ext, epochs=30, seed=1)
    assert clf.labels == ["blue", "red"]  # sorted class table
    assert clf.trained_p == 0.3
    assert clf.descriptor.dim == ext.dim
    assert clf.predict(image_feature(images[0], ext)) == ["red"]
    assert clf.predict(image_feature(images[1], ext)) == ["blue"]
    with pytest.raises(ValueError):
        train_classifier(images, ["same"] * len(images), 0.0, ext)


def test_train_pool_members_and_coverages():
    rng = np.random.default_rng(17)
    images, labels = two_class_set(rng, n_per=3)
    ext = HandcraftedExtractor()
    params = PerlinParams(seed=0)
    pool = train_pool(images, labels, ext, levels=(0.0, 0.4),
                      params=params, fill=GrayFill(), epochs=20, seed=9)
    assert pool.levels == (0.0, 0.4)
    assert pool.train_seed == 9
    assert pool.training_coverages[0.0] == tuple(0.0 for _ in images)
    covs = pool.training_coverages[0.4]
    assert len(covs) == len(images)
    assert all(0.0 <= c < 0.4 for c in covs)
    assert any(c > 0.0 for c in covs)
    for p, clf in pool.members.items():
        assert clf.trained_p == p


def test_train_pool_is_deterministic():
    rng = np.random.default_rng(19)
    images, labels = two_class_set(rng, n_per=3)
    ext = HandcraftedExtractor()
    kw = dict(levels=(0.0, 0.5), params=PerlinParams(seed=0),
              fill=GrayFill(), epochs=15, seed=4)
    a = train_pool(images, labels, ext, **kw)
    b = train_pool(images, labels, ext, **kw)
    for p in a.levels:
        assert a.members[p].weights.tobytes() == b.members[p].weights.tobytes()
        assert a.members[p].bias.tobytes() == b.members[p].bias.tobytes()


def test_train_pool_rejects_duplicate_levels():
    rng = np.random.default_rng(23)
    images, labels = two_class_set(rng, n_per=2)
    with pytest.raises(ValueError):
        train_pool(images, labels, HandcraftedExtractor(), levels=(0.2, 0.2))


# ---------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------

def _trained_pool(seed=31):
    rng = np.random.default_rng(seed)
    images, labels = two_class_set(rng, n_per=3)
    ext = HandcraftedExtractor()
    pool = train_pool(images, labels, ext, levels=(0.0, 0.6),
                      params=PerlinParams(seed=0), fill=GrayFill(),
                      epochs=20, seed=2)
    return pool, images, ext


def test_pool_round_trip(tmp_path):
    pool, images, ext = _trained_pool()
    save_pool(pool, tmp_path / "pool")
    loaded = load_pool(tmp_path / "pool")
    assert loaded.levels == pool.levels
    assert loaded.train_seed == pool.train_seed
    assert loaded.labels == pool.labels
    assert loaded.training_coverages == {}  # not persisted
    for p in pool.levels:
        a, b = pool.members[p], loaded.members[p]
        # stored as float32: the round trip quantizes exactly once
        assert b.weights.tobytes() == a.weights.astype(
            np.float32).astype(np.float64).tobytes()
        assert b.bias.tobytes() == a.bias.astype(
            np.float32).astype(np.float64).tobytes()
        assert b.trained_p == p
        assert b.descriptor.compatible_with(a.descriptor)
        assert b.descriptor.name == a.descriptor.name
    # quantization must not flip any prediction on the training set
    x = np.stack([image_feature(img, ext) for img in images])
    for p in pool.levels:
        assert loaded.members[p].predict(x) == pool.members[p].predict(x)


def test_load_pool_missing_and_malformed_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pool(tmp_path / "nope")
    d = tmp_path / "pool"
    d.mkdir()
    (d / "pool.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_pool(d)
    (d / "pool.json").write_text('{"version": 2}')
    with pytest.raises(FormatError):
        load_pool(d)


def test_load_pool_rejects_corrupt_member_files(tmp_path):
    pool, _, _ = _trained_pool()
    save_pool(pool, tmp_path / "pool")
    model = tmp_path / "pool" / "f_0.model"
    good = model.read_bytes()

    model.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        load_pool(tmp_path / "pool")

    model.write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(FormatError):
        load_pool(tmp_path / "pool")

    model.write_bytes(good[:10])
    with pytest.raises(FormatError):
        load_pool(tmp_path / "pool")

    model.write_bytes(good + b"\0\0\0\0")
    with pytest.raises(FormatError):
        load_pool(tmp_path / "pool")

    # class count that disagrees with the manifest label table
    model.write_bytes(good[:8] + struct.pack("<I", 3) + good[12:])
    with pytest.raises(FormatError):
        load_pool(tmp_path / "pool")


# ---------------------------------------------------------------------
# end-to-end prediction
# ---------------------------------------------------------------------

def test_oasic_predict_fields_are_mutually_consistent():
    rng = np.random.default_rng(41)
    images, labels = two_class_set(rng, n_per=4, size=48)
    ext = HandcraftedExtractor()
    bank = build_bank(images, labels, ext)

    params = PerlinParams(seed=3)
    occluded, masks = [], []
    for img in images[:4]:
        occ, m = occlude_image(img, 0.5, params, GrayFill())
        occluded.append(occ)
        masks.append(m)
    bank = calibrate(bank, images, occluded, masks, ext)

    pool = train_pool(images, labels, ext, levels=(0.0, 0.5),
                      params=PerlinParams(seed=0), fill=GrayFill(),
                      epochs=25, seed=7)

    test_img, _ = occlude_image(images[0], 0.45, PerlinParams(seed=99),
                                GrayFill())
    res = oasic_predict(pool, bank, test_img, ext)
    assert res.label in ("red", "blue")
    assert res.severity == estimate_severity(res.anomaly_map)
    assert res.tau == otsu_threshold(res.anomaly_map)
    assert np.array_equal(res.mask, threshold_fixed(res.anomaly_map, res.tau))
    assert np.array_equal(res.masked_image,
                          gray_mask(test_img, res.mask, g=127))
    assert res.selected_p == select_model(pool, res.severity)
    assert res.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    member = pool.members[res.selected_p]
    assert res.label == member.predict(image_feature(res.masked_image, ext))[0]

    # a fixed threshold bypasses the automatic one
    fixed = oasic_predict(pool, bank, test_img, ext, threshold=0.75)
    assert fixed.tau == 0.75
    assert np.array_equal(fixed.mask,
                          threshold_fixed(fixed.anomaly_map, 0.75))


def test_oasic_predict_clean_image_stays_correct():
    rng = np.random.default_rng(43)
    images, labels = two_class_set(rng, n_per=4, size=48)
    ext = HandcraftedExtractor()
    bank = build_bank(images, labels, ext)
    occluded, masks = [], []
    for img in images[:4]:
        occ, m = occlude_image(img, 0.5, PerlinParams(seed=3), GrayFill())
        occluded.append(occ)
        masks.append(m)
    bank = calibrate(bank, images, occluded, masks, ext)
    pool = train_pool(images, labels, ext, levels=(0.0, 0.5),
                      params=PerlinParams(seed=0), fill=GrayFill(),
                      epochs=25, seed=7)
    res = oasic_predict(pool, bank, images[0], ext)
    assert res.label == "red"
    assert res.severity <= 0.5
