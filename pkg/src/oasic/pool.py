"""Occlusion-specialized classifier pool.

Each pool member is a multinomial logistic regression over pooled image
features, trained on a copy of the training set occluded at coverages
drawn from U(0, p) — one member per occlusion level p. At test time the
estimated severity selects the member whose level is nearest (ties
toward the larger level), so heavily occluded inputs are handled by a
model that saw similar corruption during training.

Training is plain seeded minibatch gradient descent on the softmax
cross-entropy; weights start at zero, so a (seed, data) pair always
yields byte-identical weights.

On disk a pool is a directory: ``pool.json`` (manifest) plus one
``f_<p>.model`` per member (little-endian: magic ``OCLS``, u32 version
(=1), u32 class count, u32 dim, then float32 weights (C*dim) and biases
(C)).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bank import MemoryBank, score_image
from .errors import FormatError
from .features import FeatureDescriptor, pooled_feature
from .imaging import as_image
from .masking import estimate_severity, gray_mask
from .synth import FillSpec, GrayFill, PerlinParams, synth_dataset
from .thresholding import otsu_threshold, threshold_fixed

__all__ = [
    "Classifier",
    "ModelPool",
    "PredictionResult",
    "image_feature",
    "softmax",
    "cross_entropy_and_grad",
    "fit_logistic",
    "train_classifier",
    "train_pool",
    "select_model",
    "oasic_predict",
    "save_pool",
    "load_pool",
    "DEFAULT_LEVELS",
]

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(10))  # 0.0 .. 0.9

_MODEL_MAGIC = b"OCLS"
_MODEL_VERSION = 1
# Distances this close count as a tie (|0.15-0.1| vs |0.2-0.15| differ by
# one ulp in doubles; exact comparison would mis-break the tie).
_TIE_TOL = 1e-9


def image_feature(image, extractor, stem=None) -> np.ndarray:
    """Image-level feature: the re-normalized mean of patch vectors."""
    return pooled_feature(extractor.extract(image, stem=stem))


@dataclass
class Classifier:
    """Multinomial logistic regression over image features."""

    weights: np.ndarray   # (C, dim) float64
    bias: np.ndarray      # (C,) float64
    labels: list[str]     # class label table, length C
    trained_p: float      # occlusion level of the training distribution
    descriptor: FeatureDescriptor

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        c, dim = self.weights.shape
        if c < 2:
            raise ValueError("a classifier needs at least two classes")
        if len(self.labels) != c or self.bias.shape != (c,):
            raise ValueError("labels/bias length disagrees with weights")
        if dim != self.descriptor.dim:
            raise ValueError("weight dimension disagrees with descriptor")
        if not 0.0 <= self.trained_p <= 1.0:
            raise ValueError("trained_p must lie in [0, 1]")

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Class probabilities for (N, dim) or (dim,) features."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return softmax(x @ self.weights.T + self.bias)

    def predict(self, features: np.ndarray) -> list[str]:
        probs = self.predict_proba(features)
        return [self.labels[i] for i in np.argmax(probs, axis=1)]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_and_grad(weights, bias, x, y):
    """Mean softmax cross-entropy over a batch, with analytic gradients.

    ``y`` holds integer class indices. Returns (loss, grad_w, grad_b).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    probs = softmax(x @ np.asarray(weights).T + np.asarray(bias))
    loss = float(-np.log(probs[np.arange(n), y]).mean())
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g.T @ x, g.sum(axis=0)


def fit_logistic(features, label_indices, n_classes, epochs=200, step=0.1,
                 batch=32, seed=0):
    """Seeded minibatch gradient descent from zero-initialized weights.

    Deterministic: the same (features, labels, seed) always produces
    byte-identical weights. Returns (weights, bias).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(label_indices, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (N, dim) array")
    if y.shape != (x.shape[0],):
        raise ValueError("label count does not match feature count")
    if epochs < 1 or batch < 1 or step <= 0:
        raise ValueError("epochs/batch must be >= 1 and step > 0")
    n = x.shape[0]
    w = np.zeros((n_classes, x.shape[1]))
    b = np.zeros(n_classes)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            sel = perm[start:start + batch]
            _, gw, gb = cross_entropy_and_grad(w, b, x[sel], y[sel])
            w -= step * gw
            b -= step * gb
    return w, b


def train_classifier(images, labels, p, extractor, epochs=200, step=0.1,
                     batch=32, seed=0, stems=None) -> Classifier:
    """Train one classifier on a labeled image set.

    ``p`` only records the occlusion level the set was synthesized at;
    occlude the images before calling (or pass clean images for p = 0).
    """
    images = list(images)
    labels = [str(s) for s in labels]
    if stems is None:
        stems = [None] * len(images)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("training needs at least two classes")
    index_of = {s: i for i, s in enumerate(classes)}
    x = np.stack([image_feature(img, extractor, stem=stem)
                  for img, stem in zip(images, stems)])
    y = np.array([index_of[s] for s in labels])
    w, b = fit_logistic(x, y, len(classes), epochs=epochs, step=step,
                        batch=batch, seed=seed)
    return Classifier(w, b, classes, trained_p=float(p),
                      descriptor=FeatureDescriptor.from_extractor(extractor))


@dataclass
class ModelPool:
    """Classifiers keyed by the occlusion level they were trained for."""

    members: dict[float, Classifier]
    train_seed: int | None = None
    # Realized training coverages per level; in-memory only, not persisted.
    training_coverages: dict[float, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ValueError("pool must hold at least one classifier")
        ref = next(iter(self.members.values()))
        for p, clf in self.members.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError("pool levels must lie in [0, 1]")
            if clf.labels != ref.labels:
                raise ValueError("pool members disagree on the label table")
            if not clf.descriptor.compatible_with(ref.descriptor):
                raise ValueError("pool members disagree on the feature space")

    @property
    def levels(self) -> tuple[float, ...]:
        return tuple(sorted(self.members))

    @property
    def labels(self) -> list[str]:
        return next(iter(self.members.values())).labels


def train_pool(images, labels, extractor, levels=DEFAULT_LEVELS,
               params: PerlinParams | None = None, fill: FillSpec | None = None,
               epochs=200, step=0.1, batch=32, seed=0, stems=None) -> ModelPool:
    """Train one classifier per occlusion level.

    The member for level p trains on a synthesized copy of the input set
    occluded at coverages U(0, p) (level 0 trains on the clean images).
    Dataset synthesis and optimizer shuffling derive their seeds from
    (seed, p), so the whole pool is reproducible from one master seed.
    """
    from .seeding import derive_seed

    images = list(images)
    labels = [str(s) for s in labels]
    levels = tuple(float(p) for p in levels)
    if len(set(levels)) != len(levels):
        raise ValueError("pool levels must be distinct")
    if params is None:
        params = PerlinParams(seed=0)
    if fill is None:
        fill = GrayFill()

    members: dict[float, Classifier] = {}
    coverages: dict[float, tuple[float, ...]] = {}
    for p in levels:
        tag = format(p, "g")
        if p > 0.0:
            ds = synth_dataset(images, labels, p, params, fill,
                               seed=derive_seed(seed, "pool-data", tag))
            train_images = ds.images
            coverages[p] = tuple(ds.coverages)
        else:
            train_images = images
            coverages[p] = tuple(0.0 for _ in images)
        members[p] = train_classifier(
            train_images, labels, p, extractor, epochs=epochs, step=step,
            batch=batch, seed=derive_seed(seed, "pool-train", tag), stems=stems,
        )
    return ModelPool(members, train_seed=seed, training_coverages=coverages)


def select_model(pool: ModelPool, severity: float) -> float:
    """Pool level nearest to the estimated severity; ties toward larger p."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    best_p = None
    best_d = np.inf
    for p in pool.levels:  # ascending, so a tie replaces with the larger p
        d = abs(severity - p)
        if d < best_d - _TIE_TOL or abs(d - best_d) <= _TIE_TOL:
            best_p = p
            best_d = min(best_d, d)
    return best_p


@dataclass
class PredictionResult:
    """Everything the occlusion-aware pipeline produced for one image."""

    label: str
    severity: float
    tau: float
    selected_p: float
    probabilities: np.ndarray
    anomaly_map: np.ndarray
    mask: np.ndarray
    masked_image: np.ndarray


def oasic_predict(pool: ModelPool, bank: MemoryBank, image, extractor,
                  stem=None, gray=127, threshold="otsu") -> PredictionResult:
    """Full occlusion-aware prediction for one image.

    Scores the image against the bank, thresholds the anomaly map
    (automatic by default, or at a fixed value), gray-masks the occluded
    region, estimates severity, picks the nearest-level pool member, and
    classifies the masked image.
    """
    image = as_image(image)
    amap = score_image(bank, image, extractor, stem=stem)
    if threshold == "otsu":
        tau = otsu_threshold(amap)
    else:
        tau = float(threshold)
    mask = threshold_fixed(amap, tau)
    masked = gray_mask(image, mask, g=gray)
    severity = estimate_severity(amap)
    p = select_model(pool, severity)
    clf = pool.members[p]
    probs = clf.predict_proba(image_feature(masked, extractor, stem=stem))[0]
    label = clf.labels[int(np.argmax(probs))]
    return PredictionResult(label=label, severity=severity, tau=tau,
                            selected_p=p, probabilities=probs,
                            anomaly_map=amap, mask=mask, masked_image=masked)


# ---------------------------------------------------------------------
# Pool persistence
# ---------------------------------------------------------------------

def _model_filename(p: float) -> str:
    return f"f_{format(p, 'g')}.model"


def save_pool(pool: ModelPool, dirpath) -> None:
    """Write a pool directory: pool.json plus one .model file per member."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    ref = pool.members[pool.levels[0]]
    manifest = {
        "version": 1,
        "levels": [format(p, "g") for p in pool.levels],
        "labels": ref.labels,
        "feature": {
            "name": ref.descriptor.name,
            "dim": ref.descriptor.dim,
            "patch_size": ref.descriptor.patch_size,
        },
        "train_seed": pool.train_seed,
        "members": {format(p, "g"): _model_filename(p) for p in pool.levels},
    }
    with open(dirpath / "pool.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for p in pool.levels:
        clf = pool.members[p]
        c, dim = clf.weights.shape
        with open(dirpath / _model_filename(p), "wb") as f:
            f.write(struct.pack("<4sIII", _MODEL_MAGIC, _MODEL_VERSION, c, dim))
            f.write(np.ascontiguousarray(clf.weights, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(clf.bias, dtype="<f4").tobytes())


def load_pool(dirpath) -> ModelPool:
    """Load a pool directory written by :func:`save_pool`."""
    dirpath = Path(dirpath)
    manifest_path = dirpath / "pool.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} does not exist")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e
    if manifest.get("version") != 1:
        raise FormatError(f"{manifest_path}: unsupported version")
    labels = [str(s) for s in manifest["labels"]]
    feat = manifest["feature"]
    descriptor = FeatureDescriptor(
        name=str(feat["name"]), dim=int(feat["dim"]),
        patch_size=int(feat["patch_size"]),
    )
    members: dict[float, Classifier] = {}
    for p_str, fname in manifest["members"].items():
        p = float(p_str)
        path = dirpath / fname
        data = path.read_bytes()
        if len(data) < 16:
            raise FormatError(f"{path}: truncated header")
        magic, version, c, dim = struct.unpack_from("<4sIII", data, 0)
        if magic != _MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != _MODEL_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        expected = 16 + 4 * (c * dim + c)
        if len(data) != expected:
            raise FormatError(
                f"{path}: payload is {len(data)} bytes, expected {expected}"
            )
        if c != len(labels) or dim != descriptor.dim:
            raise FormatError(f"{path}: shape disagrees with manifest")
        w = np.frombuffer(data, dtype="<f4", count=c * dim, offset=16)
        b = np.frombuffer(data, dtype="<f4", count=c, offset=16 + 4 * c * dim)
        members[p] = Classifier(
            w.astype(np.float64).reshape(c, dim), b.astype(np.float64),
            labels, trained_p=p, descriptor=descriptor,
        )
    seed = manifest.get("train_seed")
    return ModelPool(members, train_seed=None if seed is None else int(seed))
