"""Dataset ingestion and a portable on-disk dataset format.

A dataset on disk is a JSON manifest next to raw binary blobs:

* features: row-major float32, shape ``[num_examples, *feature_shape]``
* labels:   little-endian int32, one file per label kind (clean / noisy)

The manifest may carry per-channel standardization statistics of the raw
blob; when present, :func:`load_dataset` returns ``(raw - mean) / std``.
Vendor formats (FashionMNIST idx, CIFAR pickles) never enter this module;
they are converted once by the CLI (see :mod:`ctdenoise.convert`).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    LabelRangeError,
    ManifestError,
    MissingFileError,
    SizeMismatchError,
    ValidationError,
)

MANIFEST_FORMAT_VERSION = 1

_LABEL_DTYPE = np.dtype("<i4")
_FEATURE_DTYPE = np.dtype("<f4")


@dataclass
class DatasetManifest:
    """Schema of the on-disk dataset format (format_version 1)."""

    name: str
    num_classes: int
    feature_shape: tuple[int, ...]
    num_examples: int
    feature_blob_path: str
    label_path: Optional[str] = None
    noisy_label_path: Optional[str] = None
    dtype: str = "float32"
    layout: str = "row-major"
    standardization: Optional[dict] = None  # {"mean": [...], "std": [...]}

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ManifestError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_examples < 0:
            raise ManifestError(f"num_examples must be >= 0, got {self.num_examples}")
        if any(s <= 0 for s in self.feature_shape):
            raise ManifestError(f"feature_shape must be positive, got {self.feature_shape}")
        if self.dtype != "float32":
            raise ManifestError(f"unsupported dtype {self.dtype!r}")
        if self.layout != "row-major":
            raise ManifestError(f"unsupported layout {self.layout!r}")
        if self.standardization is not None:
            keys = set(self.standardization)
            if keys != {"mean", "std"}:
                raise ManifestError(f"standardization keys must be mean/std, got {sorted(keys)}")

    def to_json_dict(self) -> dict:
        return {
            "format_version": MANIFEST_FORMAT_VERSION,
            "name": self.name,
            "num_classes": self.num_classes,
            "feature_shape": list(self.feature_shape),
            "num_examples": self.num_examples,
            "feature_blob_path": self.feature_blob_path,
            "label_path": self.label_path,
            "noisy_label_path": self.noisy_label_path,
            "dtype": self.dtype,
            "layout": self.layout,
            "standardization": self.standardization,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DatasetManifest":
        if not isinstance(doc, dict):
            raise ManifestError("manifest root must be a JSON object")
        version = doc.get("format_version")
        if version != MANIFEST_FORMAT_VERSION:
            raise ManifestError(f"unsupported manifest format_version {version!r}")
        required = {"name", "num_classes", "feature_shape", "num_examples", "feature_blob_path"}
        missing = required - set(doc)
        if missing:
            raise ManifestError(f"manifest missing fields: {sorted(missing)}")
        known = required | {
            "format_version",
            "label_path",
            "noisy_label_path",
            "dtype",
            "layout",
            "standardization",
        }
        unknown = set(doc) - known
        if unknown:
            raise ManifestError(f"manifest carries unknown fields: {sorted(unknown)}")
        manifest = cls(
            name=doc["name"],
            num_classes=int(doc["num_classes"]),
            feature_shape=tuple(int(s) for s in doc["feature_shape"]),
            num_examples=int(doc["num_examples"]),
            feature_blob_path=doc["feature_blob_path"],
            label_path=doc.get("label_path"),
            noisy_label_path=doc.get("noisy_label_path"),
            dtype=doc.get("dtype", "float32"),
            layout=doc.get("layout", "row-major"),
            standardization=doc.get("standardization"),
        )
        manifest.validate()
        return manifest


@dataclass
class LabeledDataset:
    """In-memory dataset: float32 features plus clean and/or noisy labels."""

    features: np.ndarray
    manifest: DatasetManifest
    clean_labels: Optional[np.ndarray] = None
    noisy_labels: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.manifest.num_examples
        k = self.manifest.num_classes
        expected = (n,) + tuple(self.manifest.feature_shape)
        if tuple(self.features.shape) != expected:
            raise ValidationError(
                f"features shape {self.features.shape} != manifest shape {expected}"
            )
        if not np.isfinite(self.features).all():
            raise ValidationError("features contain NaN or Inf")
        for kind, labels in (("clean", self.clean_labels), ("noisy", self.noisy_labels)):
            if labels is None:
                continue
            if labels.shape != (n,):
                raise ValidationError(f"{kind} labels shape {labels.shape} != ({n},)")
            _check_label_range(labels, k, kind)

    def __len__(self) -> int:
        return self.manifest.num_examples

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def with_noisy_labels(self, noisy: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features,
            manifest=self.manifest,
            clean_labels=self.clean_labels,
            noisy_labels=np.asarray(noisy, dtype=np.int64),
            provenance=dict(self.provenance),
        )


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/test partition: same seed, same partition."""

    train_fraction: float
    seed: int
    stratified: bool = False

    def validate(self) -> None:
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValidationError(
                f"train_fraction must be in (0, 1], got {self.train_fraction}"
            )


def _check_label_range(labels: np.ndarray, k: int, kind: str) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelRangeError(
            f"{kind} labels outside [0, {k}): min={labels.min()}, max={labels.max()}"
        )


def _read_blob(path: str, dtype: np.dtype, expected_items: int, what: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise MissingFileError(f"{what} blob not found: {path}")
    size = os.path.getsize(path)
    expected_bytes = expected_items * dtype.itemsize
    if size != expected_bytes:
        raise SizeMismatchError(
            f"{what} blob {path}: {size} bytes on disk, manifest implies {expected_bytes}"
        )
    return np.fromfile(path, dtype=dtype)


def load_dataset(manifest_path: str) -> LabeledDataset:
    """Load a dataset from its manifest.

    Features are cast to float32 and standardized when the manifest carries
    statistics.  Raises distinct errors for a missing file, a blob whose size
    disagrees with the manifest, and labels outside [0, num_classes).
    """
    if not os.path.isfile(manifest_path):
        raise MissingFileError(f"manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    manifest = DatasetManifest.from_json_dict(doc)

    base = os.path.dirname(os.path.abspath(manifest_path))
    n = manifest.num_examples
    shape = (n,) + tuple(manifest.feature_shape)
    n_items = int(np.prod(shape)) if n else 0

    blob_path = os.path.join(base, manifest.feature_blob_path)
    features = _read_blob(blob_path, _FEATURE_DTYPE, n_items, "feature").reshape(shape)
    if not np.isfinite(features).all():
        raise ManifestError(f"feature blob {blob_path} contains NaN or Inf")

    if manifest.standardization is not None:
        features = _apply_standardization(features, manifest)

    labels = {}
    for kind, rel in (("clean", manifest.label_path), ("noisy", manifest.noisy_label_path)):
        if rel is None:
            continue
        arr = _read_blob(os.path.join(base, rel), _LABEL_DTYPE, n, f"{kind} label")
        _check_label_range(arr, manifest.num_classes, kind)
        labels[kind] = arr.astype(np.int64)

    return LabeledDataset(
        features=features,
        manifest=manifest,
        clean_labels=labels.get("clean"),
        noisy_labels=labels.get("noisy"),
        provenance={"manifest_path": os.path.abspath(manifest_path)},
    )


def _channel_axes(feature_shape: Sequence[int]) -> Optional[tuple[int, ...]]:
    # [C, H, W] images standardize per channel; anything else globally.
    if len(feature_shape) == 3:
        return (0, 2, 3)
    return None


def _apply_standardization(features: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    stats = manifest.standardization
    mean = np.asarray(stats["mean"], dtype=np.float32)
    std = np.asarray(stats["std"], dtype=np.float32)
    if np.any(std <= 0):
        raise ManifestError("standardization std must be positive")
    if _channel_axes(manifest.feature_shape) is not None:
        c = manifest.feature_shape[0]
        if mean.shape != (c,) or std.shape != (c,):
            raise ManifestError(f"standardization stats must have length {c}")
        shape = (1, c) + (1,) * (len(manifest.feature_shape) - 1)
        return (features - mean.reshape(shape)) / std.reshape(shape)
    if mean.shape != (1,) or std.shape != (1,):
        raise ManifestError("non-image standardization stats must have length 1")
    return (features - mean[0]) / std[0]


def compute_standardization(features: np.ndarray, feature_shape: Sequence[int]) -> dict:
    """Per-channel (images) or global (flat) mean/std of a raw feature array."""
    axes = _channel_axes(feature_shape)
    if axes is not None:
        mean = features.mean(axis=axes)
        std = features.std(axis=axes)
    else:
        mean = np.array([features.mean()])
        std = np.array([features.std()])
    std = np.where(std <= 0, 1.0, std)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def save_dataset(
    dataset: LabeledDataset,
    out_dir: str,
    name: Optional[str] = None,
    standardization: Optional[dict] = None,
) -> str:
    """Write a dataset to ``out_dir`` and return the manifest path.

    In-memory features are written verbatim.  Without a ``standardization``
    entry a save/load round trip is bit-exact; with one (statistics of the raw
    blob, as from :func:`compute_standardization`), loads return standardized
    features.
    """
    os.makedirs(out_dir, exist_ok=True)
    name = name or dataset.manifest.name
    blob_rel = f"{name}.features.f32"
    manifest = replace(
        dataset.manifest,
        name=name,
        feature_blob_path=blob_rel,
        label_path=f"{name}.labels.clean.i32" if dataset.clean_labels is not None else None,
        noisy_label_path=f"{name}.labels.noisy.i32" if dataset.noisy_labels is not None else None,
        standardization=standardization,
    )
    manifest.validate()
    dataset.features.astype(_FEATURE_DTYPE).tofile(os.path.join(out_dir, blob_rel))
    if dataset.clean_labels is not None:
        dataset.clean_labels.astype(_LABEL_DTYPE).tofile(os.path.join(out_dir, manifest.label_path))
    if dataset.noisy_labels is not None:
        dataset.noisy_labels.astype(_LABEL_DTYPE).tofile(
            os.path.join(out_dir, manifest.noisy_label_path)
        )
    manifest_path = os.path.join(out_dir, f"{name}.manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def make_synthetic_blobs(
    k: int,
    n_per_class: int,
    dim: int,
    separation: float,
    seed: int,
    name: str = "synthetic-blobs",
) -> LabeledDataset:
    """Isotropic Gaussian clusters, class ``c`` centered at ``separation * e_{c mod dim}``.

    A fast fixture for desk-scale runs: with large separation a linear
    classifier fits it nearly perfectly, with separation 0 the classes are
    indistinguishable.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if n_per_class < 1:
        raise ValidationError(f"n_per_class must be >= 1, got {n_per_class}")
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")

    rng = np.random.default_rng(seed)
    n = k * n_per_class
    features = rng.standard_normal((n, dim))
    labels = np.repeat(np.arange(k), n_per_class)
    for c in range(k):
        features[labels == c, c % dim] += separation
    perm = rng.permutation(n)
    features = features[perm].astype(np.float32)
    labels = labels[perm].astype(np.int64)

    manifest = DatasetManifest(
        name=name,
        num_classes=k,
        feature_shape=(dim,),
        num_examples=n,
        feature_blob_path=f"{name}.features.f32",
        label_path=f"{name}.labels.clean.i32",
    )
    return LabeledDataset(
        features=features,
        manifest=manifest,
        clean_labels=labels,
        provenance={"generator": "synthetic-blobs", "seed": seed, "separation": separation},
    )


def _take(dataset: LabeledDataset, indices: np.ndarray, name_suffix: str) -> LabeledDataset:
    manifest = replace(
        dataset.manifest,
        name=f"{dataset.manifest.name}-{name_suffix}",
        num_examples=int(indices.size),
    )
    prov = dict(dataset.provenance)
    prov["source_indices"] = indices.copy()
    return LabeledDataset(
        features=dataset.features[indices],
        manifest=manifest,
        clean_labels=None if dataset.clean_labels is None else dataset.clean_labels[indices],
        noisy_labels=None if dataset.noisy_labels is None else dataset.noisy_labels[indices],
        provenance=prov,
    )


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint, exhaustive partition into (train, rest), deterministic under seed.

    Stratified mode keeps per-class counts within one example of the target
    fraction.  The returned datasets record their source indices under
    ``provenance["source_indices"]``.
    """
    spec.validate()
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot split an empty dataset")

    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        if dataset.clean_labels is None:
            raise ValidationError("stratified split requires clean labels")
        train_parts = []
        for c in range(dataset.num_classes):
            idx = np.flatnonzero(dataset.clean_labels == c)
            rng.shuffle(idx)
            n_train = int(np.floor(spec.train_fraction * idx.size + 0.5))
            train_parts.append(idx[:n_train])
        train_idx = np.sort(np.concatenate(train_parts))
    else:
        perm = rng.permutation(n)
        n_train = int(np.floor(spec.train_fraction * n + 0.5))
        train_idx = np.sort(perm[:n_train])

    mask = np.zeros(n, dtype=bool)
    mask[train_idx] = True
    rest_idx = np.flatnonzero(~mask)
    return _take(dataset, train_idx, "train"), _take(dataset, rest_idx, "rest")
