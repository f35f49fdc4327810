import json
import os

import numpy as np
import pytest

from ctdenoise.data import (
    DatasetManifest,
    LabeledDataset,
    SplitSpec,
    compute_standardization,
    load_dataset,
    make_synthetic_blobs,
    save_dataset,
    split,
)
from ctdenoise.errors import (
    LabelRangeError,
    ManifestError,
    MissingFileError,
    SizeMismatchError,
    ValidationError,
)


def _write_raw_dataset(tmp_path, n=4, k=2, dim=3, labels=None):
    features = np.arange(n * dim, dtype="<f4").reshape(n, dim)
    labels = np.asarray([0, 1, 0, 1] if labels is None else labels, dtype="<i4")
    features.tofile(tmp_path / "x.f32")
    labels.tofile(tmp_path / "y.i32")
    manifest = {
        "format_version": 1,
        "name": "raw",
        "num_classes": k,
        "feature_shape": [dim],
        "num_examples": n,
        "feature_blob_path": "x.f32",
        "label_path": "y.i32",
        "noisy_label_path": None,
        "dtype": "float32",
        "layout": "row-major",
        "standardization": None,
    }
    path = tmp_path / "raw.manifest.json"
    path.write_text(json.dumps(manifest))
    return str(path), features, labels


def test_load_dataset_size_arithmetic(tmp_path):
    path, features, labels = _write_raw_dataset(tmp_path)
    ds = load_dataset(path)
    assert len(ds) == 4
    assert ds.features.dtype == np.float32
    assert np.array_equal(ds.features, features)
    assert np.array_equal(ds.clean_labels, labels)


def test_load_dataset_blob_too_short(tmp_path):
    path, _, _ = _write_raw_dataset(tmp_path)
    # rewrite the blob with 3 rows while the manifest declares 4
    np.arange(9, dtype="<f4").tofile(tmp_path / "x.f32")
    with pytest.raises(SizeMismatchError):
        load_dataset(path)


def test_load_dataset_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_dataset(str(tmp_path / "nope.manifest.json"))
    path, _, _ = _write_raw_dataset(tmp_path)
    os.remove(tmp_path / "x.f32")
    with pytest.raises(MissingFileError):
        load_dataset(path)


def test_load_dataset_label_out_of_range(tmp_path):
    path, _, _ = _write_raw_dataset(tmp_path, labels=[0, 1, 2, 0])
    with pytest.raises(LabelRangeError):
        load_dataset(path)


def test_load_dataset_rejects_unknown_manifest_keys(tmp_path):
    path, _, _ = _write_raw_dataset(tmp_path)
    doc = json.loads(open(path).read())
    doc["surprise"] = 1
    open(path, "w").write(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_dataset(path)


def test_round_trip_bit_exact(tmp_path):
    ds = make_synthetic_blobs(k=3, n_per_class=17, dim=5, separation=2.0, seed=9)
    noisy = (ds.clean_labels + 1) % 3
    ds = ds.with_noisy_labels(noisy)
    manifest_path = save_dataset(ds, str(tmp_path), name="rt")
    back = load_dataset(manifest_path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.clean_labels, ds.clean_labels)
    assert np.array_equal(back.noisy_labels, ds.noisy_labels)
    # second round trip is byte-identical on disk too
    manifest_path2 = save_dataset(back, str(tmp_path / "again"), name="rt")
    blob1 = open(tmp_path / "rt.features.f32", "rb").read()
    blob2 = open(tmp_path / "again" / "rt.features.f32", "rb").read()
    assert blob1 == blob2


def test_standardization_applied_at_load(tmp_path):
    rng = np.random.default_rng(0)
    features = (rng.random((50, 2, 4, 4)) * 255).astype(np.float32)
    manifest = DatasetManifest(
        name="img",
        num_classes=2,
        feature_shape=(2, 4, 4),
        num_examples=50,
        feature_blob_path="",
        label_path="",
    )
    ds = LabeledDataset(features=features, manifest=manifest,
                        clean_labels=rng.integers(0, 2, 50).astype(np.int64))
    stats = compute_standardization(features, (2, 4, 4))
    path = save_dataset(ds, str(tmp_path), name="img", standardization=stats)
    back = load_dataset(path)
    # per-channel mean ~0, std ~1 after load
    assert np.allclose(back.features.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    assert np.allclose(back.features.std(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_synthetic_blobs_linear_separability():
    ds = make_synthetic_blobs(k=2, n_per_class=100, dim=2, separation=6.0, seed=0)
    # stated independent oracle: a logistic baseline fits it almost perfectly
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression().fit(ds.features, ds.clean_labels)
    assert clf.score(ds.features, ds.clean_labels) >= 0.99


def test_synthetic_blobs_zero_separation_chance_level():
    ds = make_synthetic_blobs(k=4, n_per_class=200, dim=8, separation=0.0, seed=1)
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression().fit(ds.features, ds.clean_labels)
    # classes are indistinguishable: the fit cannot do much better than 1/k
    assert clf.score(ds.features, ds.clean_labels) < 0.40


def test_synthetic_blobs_deterministic():
    a = make_synthetic_blobs(k=3, n_per_class=10, dim=4, separation=1.0, seed=5)
    b = make_synthetic_blobs(k=3, n_per_class=10, dim=4, separation=1.0, seed=5)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.clean_labels, b.clean_labels)


def test_synthetic_blobs_validates_args():
    with pytest.raises(ValidationError):
        make_synthetic_blobs(k=1, n_per_class=10, dim=4, separation=1.0, seed=0)
    with pytest.raises(ValidationError):
        make_synthetic_blobs(k=2, n_per_class=0, dim=4, separation=1.0, seed=0)


def test_split_80_20():
    ds = make_synthetic_blobs(k=2, n_per_class=50, dim=3, separation=2.0, seed=0)
    left, right = split(ds, SplitSpec(train_fraction=0.8, seed=0))
    assert len(left) == 80 and len(right) == 20


def test_split_stratified_balanced():
    ds = make_synthetic_blobs(k=2, n_per_class=50, dim=3, separation=2.0, seed=0)
    left, right = split(ds, SplitSpec(train_fraction=0.5, seed=3, stratified=True))
    for side in (left, right):
        counts = np.bincount(side.clean_labels, minlength=2)
        assert counts.tolist() == [25, 25]


def test_split_is_partition():
    ds = make_synthetic_blobs(k=3, n_per_class=33, dim=2, separation=1.0, seed=2)
    left, right = split(ds, SplitSpec(train_fraction=0.7, seed=1))
    li = left.provenance["source_indices"]
    ri = right.provenance["source_indices"]
    union = np.sort(np.concatenate([li, ri]))
    assert np.array_equal(union, np.arange(len(ds)))
    assert np.intersect1d(li, ri).size == 0


def test_split_deterministic_across_calls():
    ds = make_synthetic_blobs(k=2, n_per_class=40, dim=2, separation=1.0, seed=0)
    spec = SplitSpec(train_fraction=0.6, seed=11, stratified=True)
    a, _ = split(ds, spec)
    b, _ = split(ds, spec)
    assert np.array_equal(a.provenance["source_indices"], b.provenance["source_indices"])


def test_split_rejects_bad_fraction():
    ds = make_synthetic_blobs(k=2, n_per_class=5, dim=2, separation=1.0, seed=0)
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValidationError):
            split(ds, SplitSpec(train_fraction=bad, seed=0))
