import numpy as np
import pytest

from ctdenoise.data import make_synthetic_blobs
from ctdenoise.errors import ValidationError
from ctdenoise.noise import (
    NoiseSpec,
    averaged_true_transition,
    apply_noise,
    corrupt_asymmetric,
    corrupt_instance_dependent,
    corrupt_symmetric,
    load_corruption_record,
    perturb_instances,
    save_corruption_record,
)


def cyclic_map(k):
    return {c: (c + 1) % k for c in range(k)}


class TestSymmetric:
    def test_rate_zero_is_identity(self):
        labels = np.arange(10) % 3
        noisy, rec = corrupt_symmetric(labels, 3, 0.0, seed=0)
        assert np.array_equal(noisy, labels)
        assert not rec.flip_mask.any()
        assert rec.realized_rate == 0.0

    def test_shared_matrix_values(self):
        _, rec = corrupt_symmetric(np.zeros(5, dtype=int), 10, 0.2, seed=0)
        assert np.allclose(np.diag(rec.shared_T), 0.8)
        off = rec.shared_T[~np.eye(10, dtype=bool)]
        assert np.allclose(off, 0.2 / 9)

    def test_realized_rate_within_3_sigma(self):
        n, rate = 50_000, 0.2
        labels = np.arange(n) % 10
        _, rec = corrupt_symmetric(labels, 10, rate, seed=7)
        sigma = np.sqrt(rate * (1 - rate) / n)
        assert abs(rec.realized_rate - rate) <= 3 * sigma

    def test_flips_change_labels(self):
        labels = np.arange(1000) % 4
        noisy, rec = corrupt_symmetric(labels, 4, 0.5, seed=1)
        assert np.array_equal(rec.flip_mask, noisy != labels)

    def test_rejects_k_below_two(self):
        with pytest.raises(ValidationError):
            corrupt_symmetric(np.zeros(3, dtype=int), 1, 0.1, seed=0)


class TestAsymmetric:
    def test_identity_map_rejected_by_spec_but_noop_here(self):
        labels = np.arange(20) % 3
        noisy, rec = corrupt_asymmetric(labels, {0: 0, 1: 1, 2: 2}, 0.9, seed=0)
        assert np.array_equal(noisy, labels)
        assert rec.realized_rate == 0.0

    def test_two_class_swap_matrix(self):
        _, rec = corrupt_asymmetric(np.array([0, 1]), {0: 1, 1: 0}, 0.4, seed=0)
        assert np.allclose(rec.shared_T, [[0.6, 0.4], [0.4, 0.6]])

    def test_flips_only_along_class_map(self):
        k = 5
        labels = np.arange(10_000) % k
        cmap = cyclic_map(k)
        noisy, rec = corrupt_asymmetric(labels, cmap, 0.3, seed=2)
        flipped = rec.flip_mask
        assert np.all(noisy[flipped] == np.vectorize(cmap.get)(labels[flipped]))
        assert np.array_equal(noisy[~flipped], labels[~flipped])

    def test_realized_rate_within_3_sigma(self):
        n, rate, k = 50_000, 0.4, 10
        labels = np.arange(n) % k
        _, rec = corrupt_asymmetric(labels, cyclic_map(k), rate, seed=3)
        sigma = np.sqrt(rate * (1 - rate) / n)
        assert abs(rec.realized_rate - rate) <= 3 * sigma

    def test_missing_class_raises(self):
        with pytest.raises(ValidationError):
            corrupt_asymmetric(np.array([0, 1, 2]), {0: 1, 1: 0}, 0.2, seed=0)


class TestInstanceDependent:
    def test_rate_zero_no_flips(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((100, 8))
        labels = rng.integers(0, 4, 100)
        noisy, rec = corrupt_instance_dependent(feats, labels, 4, 0.0, seed=0)
        assert np.array_equal(noisy, labels)
        assert rec.realized_rate == 0.0

    def test_identical_instances_identical_rows(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal(16)
        feats = rng.standard_normal((50, 16))
        feats[7] = base
        feats[31] = base
        labels = rng.integers(0, 5, 50)
        labels[31] = labels[7]
        _, rec = corrupt_instance_dependent(feats, labels, 5, 0.3, seed=4)
        assert np.array_equal(rec.per_instance_rows[7], rec.per_instance_rows[31])

    def test_realized_rate_near_target(self):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((10_000, 12))
        labels = rng.integers(0, 10, 10_000)
        _, rec = corrupt_instance_dependent(feats, labels, 10, 0.4, seed=5)
        assert 0.37 <= rec.realized_rate <= 0.43

    def test_rows_on_simplex(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((200, 6))
        labels = rng.integers(0, 3, 200)
        _, rec = corrupt_instance_dependent(feats, labels, 3, 0.25, seed=6)
        assert np.all(rec.per_instance_rows >= 0)
        assert np.allclose(rec.per_instance_rows.sum(axis=1), 1.0, atol=1e-9)

    def test_rate_varies_with_instance(self):
        rng = np.random.default_rng(4)
        feats = rng.standard_normal((2000, 10))
        labels = rng.integers(0, 4, 2000)
        _, rec = corrupt_instance_dependent(feats, labels, 4, 0.3, seed=7)
        diag = 1.0 - rec.per_instance_rows[np.arange(2000), labels]
        assert diag.std() > 0.01  # instance-dependence, not a shared matrix

    def test_determinism(self):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((100, 4))
        labels = rng.integers(0, 3, 100)
        n1, r1 = corrupt_instance_dependent(feats, labels, 3, 0.2, seed=8)
        n2, r2 = corrupt_instance_dependent(feats, labels, 3, 0.2, seed=8)
        assert np.array_equal(n1, n2)
        assert np.array_equal(r1.per_instance_rows, r2.per_instance_rows)


class TestPerturb:
    def test_gamma_zero_identical(self):
        x = np.random.default_rng(0).standard_normal((10, 4)).astype(np.float32)
        out = perturb_instances(x, 0.0, seed=1)
        assert out.tobytes() == x.tobytes()

    def test_mean_shift_half_gamma(self):
        x = np.zeros((10, 3072), dtype=np.float32)
        out = perturb_instances(x, 1.0, seed=2)
        assert abs(float((out - x).mean()) - 0.5) < 0.03

    def test_support_bounded_by_gamma(self):
        x = np.zeros((100, 64), dtype=np.float32)
        gamma = 0.7
        delta = perturb_instances(x, gamma, seed=3) - x
        assert delta.min() >= 0.0 and delta.max() <= gamma

    def test_original_unmodified_and_labels_untouched(self):
        ds = make_synthetic_blobs(k=2, n_per_class=10, dim=4, separation=1.0, seed=0)
        before = ds.features.copy()
        perturb_instances(ds.features, 0.9, seed=4)
        assert np.array_equal(ds.features, before)


class TestAveragedTransition:
    def test_sym_returns_shared_matrix(self):
        labels = np.arange(100) % 4
        _, rec = corrupt_symmetric(labels, 4, 0.3, seed=0)
        avg, undefined = averaged_true_transition(rec, labels)
        assert undefined == []
        assert np.allclose(avg, rec.shared_T)

    def test_idn_identical_instances(self):
        feats = np.ones((20, 5))
        labels = np.zeros(20, dtype=int)
        labels[10:] = 1
        _, rec = corrupt_instance_dependent(feats, labels, 3, 0.2, seed=1)
        avg, undefined = averaged_true_transition(rec, labels)
        assert 2 in undefined  # class 2 has no instances
        assert np.allclose(avg[0], rec.per_instance_rows[0])

    def test_matches_independent_reaveraging(self):
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((500, 8))
        labels = rng.integers(0, 5, 500)
        _, rec = corrupt_instance_dependent(feats, labels, 5, 0.35, seed=9)
        avg, _ = averaged_true_transition(rec, labels)
        # independent brute-force re-averaging
        for c in range(5):
            rows = [rec.per_instance_rows[i] for i in range(500) if labels[i] == c]
            expect = np.sum(rows, axis=0) / len(rows)
            assert np.abs(avg[c] - expect).max() < 1e-12


def test_record_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((64, 6))
    labels = rng.integers(0, 4, 64)
    _, rec = corrupt_instance_dependent(feats, labels, 4, 0.3, seed=10)
    path = save_corruption_record(rec, str(tmp_path), "r")
    back = load_corruption_record(path)
    assert back.kind == "IDN" and back.num_classes == 4
    assert np.array_equal(back.flip_mask, rec.flip_mask)
    assert np.array_equal(back.per_instance_rows, rec.per_instance_rows)
    assert np.array_equal(back.clean_labels, rec.clean_labels)


def test_apply_noise_validates_spec(blobs10):
    with pytest.raises(ValidationError):
        apply_noise(blobs10, NoiseSpec(kind="ASYM", rate=0.2, seed=0, class_map=None))
    with pytest.raises(ValidationError):
        apply_noise(blobs10, NoiseSpec(kind="SYM", rate=1.0, seed=0))
    noisy_ds, rec = apply_noise(blobs10, NoiseSpec(kind="SYM", rate=0.2, seed=0))
    assert noisy_ds.noisy_labels is not None
    assert noisy_ds.features is blobs10.features  # corruption never alters features
