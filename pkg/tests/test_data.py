import numpy as np
import pytest

from mcover import committee as cm
from mcover import data as dt


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(40, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 4, size=40, dtype=np.uint8)
    return dt.IdxDataset(images=images, labels=labels)


class TestIdxIo:
    def test_roundtrip_bytes_identical(self, small_dataset, tmp_path):
        ipath, lpath = tmp_path / "imgs", tmp_path / "labs"
        dt.write_idx(small_dataset, ipath, lpath)
        first_i, first_l = ipath.read_bytes(), lpath.read_bytes()
        parsed = dt.read_idx(ipath, lpath)
        assert np.array_equal(parsed.images, small_dataset.images)
        assert np.array_equal(parsed.labels, small_dataset.labels)
        dt.write_idx(parsed, ipath, lpath)
        assert ipath.read_bytes() == first_i
        assert lpath.read_bytes() == first_l

    def test_parses_mnist_sized_headers(self, tmp_path):
        images = np.zeros((3, 28, 28), dtype=np.uint8)
        labels = np.zeros(3, dtype=np.uint8)
        dt.write_idx(dt.IdxDataset(images, labels), tmp_path / "i", tmp_path / "l")
        parsed = dt.read_idx(tmp_path / "i", tmp_path / "l")
        assert parsed.images.shape == (3, 28, 28)
        assert parsed.provenance["images_sha256"]

    def test_label_file_as_images_is_bad_magic(self, small_dataset, tmp_path):
        ipath, lpath = tmp_path / "imgs", tmp_path / "labs"
        dt.write_idx(small_dataset, ipath, lpath)
        with pytest.raises(dt.IdxMagicError):
            dt.read_idx(lpath, lpath)

    def test_truncated_payload_names_byte_counts(self, small_dataset, tmp_path):
        ipath, lpath = tmp_path / "imgs", tmp_path / "labs"
        dt.write_idx(small_dataset, ipath, lpath)
        raw = ipath.read_bytes()
        ipath.write_bytes(raw[:-7])
        with pytest.raises(dt.IdxTruncationError) as err:
            dt.read_idx(ipath, lpath)
        assert str(len(raw)) in str(err.value)
        assert str(len(raw) - 7) in str(err.value)

    def test_count_mismatch(self, small_dataset, tmp_path):
        ipath, lpath = tmp_path / "imgs", tmp_path / "labs"
        dt.write_idx(small_dataset, ipath, lpath)
        lpath.write_bytes(dt.serialize_idx_labels(small_dataset.labels[:-1]))
        with pytest.raises(dt.IdxCountMismatchError):
            dt.read_idx(ipath, lpath)


class TestNormalize:
    def test_zero_pixel(self):
        assert dt.normalize_pixels(0) == pytest.approx(-0.4242, abs=5e-5)

    def test_full_pixel(self):
        assert dt.normalize_pixels(255) == pytest.approx(2.8215, abs=5e-5)

    def test_affine_midpoint(self):
        lo, hi = dt.normalize_pixels(0), dt.normalize_pixels(255)
        assert dt.normalize_pixels(127.5) == pytest.approx((lo + hi) / 2, rel=1e-12)

    def test_flattens(self, small_dataset):
        out = dt.normalize_mnist(small_dataset)
        assert out.shape == (40, 20)


class TestBinarize:
    def test_threshold_zero(self, small_dataset):
        out = dt.binarize_two_class(small_dataset, 0, 1, threshold=0.0)
        flat = small_dataset.images.reshape(40, -1)
        mask = np.isin(small_dataset.labels, (0, 1))
        assert np.array_equal(out.inputs == 1, flat[mask] > 0)

    def test_entries_pm_one(self, small_dataset):
        out = dt.binarize_two_class(small_dataset, 1, 2)
        assert set(np.unique(out.inputs)) <= {-1, 1}
        assert set(np.unique(out.labels)) <= {-1, 1}

    def test_balanced_subsample(self):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(300, 3, 3), dtype=np.uint8)
        labels = np.repeat(np.arange(3, dtype=np.uint8), 100)
        ds = dt.IdxDataset(images, labels)
        for p in (21, 40):
            out = dt.binarize_two_class(ds, 0, 2, subsample_p=p,
                                        rng=np.random.default_rng(2))
            counts = [(out.labels == 1).sum(), (out.labels == -1).sum()]
            assert abs(counts[0] - counts[1]) <= 1
            assert out.p == p

    def test_subsample_deterministic(self, small_dataset):
        a = dt.binarize_two_class(small_dataset, 0, 1, subsample_p=6,
                                  rng=np.random.default_rng(9))
        b = dt.binarize_two_class(small_dataset, 0, 1, subsample_p=6,
                                  rng=np.random.default_rng(9))
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    def test_oversized_request(self, small_dataset):
        with pytest.raises(dt.DatasetSizeError):
            dt.binarize_two_class(small_dataset, 0, 1, subsample_p=1000,
                                  rng=np.random.default_rng(0))

    def test_same_class_rejected(self, small_dataset):
        with pytest.raises(ValueError):
            dt.binarize_two_class(small_dataset, 1, 1)


class TestSyntheticTeacher:
    def test_labels_pm_one(self):
        train, test = dt.synthetic_committee_teacher(20, 3, 50, 30,
                                                     np.random.default_rng(0))
        assert set(np.unique(train.labels)) <= {-1, 1}
        assert train.p == 50 and test.p == 30

    def test_teacher_is_consistent(self):
        rng = np.random.default_rng(1)
        n, k = 15, 3
        teacher = (rng.integers(0, 2, size=(k, n)) * 2 - 1).astype(np.float64)
        x = (rng.integers(0, 2, size=(200, n)) * 2 - 1).astype(np.float64)
        y = cm.forward_hard(teacher, x)
        assert np.array_equal(cm.forward_hard(teacher, x), y)

    def test_label_balance(self):
        train, _ = dt.synthetic_committee_teacher(31, 5, 10_000, 10,
                                                  np.random.default_rng(2))
        frac = (train.labels == 1).mean()
        # binomial(n=1e4, p=1/2): three sigma is 0.015
        assert abs(frac - 0.5) < 0.015

    def test_even_k_rejected(self):
        with pytest.raises(ValueError):
            dt.synthetic_committee_teacher(10, 4, 5, 5, np.random.default_rng(0))


class TestSyntheticImages:
    def test_shapes_and_dtype(self):
        train, test = dt.synthetic_image_classes(50, 20, np.random.default_rng(0))
        assert train.images.shape == (50, 28, 28)
        assert train.images.dtype == np.uint8
        assert test.count == 20

    def test_write_quadruple(self, tmp_path):
        paths = dt.write_synthetic_idx(tmp_path, 30, 10, np.random.default_rng(1))
        parsed = dt.read_idx(paths["train_images"], paths["train_labels"])
        assert parsed.count == 30
