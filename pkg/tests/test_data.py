"""Tests for data module."""

import gzip
import struct

import numpy as np
import pytest

from src.data import (
    Dataset,
    DatasetError,
    DatasetName,
    DatasetSpec,
    NormalizationMode,
    NormalizationTransform,
    Split,
    SyntheticSpec,
    denormalize,
    load_cifar10,
    load_dataset,
    load_idx,
    load_saved_dataset,
    normalize,
    partition_iid,
    persist_synthetic,
    save_dataset,
    split_validation,
    synth_blobs,
)


def write_idx(tmp_path, images, labels, compress=False):
    """Write an IDX image/label pair; returns both paths."""
    n, rows, cols = images.shape
    image_bytes = struct.pack(">IIII", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    paths = []
    for name, payload in (("images-idx3-ubyte", image_bytes), ("labels-idx1-ubyte", label_bytes)):
        path = tmp_path / name
        if compress:
            with gzip.open(path.with_name(name + ".gz"), "wb") as f:
                f.write(payload)
        else:
            path.write_bytes(payload)
        paths.append(path)
    return paths


# Fixtures
@pytest.fixture
def pixels():
    return np.arange(2 * 3 * 3).reshape(2, 3, 3) * 10


@pytest.fixture
def blobs():
    return synth_blobs(3, 10, 4, seed=0)


# Loader Tests
class TestLoadIdx:
    """IDX parsing."""

    def test_load_scales_pixels(self, tmp_path, pixels):
        images_path, labels_path = write_idx(tmp_path, pixels, np.array([3, 7]))
        dataset = load_idx(images_path, labels_path)
        assert dataset.images.shape == (2, 1, 3, 3)
        assert dataset.images[1, 0, 2, 2] == pytest.approx(170 / 255)
        np.testing.assert_array_equal(dataset.labels, [3, 7])

    def test_gzip_sibling_is_used(self, tmp_path, pixels):
        images_path, labels_path = write_idx(tmp_path, pixels, np.array([0, 1]), compress=True)
        assert not images_path.exists()
        assert len(load_idx(images_path, labels_path)) == 2

    def test_bad_magic(self, tmp_path, pixels):
        images_path, labels_path = write_idx(tmp_path, pixels, np.array([0, 1]))
        raw = bytearray(images_path.read_bytes())
        raw[3] = 0x01
        images_path.write_bytes(bytes(raw))
        with pytest.raises(DatasetError, match="magic"):
            load_idx(images_path, labels_path)

    def test_truncated_payload(self, tmp_path, pixels):
        images_path, labels_path = write_idx(tmp_path, pixels, np.array([0, 1]))
        images_path.write_bytes(images_path.read_bytes()[:-1])
        with pytest.raises(DatasetError, match="truncated"):
            load_idx(images_path, labels_path)

    def test_count_mismatch(self, tmp_path, pixels):
        images_path, labels_path = write_idx(tmp_path, pixels, np.array([0, 1]))
        labels_path.write_bytes(struct.pack(">II", 0x801, 1) + bytes([0]))
        with pytest.raises(DatasetError):
            load_idx(images_path, labels_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_idx(tmp_path / "nope", tmp_path / "nope-either")


class TestLoadCifar:
    """CIFAR-10 binary batches."""

    def test_record_layout(self, tmp_path):
        record = np.zeros(3073, dtype=np.uint8)
        record[0] = 4
        record[1] = 255  # first red pixel
        record[1 + 1024] = 51  # first green pixel
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(record.tobytes() * 2)
        dataset = load_cifar10([path])
        assert dataset.images.shape == (2, 3, 32, 32)
        assert dataset.images[0, 0, 0, 0] == 1.0
        assert dataset.images[0, 1, 0, 0] == pytest.approx(0.2)
        np.testing.assert_array_equal(dataset.labels, [4, 4])

    def test_bad_length(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(bytes(3074))
        with pytest.raises(DatasetError, match="multiple"):
            load_cifar10([path])


class TestDataset:
    """Dataset invariants."""

    def test_rejects_pixels_outside_unit_range(self):
        with pytest.raises(DatasetError):
            Dataset(images=np.full((1, 1, 2, 2), 1.5), labels=[0], name="x")

    def test_rejects_label_outside_classes(self):
        with pytest.raises(DatasetError):
            Dataset(images=np.zeros((1, 1, 2, 2)), labels=[2], name="x", num_classes=2)

    def test_images_are_read_only(self, blobs):
        with pytest.raises(ValueError):
            blobs.images[0, 0, 0, 0] = 0.5


class TestSynthetic:
    """Blob generator and persisted splits."""

    def test_shape_and_range(self, blobs):
        assert blobs.images.shape == (30, 1, 1, 4)
        assert blobs.images.min() >= 0.0 and blobs.images.max() <= 1.0
        assert np.bincount(blobs.labels).tolist() == [10, 10, 10]

    def test_deterministic(self):
        a = synth_blobs(2, 5, 4, seed=3)
        b = synth_blobs(2, 5, 4, seed=3)
        np.testing.assert_array_equal(a.images, b.images)

    def test_save_and_reload(self, blobs, tmp_path):
        save_dataset(tmp_path / "train", blobs)
        loaded = load_saved_dataset(tmp_path / "train")
        np.testing.assert_array_equal(loaded.images, blobs.images)
        np.testing.assert_array_equal(loaded.labels, blobs.labels)

    def test_load_dataset_splits(self):
        spec = DatasetSpec(
            name=DatasetName.SYNTHETIC,
            validation_fraction=0.25,
            synthetic=SyntheticSpec(classes=2, per_class=8, test_per_class=3, image_shape=(1, 2, 2)),
        )
        train, val, test = load_dataset(spec)
        assert (len(train), len(val), len(test)) == (12, 4, 6)
        assert val.split == Split.VAL

    def test_persisted_splits_are_reused(self, tmp_path):
        spec = DatasetSpec(name=DatasetName.SYNTHETIC, synthetic=SyntheticSpec(image_shape=(1, 2, 2)))
        persist_synthetic(spec, tmp_path)
        reloaded = DatasetSpec(name=DatasetName.SYNTHETIC, root=tmp_path, synthetic=spec.synthetic)
        np.testing.assert_array_equal(load_dataset(spec)[2].images, load_dataset(reloaded)[2].images)


# Partition Tests
class TestPartition:
    """IID shards and the validation tail."""

    def test_shards_are_disjoint_and_cover(self):
        shards = partition_iid(103, 10, seed=1)
        indices = np.concatenate([s.indices for s in shards])
        assert sorted(indices.tolist()) == list(range(103))
        assert [s.size for s in shards] == [11, 11, 11] + [10] * 7

    def test_same_seed_same_shards(self):
        a = partition_iid(50, 4, seed=9)
        b = partition_iid(50, 4, seed=np.random.default_rng(9))
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    @pytest.mark.parametrize("clients", [0, 11])
    def test_client_count_out_of_range(self, clients):
        with pytest.raises(DatasetError):
            partition_iid(10, clients, seed=0)

    def test_validation_is_the_tail(self, blobs):
        train, val = split_validation(blobs, 0.1)
        assert len(val) == 3
        np.testing.assert_array_equal(val.images, blobs.images[-3:])

    def test_zero_fraction_gives_empty_validation(self, blobs):
        train, val = split_validation(blobs, 0.0)
        assert len(train) == len(blobs) and len(val) == 0


# Transform Tests
class TestNormalization:
    """t(.) and its inverse."""

    def test_mnist_statistics(self):
        t = NormalizationTransform.for_dataset("mnist", 1)
        assert normalize(t, np.full((1, 1, 1), 0.1307)).item() == pytest.approx(0.0)

    def test_identity_mode(self):
        t = NormalizationTransform.for_dataset("cifar10", 3, NormalizationMode.IDENTITY)
        assert t == NormalizationTransform.identity(3)

    def test_clamps_before_standardizing(self):
        t = NormalizationTransform.identity(1)
        np.testing.assert_array_equal(normalize(t, np.array([[[-0.5, 1.5]]])), [[[0.0, 1.0]]])

    def test_denormalize_inverts(self):
        t = NormalizationTransform.for_dataset("cifar10", 3)
        x = np.random.default_rng(0).uniform(size=(2, 3, 4, 4))
        np.testing.assert_allclose(denormalize(t, normalize(t, x)), x)

    def test_rejects_non_positive_std(self):
        with pytest.raises(ValueError):
            NormalizationTransform(mean=(0.0,), std=(0.0,))
