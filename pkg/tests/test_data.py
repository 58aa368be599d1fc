import gzip
import struct

import numpy as np
import pytest

from fedtilt.data import (
    TOY_SETUP,
    BadMagicError,
    ClientData,
    CountMismatchError,
    FederatedDataset,
    GaussianNoise,
    InsufficientClassDataError,
    OutlierSpec,
    PixelCorruption,
    Shard,
    TruncatedFileError,
    assign_classes,
    gen_synthetic_images,
    gen_toy,
    inject_outliers,
    load_idx,
    partition_noniid,
)


def _write_idx(path, magic, dims, payload, compress=False):
    data = struct.pack(f">{1 + len(dims)}I", magic, *dims) + bytes(payload)
    opener = gzip.open if compress else open
    with opener(path, "wb") as file:
        file.write(data)


def test_toy_setup_table():
    first_client = TOY_SETUP[1][0]
    assert first_client[0].center == (0.5, 2.0)
    assert first_client[0].std_dev == 0.5
    assert TOY_SETUP[3][0][0].std_dev == 1.0


@pytest.mark.parametrize(
    ("experiment", "train_counts", "test_counts"),
    [(1, (100, 100), (20, 20)), (2, (150, 50), (30, 10)), (3, (150, 50), (30, 10))],
)
def test_toy_shard_sizes(experiment, train_counts, test_counts):
    dataset = gen_toy(experiment, seed=0)
    assert dataset.num_clients == 2
    assert dataset.input_dim == 2
    for client in dataset.clients:
        assert tuple(np.bincount(client.train.labels)) == train_counts
        assert tuple(np.bincount(client.test.labels)) == test_counts


def test_toy_data_follows_the_centers():
    dataset = gen_toy(1, seed=0)
    train = dataset.clients[0].train
    np.testing.assert_allclose(train.features[train.labels == 0].mean(axis=0), [0.5, 2.0], atol=0.15)
    np.testing.assert_allclose(train.features[train.labels == 1].mean(axis=0), [2.5, 1.0], atol=0.15)


def test_toy_is_deterministic_per_seed():
    assert gen_toy(2, seed=5).clients[1].train == gen_toy(2, seed=5).clients[1].train
    assert gen_toy(2, seed=5).clients[1].train != gen_toy(2, seed=6).clients[1].train


def test_invalid_toy_experiment():
    with pytest.raises(ValueError, match="toy experiment"):
        gen_toy(4, seed=0)


def test_shards_are_immutable():
    shard = Shard(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ValueError, match="read-only"):
        shard.features[0, 0] = 1.0
    source = np.ones((2, 3))
    copied = Shard(source, [0, 1])
    source[0, 0] = 5.0
    assert copied.features[0, 0] == 1.0


def test_shard_validation():
    with pytest.raises(ValueError, match="labels"):
        Shard(np.zeros((2, 3)), [0])
    with pytest.raises(ValueError, match="finite"):
        Shard(np.array([[np.nan]]), [0])


def test_federated_dataset_rejects_empty_shards():
    empty = Shard(np.empty((0, 2)), np.empty(0, dtype=np.int64))
    client = gen_toy(1, seed=0).clients[0]
    with pytest.raises(ValueError, match="empty test shard"):
        FederatedDataset((ClientData(train=client.train, test=empty),), num_classes=2, input_dim=2)


def test_every_class_reaches_the_same_number_of_clients():
    assignment = assign_classes(num_classes=10, num_clients=100, classes_per_client=2, seed=0)
    assert all(len(set(classes)) == 2 for classes in assignment)
    counts = np.bincount(np.concatenate(assignment), minlength=10)
    np.testing.assert_array_equal(counts, 20)


def test_partition_is_complete_and_disjoint():
    pool = gen_synthetic_images(600, num_classes=10, input_dim=8, seed=1)
    dataset = partition_noniid(pool, num_clients=20, classes_per_client=2, seed=3)

    assert dataset.num_clients == 20
    for client in dataset.clients:
        assert len(np.unique(np.concatenate([client.train.labels, client.test.labels]))) == 2

    pieces = [shard for client in dataset.clients for shard in (client.train, client.test)]
    combined = Shard.concat(pieces)
    assert len(combined) == len(pool)
    pooled_rows = {row.tobytes() for row in pool.features}
    combined_rows = {row.tobytes() for row in combined.features}
    assert len(combined_rows) == len(pool)
    assert combined_rows == pooled_rows


def test_partition_holds_out_a_fifth_of_every_class():
    pool = gen_synthetic_images(1000, num_classes=10, input_dim=4, seed=0)
    dataset = partition_noniid(pool, num_clients=5, classes_per_client=2, seed=0)
    for client in dataset.clients:
        for label in client.train.classes():
            total = np.sum(client.train.labels == label) + np.sum(client.test.labels == label)
            assert np.sum(client.test.labels == label) == max(1, int(np.floor(0.2 * total)))


def test_iid_by_class_partition():
    pool = gen_synthetic_images(200, num_classes=4, input_dim=3, seed=0)
    dataset = partition_noniid(pool, num_clients=3, classes_per_client=4, seed=0)
    for client in dataset.clients:
        np.testing.assert_array_equal(client.train.classes(), [0, 1, 2, 3])


def test_partition_is_deterministic():
    pool = gen_synthetic_images(300, num_classes=10, input_dim=4, seed=2)
    first = partition_noniid(pool, num_clients=10, classes_per_client=2, seed=7)
    second = partition_noniid(pool, num_clients=10, classes_per_client=2, seed=7)
    assert all(a.train == b.train and a.test == b.test for a, b in zip(first.clients, second.clients))


def test_partition_reports_the_starved_class():
    pool = Shard(np.arange(12, dtype=np.float64).reshape(6, 2), [0, 0, 0, 0, 0, 1])
    with pytest.raises(InsufficientClassDataError, match="Class 1") as error:
        partition_noniid(pool, num_clients=2, classes_per_client=2, seed=0)
    assert error.value.label == 1


def test_idx_roundtrip(tmp_path):
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx.gz"
    _write_idx(images, 0x803, (3, 2, 2), [0, 255, 51, 102, 0, 0, 0, 0, 255, 255, 255, 255])
    _write_idx(labels, 0x801, (3,), [7, 0, 9], compress=True)

    shard = load_idx(images, labels)
    assert shard.input_dim == 4
    np.testing.assert_array_equal(shard.labels, [7, 0, 9])
    np.testing.assert_allclose(shard.features[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_allclose(shard.features[2], 1.0)


def test_idx_bad_magic(tmp_path):
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    _write_idx(images, 0x801, (1, 2, 2), [0, 0, 0, 0])
    _write_idx(labels, 0x801, (1,), [0])
    with pytest.raises(BadMagicError, match="magic"):
        load_idx(images, labels)


def test_idx_truncated(tmp_path):
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    _write_idx(images, 0x803, (2, 2, 2), [0, 0, 0, 0, 0])
    _write_idx(labels, 0x801, (2,), [0, 1])
    with pytest.raises(TruncatedFileError):
        load_idx(images, labels)
    images.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx(images, labels)


def test_idx_count_mismatch(tmp_path):
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    _write_idx(images, 0x803, (1, 2, 2), [0, 0, 0, 0])
    _write_idx(labels, 0x801, (2,), [0, 1])
    with pytest.raises(CountMismatchError, match="label/image count mismatch"):
        load_idx(images, labels)


def test_pixel_corruption_counts():
    pool = gen_synthetic_images(1000, num_classes=10, input_dim=784, noise=0.0, seed=0)
    spec = OutlierSpec(PixelCorruption(pixel_fraction=0.3, sample_fraction=0.3))
    corrupted = inject_outliers(pool.subset(range(100)), spec, round_index=1, seed=0)
    clean = pool.subset(range(100))

    per_row = np.sum(corrupted.features != clean.features, axis=1)
    assert np.count_nonzero(per_row) == 30
    assert set(per_row[per_row > 0].tolist()) == {235}
    np.testing.assert_array_equal(corrupted.labels, clean.labels)


def test_gaussian_noise_only_touches_the_target_class():
    clean = gen_toy(3, seed=0).clients[0].train
    spec = OutlierSpec(GaussianNoise(mean=0.0, std=0.15, sample_fraction=0.1, target_class=0))
    corrupted = inject_outliers(clean, spec, round_index=1, seed=0)
    changed = np.any(corrupted.features != clean.features, axis=1)
    assert changed.sum() == 15
    assert np.all(clean.labels[changed] == 0)


def test_persistent_outliers_change_every_round():
    clean = gen_synthetic_images(100, num_classes=10, input_dim=16, seed=0)
    spec = OutlierSpec(PixelCorruption(pixel_fraction=0.5, sample_fraction=0.3), persistent=True)
    subsets = {
        tuple(np.flatnonzero(np.any(inject_outliers(clean, spec, r, seed=0).features != clean.features, axis=1)))
        for r in range(1, 11)
    }
    assert len(subsets) == 10


def test_non_persistent_outliers_are_fixed():
    clean = gen_synthetic_images(100, num_classes=10, input_dim=16, seed=0)
    spec = OutlierSpec(PixelCorruption(pixel_fraction=0.5, sample_fraction=0.3), persistent=False)
    assert inject_outliers(clean, spec, 1, seed=0) == inject_outliers(clean, spec, 9, seed=0)


def test_injection_leaves_the_clean_shard_alone():
    clean = gen_toy(1, seed=0).clients[0].train
    before = clean.features.copy()
    inject_outliers(clean, OutlierSpec(GaussianNoise(sample_fraction=1.0)), round_index=1, seed=0)
    np.testing.assert_array_equal(clean.features, before)


def test_zero_sample_fraction_is_a_no_op():
    clean = gen_toy(1, seed=0).clients[0].train
    assert inject_outliers(clean, OutlierSpec(GaussianNoise(sample_fraction=0.0)), 1, seed=0) is clean
