import os

import numpy as np
import pytest

from cohesion_groups.dataset import (CIFAR10_FILES, CIFAR10_RECORD_BYTES, DatasetFormatError, LabeledSet,
                                     bundle_from_manifest, channel_stats, concat, gen_synthetic, holdout_split,
                                     load_cifar10, load_cifar10_pair, make_splits, read_cifar10_raw, read_csv,
                                     stratified_subset, write_csv)

RECORDS_PER_FILE = 6


def _write_fake_cifar(directory, rng, records=RECORDS_PER_FILE):
    for side in ('train', 'test'):
        for name in CIFAR10_FILES[side]:
            raw = rng.integers(0, 256, size=(records, CIFAR10_RECORD_BYTES), dtype=np.uint8)
            raw[:, 0] = rng.integers(0, 10, size=records)
            raw.tofile(os.path.join(directory, name))


class TestCifar10:
    def test_sizes_and_dimension(self, tmp_path, rng):
        _write_fake_cifar(tmp_path, rng)
        train = load_cifar10(str(tmp_path), 'train')
        test = load_cifar10(str(tmp_path), 'test')
        assert len(train) == 5 * RECORDS_PER_FILE
        assert len(test) == RECORDS_PER_FILE
        assert train.n == test.n == 3072
        assert train.classes == 10

    def test_labels_and_pixels_bit_exact(self, tmp_path, rng):
        _write_fake_cifar(tmp_path, rng)
        raw = np.fromfile(os.path.join(tmp_path, 'test_batch.bin'), dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
        test = load_cifar10(str(tmp_path), 'test')
        np.testing.assert_array_equal(test.labels, raw[:, 0])
        stats = channel_stats(read_cifar10_raw(str(tmp_path), 'train')[0])
        pixels = raw[:, 1:].reshape(len(test), 3, -1) / 255.0
        expected = (pixels - stats.mean[None, :, None]) / stats.std[None, :, None]
        np.testing.assert_allclose(test.features, expected.reshape(len(test), -1), rtol=0, atol=1e-12)

    def test_training_channels_standardized(self, tmp_path, rng):
        _write_fake_cifar(tmp_path, rng)
        train = load_cifar10(str(tmp_path), 'train')
        planes = train.features.reshape(len(train), 3, -1)
        np.testing.assert_allclose(planes.mean(axis=(0, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(planes.std(axis=(0, 2)), 1.0, atol=1e-6)

    def test_pair_uses_training_statistics(self, tmp_path, rng):
        _write_fake_cifar(tmp_path, rng)
        train, test = load_cifar10_pair(str(tmp_path))
        np.testing.assert_array_equal(test.features, load_cifar10(str(tmp_path), 'test').features)
        np.testing.assert_array_equal(train.features, load_cifar10(str(tmp_path), 'train').features)

    def test_pair_subsets_are_stratified(self, tmp_path, rng):
        _write_fake_cifar(tmp_path, rng, records=40)
        train, test = load_cifar10_pair(str(tmp_path), train_subset=50, test_subset=20, seed=3)
        assert len(train) == 50 and len(test) == 20

    def test_nested_batch_directory(self, tmp_path, rng):
        nested = tmp_path / 'cifar-10-batches-bin'
        nested.mkdir()
        _write_fake_cifar(nested, rng)
        assert len(load_cifar10(str(tmp_path), 'test')) == RECORDS_PER_FILE

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError, match='data_batch_1.bin'):
            load_cifar10(str(tmp_path), 'train')

    def test_truncated_record(self, tmp_path, rng):
        _write_fake_cifar(tmp_path, rng)
        path = os.path.join(tmp_path, 'test_batch.bin')
        data = open(path, 'rb').read()
        with open(path, 'wb') as outfile:
            outfile.write(data[:-1])
        with pytest.raises(DatasetFormatError):
            load_cifar10(str(tmp_path), 'test')


class TestSynthetic:
    def test_sizes(self):
        blobs = gen_synthetic(10, 8, 50, 6.0, 1)
        assert len(blobs) == 500
        assert blobs.n == 8 and blobs.classes == 10
        np.testing.assert_array_equal(blobs.class_counts(), np.full(10, 50))

    def test_deterministic(self):
        first = gen_synthetic(3, 2, 20, 5.0, 7)
        second = gen_synthetic(3, 2, 20, 5.0, 7)
        np.testing.assert_array_equal(first.features, second.features)
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_class_means_separated(self):
        blobs = gen_synthetic(4, 3, 2000, 8.0, 2)
        means = np.stack([blobs.features[blobs.labels == c].mean(axis=0) for c in range(4)])
        gaps = np.linalg.norm(means[:, None] - means[None, :], axis=-1)[np.triu_indices(4, 1)]
        # empirical means are within a few tenths of the true ones
        assert gaps.min() > 8.0 - 0.5

    @pytest.mark.parametrize('args', [(1, 2, 10, 1.0), (2, 0, 10, 1.0), (2, 2, 0, 1.0), (2, 2, 10, 0.0)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            gen_synthetic(*args, seed=0)

    def test_csv_export(self, tmp_path, blobs):
        path = str(tmp_path / 'blobs.csv')
        write_csv(blobs, path)
        assert open(path).readline().strip() == 'label,f0,f1,f2,f3'
        again = read_csv(path, blobs.classes)
        np.testing.assert_array_equal(again.features, blobs.features)
        np.testing.assert_array_equal(again.labels, blobs.labels)

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text('y,f0\n1,0.5\n')
        with pytest.raises(DatasetFormatError):
            read_csv(str(path))


class TestSplits:
    def test_partition(self, blobs):
        train, test = holdout_split(blobs, 30, seed=0)
        bundle = make_splits(train, test, 12, seed=5)
        assert bundle.sizes() == {'retain_train': 78, 'compact_train': 12, 'retain_test': 18, 'compact_test': 12}
        for side, labeled in (('train', train), ('test', test)):
            retain = bundle.indices[f'retain_{side}']
            compact = bundle.indices[f'compact_{side}']
            assert not set(retain) & set(compact)
            np.testing.assert_array_equal(np.sort(np.concatenate([retain, compact])), np.arange(len(labeled)))

    def test_stratified(self, blobs):
        bundle = make_splits(blobs, blobs, 10, seed=1)
        for compact in (bundle.compact_train, bundle.compact_test):
            counts = compact.class_counts()
            assert counts.sum() == 10
            assert counts.max() - counts.min() <= 1

    def test_full_scale_quotas(self):
        labels = np.repeat(np.arange(10), 5000)
        labeled = LabeledSet(np.zeros((labels.size, 1)), labels, 10)
        subset, _ = stratified_subset(labeled, 512, seed=0)
        counts = subset.class_counts()
        assert sorted(counts.tolist()) == [51] * 8 + [52] * 2

    def test_zero_compact(self, blobs):
        bundle = make_splits(blobs, blobs, 0, seed=0)
        assert len(bundle.compact_train) == 0
        np.testing.assert_array_equal(bundle.retain_train.features, blobs.features)

    def test_too_large(self, blobs):
        small = blobs.subset(range(5))
        with pytest.raises(ValueError):
            make_splits(blobs, small, 6, seed=0)

    def test_deterministic(self, blobs):
        first = make_splits(blobs, blobs, 9, seed=4)
        second = make_splits(blobs, blobs, 9, seed=4)
        for name in first.indices:
            np.testing.assert_array_equal(first.indices[name], second.indices[name])

    def test_manifest_rebuilds_bundle(self, blobs):
        train, test = holdout_split(blobs, 30, seed=0)
        bundle = make_splits(train, test, 12, seed=5)
        again = bundle_from_manifest(train, test, bundle.manifest())
        np.testing.assert_array_equal(again.compact_test.features, bundle.compact_test.features)
        np.testing.assert_array_equal(again.retain_train.labels, bundle.retain_train.labels)

    def test_manifest_must_partition(self, blobs):
        manifest = make_splits(blobs, blobs, 6, seed=0).manifest()
        manifest['indices']['retain_test'] = manifest['indices']['retain_test'][1:]
        with pytest.raises(DatasetFormatError):
            bundle_from_manifest(blobs, blobs, manifest)


def test_concat_keeps_order(blobs):
    first, second = blobs.subset(range(3)), blobs.subset(range(3, 7))
    joined = concat(first, second)
    np.testing.assert_array_equal(joined.features, blobs.features[:7])


def test_labeled_set_is_read_only(blobs):
    with pytest.raises(ValueError):
        blobs.features[0, 0] = 1.0


def test_label_out_of_range():
    with pytest.raises(DatasetFormatError):
        LabeledSet(np.zeros((2, 1)), np.array([0, 3]), 3)
