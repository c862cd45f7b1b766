#!/usr/bin/env python3
#
# Labeled sets: CIFAR-10 binary batches, synthetic Gaussian blobs and the
# four-way retain/compact split of the training and test sides.

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Any, Iterator, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger('cohesion_groups.dataset')

CIFAR10_CLASSES = 10
CIFAR10_CHANNELS = 3
CIFAR10_IMAGE_SHAPE = (3, 32, 32)
CIFAR10_IMAGE_BYTES = 3072
CIFAR10_RECORD_BYTES = 1 + CIFAR10_IMAGE_BYTES
CIFAR10_FILES = {
    'train': tuple(f'data_batch_{i}.bin' for i in range(1, 6)),
    'test': ('test_batch.bin',),
}
CIFAR10_MEMBER_DIR = 'cifar-10-batches-bin'


class DatasetFormatError(ValueError):
    pass


class Sample(NamedTuple):
    features: np.ndarray
    label: int


class ChannelStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Ordered samples sharing one feature dimension.

    A sample's position is its identity: cohesion matrices and split
    manifests refer to samples by index, so the order never changes.
    Both arrays are made read-only on construction.
    """
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f'features must be a 2D array, got shape {features.shape}')
        if labels.shape != (features.shape[0],):
            raise ValueError(f'{labels.shape[0]} labels for {features.shape[0]} samples')
        if self.classes < 1:
            raise ValueError('classes must be positive')
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise DatasetFormatError(f'labels outside [0, {self.classes})')
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @property
    def n(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, index: int) -> Sample:
        return Sample(self.features[index], int(self.labels[index]))

    def __iter__(self) -> Iterator[Sample]:
        for index in range(len(self)):
            yield self[index]

    def subset(self, indices: Sequence[int]) -> LabeledSet:
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.features[indices], self.labels[indices], self.classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def concat(*sets: LabeledSet) -> LabeledSet:
    '''Concatenates sets in order; indices of later sets are shifted by the earlier lengths'''
    if not sets:
        raise ValueError('nothing to concatenate')
    if len({s.n for s in sets}) != 1 or len({s.classes for s in sets}) != 1:
        raise ValueError('sets differ in dimension or class count')
    return LabeledSet(np.concatenate([s.features for s in sets]), np.concatenate([s.labels for s in sets]),
                      sets[0].classes)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    retain_train: LabeledSet
    compact_train: LabeledSet
    retain_test: LabeledSet
    compact_test: LabeledSet
    split_seed: int
    indices: dict[str, np.ndarray]

    def sizes(self) -> dict[str, int]:
        return {name: int(len(idx)) for name, idx in self.indices.items()}

    def manifest(self) -> dict[str, Any]:
        return {
            'split_seed': self.split_seed,
            'sizes': self.sizes(),
            'indices': {name: idx.tolist() for name, idx in self.indices.items()},
        }


# CIFAR-10

def resolve_cifar10_dir(dir_path: str) -> str:
    '''Accepts either the batch directory itself or its parent'''
    nested = os.path.join(dir_path, CIFAR10_MEMBER_DIR)
    if not os.path.exists(os.path.join(dir_path, CIFAR10_FILES['test'][0])) and os.path.isdir(nested):
        return nested
    return dir_path


def _read_batch_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f'CIFAR-10 batch file not found: {path}')
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR10_RECORD_BYTES != 0:
        raise DatasetFormatError(f'{path}: {raw.size} bytes is not a whole number of '
                                 f'{CIFAR10_RECORD_BYTES}-byte records')
    records = raw.reshape(-1, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR10_CLASSES:
        raise DatasetFormatError(f'{path}: label byte {labels.max()} outside [0, {CIFAR10_CLASSES})')
    return records[:, 1:], labels


def read_cifar10_raw(dir_path: str, side: str = 'train') -> tuple[np.ndarray, np.ndarray]:
    '''Returns the uint8 pixel records (R, G, B planes, row-major 32x32) and labels of one side'''
    if side not in CIFAR10_FILES:
        raise ValueError(f'side must be train or test, got {side!r}')
    dir_path = resolve_cifar10_dir(dir_path)
    pixels, labels = zip(*[_read_batch_file(os.path.join(dir_path, name)) for name in CIFAR10_FILES[side]])
    logger.debug('read %s CIFAR-10 %s records from %s', sum(len(l) for l in labels), side, dir_path)
    return np.concatenate(pixels), np.concatenate(labels)


def channel_stats(pixels: np.ndarray) -> ChannelStats:
    '''Per-channel mean and std of pixels scaled to [0, 1], from exact integer sums'''
    planes = pixels.reshape(pixels.shape[0], CIFAR10_CHANNELS, -1)
    count = planes.shape[0] * planes.shape[2]
    values = np.arange(256, dtype=np.int64)
    hist = np.stack([np.bincount(planes[:, c, :].ravel(), minlength=256) for c in range(CIFAR10_CHANNELS)])
    total = hist @ values
    squares = hist @ (values * values)
    mean = total / count
    var = squares / count - mean ** 2
    return ChannelStats(mean / 255.0, np.sqrt(var) / 255.0)


def normalize(pixels: np.ndarray, stats: ChannelStats) -> np.ndarray:
    planes = pixels.reshape(pixels.shape[0], CIFAR10_CHANNELS, -1) / 255.0
    planes = (planes - stats.mean[None, :, None]) / stats.std[None, :, None]
    return planes.reshape(pixels.shape[0], -1)


def load_cifar10(dir_path: str, side: str = 'train', stats: Optional[ChannelStats] = None) -> LabeledSet:
    '''Loads one side, standardized with training-set channel statistics'''
    pixels, labels = read_cifar10_raw(dir_path, side)
    if stats is None:
        stats = channel_stats(pixels if side == 'train' else read_cifar10_raw(dir_path, 'train')[0])
    return LabeledSet(normalize(pixels, stats), labels, CIFAR10_CLASSES)


def load_cifar10_pair(dir_path: str, train_subset: Optional[int] = None, test_subset: Optional[int] = None,
                      seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    '''Loads both sides sharing the statistics of the full training set

    Subsets are drawn class-stratified before normalization so a reduced run
    never materializes the full float64 training matrix.
    '''
    train_pixels, train_labels = read_cifar10_raw(dir_path, 'train')
    test_pixels, test_labels = read_cifar10_raw(dir_path, 'test')
    stats = channel_stats(train_pixels)
    logger.info('CIFAR-10 channel mean %s std %s', np.round(stats.mean, 4), np.round(stats.std, 4))
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    if train_subset is not None:
        keep = _stratified_indices(train_labels, CIFAR10_CLASSES, train_subset, train_rng)
        train_pixels, train_labels = train_pixels[keep], train_labels[keep]
    if test_subset is not None:
        keep = _stratified_indices(test_labels, CIFAR10_CLASSES, test_subset, test_rng)
        test_pixels, test_labels = test_pixels[keep], test_labels[keep]
    return (LabeledSet(normalize(train_pixels, stats), train_labels, CIFAR10_CLASSES),
            LabeledSet(normalize(test_pixels, stats), test_labels, CIFAR10_CLASSES))


# Stratified sampling

def _class_quotas(counts: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    '''Hands out size slots one at a time, round-robin over a seeded class permutation'''
    if size < 0:
        raise ValueError('size must be non-negative')
    if size > counts.sum():
        raise ValueError(f'cannot draw {size} samples from {counts.sum()}')
    quotas = np.zeros_like(counts)
    order = rng.permutation(len(counts))
    remaining = size
    while remaining:
        for c in order:
            if remaining and quotas[c] < counts[c]:
                quotas[c] += 1
                remaining -= 1
    return quotas


def _stratified_indices(labels: np.ndarray, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    quotas = _class_quotas(np.bincount(labels, minlength=classes), size, rng)
    chosen = [rng.choice(np.flatnonzero(labels == c), size=q, replace=False) for c, q in enumerate(quotas) if q]
    if not chosen:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen)).astype(np.int64)


def stratified_subset(labeled: LabeledSet, size: int, seed: int) -> tuple[LabeledSet, np.ndarray]:
    indices = _stratified_indices(labeled.labels, labeled.classes, size, np.random.default_rng(seed))
    return labeled.subset(indices), indices


def holdout_split(labeled: LabeledSet, test_size: int, seed: int) -> tuple[LabeledSet, LabeledSet]:
    '''Stratified train/test partition; both parts keep the original relative order'''
    test_idx = _stratified_indices(labeled.labels, labeled.classes, test_size, np.random.default_rng(seed))
    train_idx = np.setdiff1d(np.arange(len(labeled)), test_idx)
    return labeled.subset(train_idx), labeled.subset(test_idx)


def make_splits(train: LabeledSet, test: LabeledSet, compact_size: int, seed: int) -> DatasetBundle:
    """Draws the compact training set A and the compact test set B.

    Each compact set is class-stratified (class counts differ by at most one
    where the class sizes allow it) and drawn without replacement; the
    remainder of each side forms its retain set. Deterministic for a seed.
    """
    if compact_size < 0:
        raise ValueError('compact_size must be non-negative')
    if compact_size > len(train) or compact_size > len(test):
        raise ValueError(f'compact_size {compact_size} exceeds a side of size {min(len(train), len(test))}')
    if train.n != test.n or train.classes != test.classes:
        raise ValueError('train and test sides differ in dimension or class count')
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    indices: dict[str, np.ndarray] = {}
    for side, labeled, rng in (('train', train, train_rng), ('test', test, test_rng)):
        compact = _stratified_indices(labeled.labels, labeled.classes, compact_size, rng)
        indices[f'compact_{side}'] = compact
        indices[f'retain_{side}'] = np.setdiff1d(np.arange(len(labeled)), compact).astype(np.int64)
    bundle = DatasetBundle(
        retain_train=train.subset(indices['retain_train']),
        compact_train=train.subset(indices['compact_train']),
        retain_test=test.subset(indices['retain_test']),
        compact_test=test.subset(indices['compact_test']),
        split_seed=seed,
        indices=indices,
    )
    logger.info('split sizes %s', bundle.sizes())
    return bundle


def bundle_from_manifest(train: LabeledSet, test: LabeledSet, manifest: dict[str, Any]) -> DatasetBundle:
    '''Rebuilds the bundle a manifest describes, checking that it partitions both sides'''
    try:
        indices = {name: np.asarray(manifest['indices'][name], dtype=np.int64)
                   for name in ('retain_train', 'compact_train', 'retain_test', 'compact_test')}
        seed = int(manifest['split_seed'])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f'malformed split manifest: {exc}') from exc
    for side, labeled in (('train', train), ('test', test)):
        union = np.concatenate([indices[f'retain_{side}'], indices[f'compact_{side}']])
        if not np.array_equal(np.sort(union), np.arange(len(labeled))):
            raise DatasetFormatError(f'manifest does not partition the {side} side of {len(labeled)} samples')
    return DatasetBundle(
        retain_train=train.subset(indices['retain_train']),
        compact_train=train.subset(indices['compact_train']),
        retain_test=test.subset(indices['retain_test']),
        compact_test=test.subset(indices['compact_test']),
        split_seed=seed,
        indices=indices,
    )


# Synthetic data

def gen_synthetic(classes: int, dim: int, per_class: int, separation: float, seed: int) -> LabeledSet:
    """Gaussian blobs with unit covariance, one per class.

    Class means are drawn at random, centered on the origin and scaled so
    that the closest pair is exactly `separation` apart.
    """
    if classes < 2 or dim < 1 or per_class < 1:
        raise ValueError('need classes >= 2, dim >= 1 and per_class >= 1')
    if not separation > 0:
        raise ValueError('separation must be positive')
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    means -= means.mean(axis=0)
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    gaps[np.diag_indices(classes)] = np.inf
    means *= separation / gaps.min()
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledSet(features[order], labels[order], classes)


def write_csv(labeled: LabeledSet, path: str) -> None:
    frame = pd.DataFrame(labeled.features, columns=[f'f{i}' for i in range(labeled.n)])
    frame.insert(0, 'label', labeled.labels)
    frame.to_csv(path, index=False, float_format='%.17g')


def read_csv(path: str, classes: Optional[int] = None) -> LabeledSet:
    if not os.path.isfile(path):
        raise FileNotFoundError(f'CSV file not found: {path}')
    frame = pd.read_csv(path, float_precision='round_trip')
    expected = ['label'] + [f'f{i}' for i in range(frame.shape[1] - 1)]
    if list(frame.columns) != expected:
        raise DatasetFormatError(f'{path}: header must be label,f0..f{{n-1}}')
    labels = frame['label'].to_numpy(dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledSet(frame.drop(columns='label').to_numpy(dtype=np.float64), labels, classes)
