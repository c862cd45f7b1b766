#!/usr/bin/env python3
#
# Cohesive-degree sampling: sign-of-loss-difference scores between two sets,
# accumulated over consecutive checkpoint pairs into integer matrices.

from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import Executor
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Iterator, Optional

import numpy as np
import pandas as pd

from .dataset import LabeledSet
from .model import Checkpoint, ModelSpec, logits_batch, per_sample_losses
from .trainer import Trainer, TrainerState
from .util import EVAL_CHUNK, map_chunks, monotonic

logger = logging.getLogger('cohesion_groups.cohesion')

EPS_ZERO = 1e-12
DEFAULT_TRIALS = 30
DEFAULT_BATCH = 64
MODES = ('dense', 'batch')
SIDES = ('test', 'train')

MATRIX_MAGIC = b'CCGMTRX\x00'
MATRIX_VERSION = 1
# magic, version, rank, |A|, |B|, class extent (1 for a 2D matrix), trials
_MATRIX_HEADER = struct.Struct('<8sHHQQQQ')


class MatrixFormatError(ValueError):
    pass


class SignScore(IntEnum):
    NEGATIVE = -1
    ZERO = 0
    POSITIVE = 1


@dataclass(frozen=True)
class SamplingConfig:
    trials: int = DEFAULT_TRIALS
    mode: str = 'dense'
    batch_a: int = DEFAULT_BATCH
    batch_b: int = DEFAULT_BATCH
    # None: len(A) * len(B) draws per trial, as many as cells
    inner_iters: Optional[int] = None
    sampling_lr: float = 0.001
    side: str = 'test'
    eps_zero: float = EPS_ZERO
    seed: int = 0
    export_csv: bool = False

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError('trials must be at least 1')
        if self.mode not in MODES:
            raise ValueError(f'mode must be one of {MODES}, got {self.mode!r}')
        if self.side not in SIDES:
            raise ValueError(f'side must be one of {SIDES}, got {self.side!r}')
        if self.batch_a < 1 or self.batch_b < 1:
            raise ValueError('sampling batch sizes must be positive')
        if self.inner_iters is not None and self.inner_iters < 1:
            raise ValueError('inner_iters must be at least 1')
        if not self.sampling_lr > 0:
            raise ValueError('sampling_lr must be positive')
        if self.eps_zero < 0:
            raise ValueError('eps_zero must be non-negative')


# Scores

def sign_of_difference(first: np.ndarray, second: np.ndarray, eps_zero: float = EPS_ZERO) -> np.ndarray:
    '''sign(first - second), with |difference| < eps_zero mapped to 0'''
    difference = np.asarray(first, dtype=np.float64) - np.asarray(second, dtype=np.float64)
    signs = np.sign(difference).astype(np.int8)
    signs[np.abs(difference) < eps_zero] = SignScore.ZERO
    return signs


def get_score(la0: np.ndarray, la1: np.ndarray, lb0: np.ndarray, lb1: np.ndarray,
              eps_zero: float = EPS_ZERO) -> np.ndarray:
    """Products of loss-movement signs for every (a, b) pair.

    +1: both moved the same direction, -1: opposite directions, 0: at least
    one side did not move. Vectors on both sides give an |A| x |B| array.
    A per-class matrix on one side and a vector on the other give
    |A| x |B| x C, one slice per class.
    """
    la0, la1, lb0, lb1 = (np.asarray(v, dtype=np.float64) for v in (la0, la1, lb0, lb1))
    if la0.shape != la1.shape or lb0.shape != lb1.shape:
        raise ValueError(f'inconsistent shapes {la0.shape}/{la1.shape} and {lb0.shape}/{lb1.shape}')
    sa = sign_of_difference(la0, la1, eps_zero)
    sb = sign_of_difference(lb0, lb1, eps_zero)
    if sa.ndim == 1 and sb.ndim == 1:
        return np.outer(sa, sb).astype(np.int8)
    if sa.ndim == 2 and sb.ndim == 1:
        return sa[:, None, :] * sb[None, :, None]
    if sa.ndim == 1 and sb.ndim == 2:
        return sa[:, None, None] * sb[None, :, :]
    raise ValueError(f'cannot combine scores of rank {sa.ndim} and {sb.ndim}')


# Accumulators

class CohesionMatrix:
    """Integer accumulators over |A| x |B| cells, optionally with a class axis.

    pos, neg and zero count +1, -1 and 0 observations per cell; score is
    pos - neg, and trials counts the checkpoint pairs consumed.
    """
    def __init__(self, pos: np.ndarray, neg: np.ndarray, zero: np.ndarray, trials: int = 0) -> None:
        if not (pos.shape == neg.shape == zero.shape):
            raise ValueError('accumulator planes differ in shape')
        self.pos = np.asarray(pos, dtype=np.int64)
        self.neg = np.asarray(neg, dtype=np.int64)
        self.zero = np.asarray(zero, dtype=np.int64)
        self.trials = trials

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pos.shape

    @property
    def size_a(self) -> int:
        return self.pos.shape[0]

    @property
    def size_b(self) -> int:
        return self.pos.shape[1]

    @property
    def class_extent(self) -> int:
        return 1 if self.pos.ndim == 2 else self.pos.shape[2]

    @property
    def score(self) -> np.ndarray:
        return self.pos - self.neg

    @property
    def observations(self) -> np.ndarray:
        return self.pos + self.neg + self.zero

    @property
    def empty(self) -> bool:
        return self.pos.size == 0

    def accumulate(self, scores: np.ndarray, index_a: Optional[np.ndarray] = None,
                   index_b: Optional[np.ndarray] = None) -> None:
        '''Adds one score array, either over all cells or over the cells index_a x index_b'''
        scores = np.asarray(scores)
        if index_a is None and index_b is None:
            if scores.shape != self.shape:
                raise ValueError(f'score shape {scores.shape} does not match {self.shape}')
            self.pos += scores == 1
            self.neg += scores == -1
            self.zero += scores == 0
            return
        cells = np.ix_(np.asarray(index_a), np.asarray(index_b))
        for plane, value in ((self.pos, 1), (self.neg, -1), (self.zero, 0)):
            np.add.at(plane, cells, (scores == value).astype(np.int64))

    def same_as(self, other: CohesionMatrix) -> bool:
        return (self.trials == other.trials and np.array_equal(self.pos, other.pos)
                and np.array_equal(self.neg, other.neg) and np.array_equal(self.zero, other.zero))

    def to_bytes(self) -> bytes:
        header = _MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, self.pos.ndim, self.size_a, self.size_b,
                                     self.class_extent, self.trials)
        return header + b''.join(plane.astype('<i8').tobytes() for plane in (self.pos, self.neg, self.zero))

    @staticmethod
    def from_bytes(data: bytes) -> CohesionMatrix:
        try:
            magic, version, rank, size_a, size_b, extent, trials = _MATRIX_HEADER.unpack_from(data, 0)
        except struct.error as exc:
            raise MatrixFormatError(f'truncated matrix header: {exc}') from exc
        if magic != MATRIX_MAGIC:
            raise MatrixFormatError('not a cohesion matrix file (bad magic)')
        if version != MATRIX_VERSION:
            raise MatrixFormatError(f'unsupported matrix version {version}')
        if rank not in (2, 3) or (rank == 2 and extent != 1):
            raise MatrixFormatError(f'bad matrix rank {rank} with class extent {extent}')
        shape = (size_a, size_b) if rank == 2 else (size_a, size_b, extent)
        cells = int(np.prod(shape, dtype=np.int64))
        if len(data) != _MATRIX_HEADER.size + 3 * 8 * cells:
            raise MatrixFormatError(f'matrix body size does not match shape {shape}')
        planes = [np.frombuffer(data, dtype='<i8', count=cells, offset=_MATRIX_HEADER.size + 8 * cells * i)
                  .astype(np.int64).reshape(shape) for i in range(3)]
        kind = CohesionMatrix2D if rank == 2 else CohesionTensor3D
        return kind(*planes, trials=int(trials))

    def to_frame(self) -> pd.DataFrame:
        '''One row per cell: a_index, b_index[, class], score, pos, neg, zero, p_hat'''
        grids = np.indices(self.shape).reshape(len(self.shape), -1)
        columns = {'a_index': grids[0], 'b_index': grids[1]}
        if self.pos.ndim == 3:
            columns['class'] = grids[2]
        columns.update({
            'score': self.score.ravel(),
            'pos': self.pos.ravel(),
            'neg': self.neg.ravel(),
            'zero': self.zero.ravel(),
            'p_hat': agreement(self).p_hat.ravel(),
        })
        return pd.DataFrame(columns)


class CohesionMatrix2D(CohesionMatrix):
    def __init__(self, pos: np.ndarray, neg: np.ndarray, zero: np.ndarray, trials: int = 0) -> None:
        super().__init__(pos, neg, zero, trials)
        if self.pos.ndim != 2:
            raise ValueError(f'expected a 2D accumulator, got shape {self.pos.shape}')

    @classmethod
    def empty_of(cls, size_a: int, size_b: int) -> CohesionMatrix2D:
        shape = (size_a, size_b)
        return cls(np.zeros(shape, np.int64), np.zeros(shape, np.int64), np.zeros(shape, np.int64))


class CohesionTensor3D(CohesionMatrix):
    def __init__(self, pos: np.ndarray, neg: np.ndarray, zero: np.ndarray, trials: int = 0) -> None:
        super().__init__(pos, neg, zero, trials)
        if self.pos.ndim != 3:
            raise ValueError(f'expected a 3D accumulator, got shape {self.pos.shape}')

    @classmethod
    def empty_of(cls, size_a: int, size_b: int, classes: int) -> CohesionTensor3D:
        shape = (size_a, size_b, classes)
        return cls(np.zeros(shape, np.int64), np.zeros(shape, np.int64), np.zeros(shape, np.int64))

    def class_slice(self, c: int) -> CohesionMatrix2D:
        return CohesionMatrix2D(self.pos[:, :, c], self.neg[:, :, c], self.zero[:, :, c], self.trials)


def write_matrix(path: str, matrix: CohesionMatrix) -> None:
    partial = path + '.part'
    with open(partial, 'wb') as outfile:
        outfile.write(matrix.to_bytes())
    os.replace(partial, path)
    logger.info('wrote %s matrix %s (%s trials) to %s', matrix.__class__.__name__, matrix.shape, matrix.trials, path)


def read_matrix(path: str) -> CohesionMatrix:
    if not os.path.isfile(path):
        raise FileNotFoundError(f'matrix file not found: {path}')
    with open(path, 'rb') as infile:
        return CohesionMatrix.from_bytes(infile.read())


def write_matrix_csv(path: str, matrix: CohesionMatrix) -> None:
    matrix.to_frame().to_csv(path, index=False)


# Agreement

@dataclass(frozen=True, eq=False)
class AgreementMatrix:
    """p_hat = pos / (pos + neg); NaN marks cells without support."""
    p_hat: np.ndarray
    support: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.support > 0


def agreement(matrix: CohesionMatrix) -> AgreementMatrix:
    '''Empirical P(A u B) per cell; zero observations count for neither side'''
    support = matrix.pos + matrix.neg
    p_hat = np.full(support.shape, np.nan)
    np.divide(matrix.pos, support, out=p_hat, where=support > 0)
    return AgreementMatrix(p_hat, support)


# Sampling

def draw_batch_indices(size_a: int, size_b: int, batch_a: int, batch_b: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= batch_a <= size_a:
        raise ValueError(f'batch_a {batch_a} outside [1, {size_a}]')
    if not 1 <= batch_b <= size_b:
        raise ValueError(f'batch_b {batch_b} outside [1, {size_b}]')
    return rng.choice(size_a, size=batch_a, replace=False), rng.choice(size_b, size=batch_b, replace=False)


def sampling_batch(a_set: LabeledSet, b_set: LabeledSet, batch_a: int, batch_b: int,
                   rng: np.random.Generator) -> tuple[LabeledSet, LabeledSet, np.ndarray, np.ndarray]:
    '''A batch mixing elements of A and B, returned per side with their indices'''
    index_a, index_b = draw_batch_indices(len(a_set), len(b_set), batch_a, batch_b, rng)
    return a_set.subset(index_a), b_set.subset(index_b), index_a, index_b


class SetEvaluator:
    """Per-sample losses and raw logits of one set under a checkpoint.

    Rows are evaluated in fixed chunks, optionally on an executor; results
    for the two most recent checkpoints are kept, since consecutive pairs
    share a checkpoint.
    """

    def __init__(self, spec: ModelSpec, labeled: LabeledSet, executor: Optional[Executor] = None,
                 chunk: int = EVAL_CHUNK) -> None:
        self.spec = spec
        self.labeled = labeled
        self.executor = executor
        self.chunk = chunk
        self._recent: list[tuple[str, Checkpoint, np.ndarray]] = []

    def _cached(self, kind: str, checkpoint: Checkpoint) -> Optional[np.ndarray]:
        for cached_kind, cached, values in self._recent:
            if cached_kind == kind and cached is checkpoint:
                return values
        return None

    def _remember(self, kind: str, checkpoint: Checkpoint, values: np.ndarray) -> np.ndarray:
        self._recent = [entry for entry in self._recent if entry[0] != kind or entry[1] is not checkpoint]
        self._recent.append((kind, checkpoint, values))
        del self._recent[:-4]
        return values

    def losses(self, checkpoint: Checkpoint) -> np.ndarray:
        values = self._cached('loss', checkpoint)
        if values is None:
            features, labels = self.labeled.features, self.labeled.labels
            values = map_chunks(lambda s, e: per_sample_losses(self.spec, checkpoint.theta, features[s:e],
                                                               labels[s:e]),
                                len(self.labeled), self.chunk, self.executor)
            self._remember('loss', checkpoint, values)
        return values

    def logits(self, checkpoint: Checkpoint) -> np.ndarray:
        values = self._cached('logits', checkpoint)
        if values is None:
            features = self.labeled.features
            values = map_chunks(lambda s, e: logits_batch(self.spec, checkpoint.theta, features[s:e]),
                                len(self.labeled), self.chunk, self.executor)
            self._remember('logits', checkpoint, values)
        return values


class CohesionSampler:
    """Accumulates cohesive degrees between A and B, one checkpoint pair per trial.

    Conditional (the default): both sides contribute labeled per-sample
    losses, giving an |A| x |B| matrix. Unconditional: one side contributes
    raw per-class outputs instead of a loss, giving |A| x |B| x C; with
    side 'test' that is B (no test labels read), with side 'train' it is A.

    Dense mode scores every cell once per trial. Batch mode repeats
    inner_iters random draws of batch_a x batch_b cells per trial.
    """

    def __init__(self, spec: ModelSpec, a_set: LabeledSet, b_set: LabeledSet, config: SamplingConfig,
                 unconditional: bool = False, side: Optional[str] = None, executor: Optional[Executor] = None,
                 name: Optional[str] = None) -> None:
        self.spec = spec
        self.config = config
        self.unconditional = unconditional
        self.side = config.side if side is None else side
        if self.side not in SIDES:
            raise ValueError(f'side must be one of {SIDES}, got {self.side!r}')
        self.name = name or ('unconditional' if unconditional else 'conditional')
        if config.mode == 'batch':
            draw_batch_indices(len(a_set), len(b_set), config.batch_a, config.batch_b, np.random.default_rng(0))
        self.inner_iters = config.inner_iters if config.inner_iters is not None else len(a_set) * len(b_set)
        self._rng = np.random.default_rng(sampling_seeds(config.seed)[1])
        self._eval_a = SetEvaluator(spec, a_set, executor)
        self._eval_b = SetEvaluator(spec, b_set, executor)
        self.matrix: CohesionMatrix
        if unconditional:
            self.matrix = CohesionTensor3D.empty_of(len(a_set), len(b_set), spec.classes)
        else:
            self.matrix = CohesionMatrix2D.empty_of(len(a_set), len(b_set))

    def _signals(self, first: Checkpoint, second: Checkpoint) -> tuple[np.ndarray, ...]:
        a, b = self._eval_a, self._eval_b
        if self.unconditional and self.side == 'test':
            return a.losses(first), a.losses(second), b.logits(first), b.logits(second)
        if self.unconditional:
            return a.logits(first), a.logits(second), b.losses(first), b.losses(second)
        return a.losses(first), a.losses(second), b.losses(first), b.losses(second)

    def observe(self, first: Checkpoint, second: Checkpoint) -> None:
        '''Consumes one trial (T^K, T^K+1)'''
        la0, la1, lb0, lb1 = self._signals(first, second)
        eps = self.config.eps_zero
        if self.config.mode == 'dense':
            self.matrix.accumulate(get_score(la0, la1, lb0, lb1, eps))
        else:
            size_a, size_b = self.matrix.size_a, self.matrix.size_b
            for _ in range(self.inner_iters):
                index_a, index_b = draw_batch_indices(size_a, size_b, self.config.batch_a, self.config.batch_b,
                                                      self._rng)
                scores = get_score(la0[index_a], la1[index_a], lb0[index_b], lb1[index_b], eps)
                self.matrix.accumulate(scores, index_a, index_b)
        self.matrix.trials += 1

    def run(self, pairs: Iterable[tuple[Checkpoint, Checkpoint]]) -> CohesionMatrix:
        return run_samplers([self], pairs)[0]


def run_samplers(samplers: list[CohesionSampler],
                 pairs: Iterable[tuple[Checkpoint, Checkpoint]]) -> list[CohesionMatrix]:
    '''Feeds every pair of one checkpoint stream to all samplers, so they share their trials'''
    for trial, (first, second) in enumerate(pairs, start=1):
        start = monotonic()
        for sampler in samplers:
            sampler.observe(first, second)
        logger.info('trial %s (steps %s -> %s) scored by %s samplers, took %.2fs', trial, first.step, second.step,
                    len(samplers), monotonic() - start)
    return [sampler.matrix for sampler in samplers]


def sampling_seeds(seed: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    '''Independent seeds for the checkpoint stream and for batch-mode draws'''
    stream, draws = np.random.SeedSequence(seed).spawn(2)
    return stream, draws


def checkpoint_pairs(trainer: Trainer, state: TrainerState, train_set: LabeledSet,
                     config: SamplingConfig) -> Iterator[tuple[Checkpoint, Checkpoint]]:
    return trainer.checkpoint_pair_stream(state, train_set, config.sampling_lr, config.trials,
                                          seed=sampling_seeds(config.seed)[0])


def sample_cohesion(trainer: Trainer, state: TrainerState, train_set: LabeledSet, a_set: LabeledSet,
                    b_set: LabeledSet, config: SamplingConfig,
                    executor: Optional[Executor] = None) -> CohesionMatrix2D:
    '''Cohesive degrees of every (a, b) over `trials` pairs continuing the trained state'''
    sampler = CohesionSampler(trainer.spec, a_set, b_set, config, executor=executor)
    matrix = sampler.run(checkpoint_pairs(trainer, state, train_set, config))
    assert isinstance(matrix, CohesionMatrix2D)
    return matrix


def sample_cohesion_unconditional(trainer: Trainer, state: TrainerState, train_set: LabeledSet,
                                  a_set: LabeledSet, b_set: LabeledSet, config: SamplingConfig,
                                  side: Optional[str] = None,
                                  executor: Optional[Executor] = None) -> CohesionTensor3D:
    sampler = CohesionSampler(trainer.spec, a_set, b_set, config, unconditional=True, side=side, executor=executor)
    matrix = sampler.run(checkpoint_pairs(trainer, state, train_set, config))
    assert isinstance(matrix, CohesionTensor3D)
    return matrix
