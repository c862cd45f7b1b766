#!/usr/bin/env python3
#
# The stochastic training process T^k: SGD with momentum and coupled weight
# decay, plus the low learning-rate continuation that yields consecutive
# checkpoint pairs (T^K, T^K+1).

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import IO, Any, Callable, Iterator, Optional, Union

import numpy as np

from .dataset import LabeledSet
from .model import Checkpoint, ModelSpec, NumericError, ParamVector, init_params, risk_and_grad
from .model.network import SampleBatch, as_arrays
from .util import monotonic

logger = logging.getLogger('cohesion_groups.trainer')


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-3
    batch_size: int = 128
    epochs: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError('learning_rate must be positive')
        if not 0 <= self.momentum < 1:
            raise ValueError('momentum must be in [0, 1)')
        if self.weight_decay < 0:
            raise ValueError('weight_decay must be non-negative')
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError('batch_size and epochs must be positive')


@dataclass(frozen=True, eq=False)
class TrainerState:
    theta: ParamVector
    velocity: np.ndarray
    step: int = 0
    epoch: int = 0
    rng_state: Optional[dict[str, Any]] = None

    def __post_init__(self) -> None:
        if self.velocity.shape != self.theta.values.shape:
            raise ValueError('velocity does not match the parameter layout')


class RunLog:
    '''Line-delimited JSON records {step, epoch, batch_risk}'''

    def __init__(self, path: str, append: bool = False) -> None:
        self.path = path
        self.file_obj: IO[str] = open(path, 'a' if append else 'w')

    def __enter__(self) -> RunLog:
        return self

    def __exit__(self, type: type, value: Any, traceback: Any) -> None:
        self.close()

    def record(self, step: int, epoch: int, batch_risk: float) -> None:
        self.file_obj.write(json.dumps({'step': step, 'epoch': epoch, 'batch_risk': batch_risk}, sort_keys=True))
        self.file_obj.write('\n')

    def close(self) -> None:
        self.file_obj.close()


class Trainer:
    """Runs T^k for one model spec and optimizer configuration.

    The trainer owns the parameters it updates; every step produces a new
    TrainerState, and checkpoints handed out are never modified afterwards.
    """

    def __init__(self, spec: ModelSpec, config: OptimConfig, run_log: Optional[RunLog] = None,
                 on_epoch_end: Optional[Callable[[TrainerState], None]] = None,
                 on_step: Optional[Callable[[TrainerState], None]] = None) -> None:
        self.spec = spec
        self.config = config
        self.run_log = run_log
        self.on_epoch_end = on_epoch_end
        self.on_step = on_step

    def _seeds(self) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
        init_seq, shuffle_seq = np.random.SeedSequence(self.config.seed).spawn(2)
        return init_seq, shuffle_seq

    def _shuffle_rng(self, state: TrainerState) -> np.random.Generator:
        '''The saved shuffle stream of state, or a fresh one from the optimizer seed'''
        rng = np.random.default_rng(self._seeds()[1])
        if state.rng_state is not None:
            rng.bit_generator.state = state.rng_state
        return rng

    def initial_state(self) -> TrainerState:
        init_seq, shuffle_seq = self._seeds()
        theta = init_params(self.spec, int(init_seq.generate_state(1)[0]))
        rng = np.random.default_rng(shuffle_seq)
        return TrainerState(theta, np.zeros(len(theta)), rng_state=rng.bit_generator.state)

    def checkpoint(self, state: TrainerState) -> Checkpoint:
        return Checkpoint.of(self.spec, state.step, state.theta)

    def apply_update(self, state: TrainerState, g: np.ndarray, learning_rate: Optional[float] = None) -> TrainerState:
        '''v <- momentum * v + (g + weight_decay * theta); theta <- theta - lr * v'''
        lr = self.config.learning_rate if learning_rate is None else learning_rate
        theta = state.theta.values
        velocity = self.config.momentum * state.velocity + (g + self.config.weight_decay * theta)
        updated = theta - lr * velocity
        if not (np.isfinite(updated).all() and np.isfinite(velocity).all()):
            raise NumericError(f'non-finite parameter update at step {state.step}', step=state.step)
        return replace(state, theta=state.theta.with_values(updated), velocity=velocity, step=state.step + 1)

    def _step(self, state: TrainerState, features: np.ndarray, labels: np.ndarray,
              learning_rate: Optional[float] = None) -> tuple[TrainerState, float]:
        try:
            risk, g = risk_and_grad(self.spec, state.theta, features, labels)
        except NumericError as exc:
            raise NumericError(f'{exc} at step {state.step}', layer=exc.layer, step=state.step) from exc
        return self.apply_update(state, g, learning_rate), risk

    def sgd_step(self, state: TrainerState, batch: SampleBatch) -> TrainerState:
        features, labels = as_arrays(batch)
        if labels.size == 0:
            raise ValueError('empty batch')
        return self._step(state, features, labels)[0]

    def train(self, train_set: LabeledSet, state: Optional[TrainerState] = None) -> TrainerState:
        """Runs epochs x ceil(N / batch_size) steps over seeded shuffled batches.

        A state from an earlier run resumes at its recorded epoch; the shuffle
        generator state is restored, so a resumed run matches an
        uninterrupted one.
        """
        n = len(train_set)
        if n == 0:
            raise ValueError('empty training set')
        steps_per_epoch = math.ceil(n / self.config.batch_size)
        if self.config.epochs * steps_per_epoch == 0:
            raise ValueError('no training steps to run')
        if state is None:
            state = self.initial_state()
        rng = self._shuffle_rng(state)
        if state.epoch >= self.config.epochs:
            logger.info('already trained for %s epochs, nothing to do', state.epoch)
            return state
        features, labels = train_set.features, train_set.labels
        batch = self.config.batch_size
        for epoch in range(state.epoch, self.config.epochs):
            start = monotonic()
            order = rng.permutation(n)
            risks = []
            for first in range(0, n, batch):
                rows = order[first:first + batch]
                state, risk = self._step(state, features[rows], labels[rows])
                risks.append(risk)
                if self.run_log is not None:
                    self.run_log.record(state.step, epoch, risk)
                logger.debug('step %s batch risk %.6f', state.step, risk)
                if self.on_step is not None:
                    self.on_step(state)
            state = replace(state, epoch=epoch + 1, rng_state=rng.bit_generator.state)
            logger.info('epoch %s/%s mean batch risk %.6f (%s steps, took %.2fs)', epoch + 1, self.config.epochs,
                        float(np.mean(risks)), state.step, monotonic() - start)
            if self.on_epoch_end is not None:
                self.on_epoch_end(state)
        return state

    def checkpoint_pair_stream(self, state: TrainerState, train_set: LabeledSet, sampling_lr: float, count: int,
                               seed: Union[int, np.random.SeedSequence, None] = None
                               ) -> Iterator[tuple[Checkpoint, Checkpoint]]:
        """Continues one trajectory at sampling_lr and yields `count` pairs (T^K, T^K+1).

        The second checkpoint of each pair is the first of the next. Batches
        are uniform draws of the training batch size from the whole training
        set, seeded by `seed` (the optimizer seed when omitted).
        """
        if count < 1:
            raise ValueError('count must be at least 1')
        if not sampling_lr > 0:
            raise ValueError('sampling_lr must be positive')
        if len(train_set) == 0:
            raise ValueError('empty training set')
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        return self._pair_stream(state, train_set, sampling_lr, count, rng)

    def _pair_stream(self, state: TrainerState, train_set: LabeledSet, sampling_lr: float, count: int,
                     rng: np.random.Generator) -> Iterator[tuple[Checkpoint, Checkpoint]]:
        n = len(train_set)
        batch = min(self.config.batch_size, n)
        current = self.checkpoint(state)
        for _ in range(count):
            rows = rng.choice(n, size=batch, replace=False)
            state, risk = self._step(state, train_set.features[rows], train_set.labels[rows], sampling_lr)
            logger.debug('sampling step %s batch risk %.6f', state.step, risk)
            following = self.checkpoint(state)
            yield current, following
            current = following


def train(spec: ModelSpec, train_set: LabeledSet, config: OptimConfig) -> TrainerState:
    return Trainer(spec, config).train(train_set)
