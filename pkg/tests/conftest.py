import numpy as np
import pytest

from cohesion_groups.dataset import LabeledSet, gen_synthetic
from cohesion_groups.model import ModelSpec
from cohesion_groups.trainer import OptimConfig, Trainer, TrainerState


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture(scope='session')
def blobs() -> LabeledSet:
    return gen_synthetic(classes=3, dim=4, per_class=40, separation=6.0, seed=0)


@pytest.fixture(scope='session')
def linear_spec() -> ModelSpec:
    return ModelSpec('linear', input_dim=4, classes=3)


@pytest.fixture(scope='session')
def toy_optim() -> OptimConfig:
    return OptimConfig(learning_rate=0.05, momentum=0.9, weight_decay=4e-3, batch_size=16, epochs=4, seed=0)


@pytest.fixture(scope='session')
def trained(linear_spec: ModelSpec, toy_optim: OptimConfig, blobs: LabeledSet) -> tuple[Trainer, TrainerState]:
    trainer = Trainer(linear_spec, toy_optim)
    return trainer, trainer.train(blobs)
