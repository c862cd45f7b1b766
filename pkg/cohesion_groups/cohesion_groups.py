#!/usr/bin/env python3

import argparse
import dataclasses
import json
import logging
import logging.config
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, Sequence

import numpy as np

from .analysis import argmax_baseline, cohesion_classify, cohesion_classify_unconditional, extract_groups
from .cohesion import CohesionMatrix, CohesionMatrix2D, CohesionSampler, CohesionTensor3D, MatrixFormatError
from .cohesion import agreement, checkpoint_pairs, read_matrix, run_samplers, write_matrix, write_matrix_csv
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, validate, write_config
from .dataset import CIFAR10_IMAGE_SHAPE, DatasetBundle, DatasetFormatError, LabeledSet, bundle_from_manifest
from .dataset import concat, gen_synthetic, holdout_split, load_cifar10_pair, make_splits, read_csv, write_csv
from .model import Checkpoint, CheckpointFormatError, ModelSpec, NumericError, read_checkpoint, write_checkpoint
from .report import build_report, write_report
from .trainer import RunLog, Trainer, TrainerState
from .util import default_threads, monotonic
from .util.fetch import fetch_cifar10

logger = logging.getLogger('cohesion_groups.cli')

MANIFEST = 'manifest.json'
TRAIN_CSV = 'train.csv'
TEST_CSV = 'test.csv'
MODEL_CKPT = 'model.ckpt'
VELOCITY_CKPT = 'velocity.ckpt'
TRAINER_STATE = 'trainer_state.json'
RUN_LOG = 'train.jsonl'
ALG1_MATRIX = 'alg1.cmx'
ALG2_MATRIX = 'alg2.cmx'
UNION_MATRIX = 'union.cmx'

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    logging.basicConfig(format="%(asctime)s %(name)s: %(message)s", level=logging.INFO, )
    package = logging.getLogger('cohesion_groups')
    package.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)
    if os.path.exists('logging.config'):
        logging.config.fileConfig('logging.config', disable_existing_loggers=False)
        logger.info('using logging.config')


def _path(config: ExperimentConfig, name: str) -> str:
    return os.path.join(config.out_dir, name)


def _write_json(path: str, payload: Any) -> None:
    with open(path, 'w') as outfile:
        json.dump(payload, outfile, indent=2, sort_keys=True)
        outfile.write('\n')


def _read_json(path: str) -> Any:
    if not os.path.isfile(path):
        raise FileNotFoundError(f'{path} not found (run the earlier stages first)')
    with open(path) as infile:
        return json.load(infile)


class Experiment:
    """Everything the stages after `prepare` rebuild from the output directory."""

    def __init__(self, config: ExperimentConfig, train: LabeledSet, test: LabeledSet, bundle: DatasetBundle,
                 spec: ModelSpec) -> None:
        self.config = config
        self.train = train
        self.test = test
        self.bundle = bundle
        self.spec = spec

    @property
    def executor_threads(self) -> int:
        return self.config.threads if self.config.threads is not None else default_threads()

    def executor(self) -> Optional[ThreadPoolExecutor]:
        threads = self.executor_threads
        return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def load_sides(config: ExperimentConfig) -> tuple[LabeledSet, LabeledSet, Optional[tuple[int, int, int]]]:
    '''The training and test sides of the configured source, plus the image shape for CIFAR-10'''
    data = config.data
    if data.source == 'cifar10':
        assert data.path is not None
        directory = fetch_cifar10(data.path) if data.download else data.path
        train, test = load_cifar10_pair(directory, data.train_subset, data.test_subset, data.subset_seed)
        return train, test, CIFAR10_IMAGE_SHAPE
    synthetic = data.synthetic
    full = gen_synthetic(synthetic.classes, synthetic.dim, synthetic.per_class + synthetic.test_per_class,
                         synthetic.separation, synthetic.seed)
    train, test = holdout_split(full, synthetic.classes * synthetic.test_per_class, synthetic.seed)
    return train, test, None


def cmd_prepare(config: ExperimentConfig) -> DatasetBundle:
    '''Loads or generates the data and writes the split manifest'''
    start = monotonic()
    train, test, image_shape = load_sides(config)
    bundle = make_splits(train, test, config.split.compact_size, config.split.seed)
    if config.data.source == 'synthetic':
        write_csv(train, _path(config, TRAIN_CSV))
        write_csv(test, _path(config, TEST_CSV))
    manifest = bundle.manifest()
    manifest.update({
        'source': config.data.source,
        'input_dim': train.n,
        'classes': train.classes,
        'image_shape': list(image_shape) if image_shape is not None else None,
    })
    _write_json(_path(config, MANIFEST), manifest)
    logger.info('prepared %s data %s, took %.2fs', config.data.source, bundle.sizes(), monotonic() - start)
    return bundle


def load_experiment(config: ExperimentConfig) -> Experiment:
    manifest = _read_json(_path(config, MANIFEST))
    if manifest.get('source') != config.data.source:
        raise ConfigError(f'data.source is {config.data.source!r} but {MANIFEST} was prepared from '
                          f'{manifest.get("source")!r}')
    if config.data.source == 'synthetic':
        classes = config.data.synthetic.classes
        train = read_csv(_path(config, TRAIN_CSV), classes)
        test = read_csv(_path(config, TEST_CSV), classes)
        image_shape = None
    else:
        train, test, image_shape = load_sides(config)
    bundle = bundle_from_manifest(train, test, manifest)
    spec = config.model.to_spec(train.n, train.classes, image_shape)
    return Experiment(config, train, test, bundle, spec)


def save_state(config: ExperimentConfig, trainer: Trainer, state: TrainerState) -> None:
    write_checkpoint(_path(config, MODEL_CKPT), trainer.checkpoint(state))
    write_checkpoint(_path(config, VELOCITY_CKPT),
                     Checkpoint.of(trainer.spec, state.step, state.theta.with_values(state.velocity)))
    _write_json(_path(config, TRAINER_STATE), {'step': state.step, 'epoch': state.epoch, 'rng_state': state.rng_state})


def load_state(config: ExperimentConfig, spec: ModelSpec) -> TrainerState:
    sidecar = _read_json(_path(config, TRAINER_STATE))
    model = read_checkpoint(_path(config, MODEL_CKPT), spec)
    velocity = read_checkpoint(_path(config, VELOCITY_CKPT), spec)
    try:
        step, epoch = int(sidecar['step']), int(sidecar['epoch'])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f'{TRAINER_STATE}: malformed trainer state: {exc}') from exc
    if model.step != step or velocity.step != step:
        raise CheckpointFormatError(f'checkpoints at steps {model.step}/{velocity.step}, trainer state at {step}')
    return TrainerState(model.theta, np.array(velocity.theta.values), step, epoch, sidecar.get('rng_state'))


def cmd_train(config: ExperimentConfig, resume: bool = False) -> TrainerState:
    """Trains on the whole training side and saves the state after every epoch.

    With resume the saved state is picked up at its recorded step and epoch.
    """
    experiment = load_experiment(config)
    state = None
    if resume:
        state = load_state(config, experiment.spec)
        logger.info('resuming at step %s (epoch %s)', state.step, state.epoch)
    start = monotonic()
    with RunLog(_path(config, RUN_LOG), append=resume) as run_log:
        trainer = Trainer(experiment.spec, config.optim, run_log)
        trainer.on_epoch_end = lambda s: save_state(config, trainer, s)
        state = trainer.train(experiment.train, state)
    save_state(config, trainer, state)
    logger.info('training done at step %s, took %.2fs', state.step, monotonic() - start)
    return state


def cmd_cohesion(config: ExperimentConfig) -> list[CohesionMatrix]:
    """Runs both algorithms, and the union run for groups, over one checkpoint stream.

    The union run U x U with U = A u B is always dense, since group
    extraction needs every pair observed.
    """
    experiment = load_experiment(config)
    state = load_state(config, experiment.spec)
    trainer = Trainer(experiment.spec, config.optim)
    a_set, b_set = experiment.bundle.compact_train, experiment.bundle.compact_test
    sampling = config.sampling
    outputs = [ALG1_MATRIX, ALG2_MATRIX]
    start = monotonic()
    executor = experiment.executor()
    try:
        samplers = [
            CohesionSampler(experiment.spec, a_set, b_set, sampling, executor=executor, name='alg1'),
            CohesionSampler(experiment.spec, a_set, b_set, sampling, unconditional=True, executor=executor,
                            name='alg2'),
        ]
        if config.groups.enabled:
            union = concat(a_set, b_set)
            samplers.append(CohesionSampler(experiment.spec, union, union, dataclasses.replace(sampling, mode='dense'),
                                            executor=executor, name='union'))
            outputs.append(UNION_MATRIX)
        matrices = run_samplers(samplers, checkpoint_pairs(trainer, state, experiment.train, sampling))
    finally:
        if executor is not None:
            executor.shutdown()
    for name, matrix in zip(outputs, matrices):
        write_matrix(_path(config, name), matrix)
        if sampling.export_csv:
            write_matrix_csv(_path(config, name.replace('.cmx', '.csv')), matrix)
    logger.info('%s trials in %s mode over |A| = %s, |B| = %s, took %.2fs', sampling.trials, sampling.mode,
                len(a_set), len(b_set), monotonic() - start)
    return matrices


def cmd_report(config: ExperimentConfig) -> dict[str, Any]:
    experiment = load_experiment(config)
    state = load_state(config, experiment.spec)
    bundle = experiment.bundle
    a_set, b_set = bundle.compact_train, bundle.compact_test
    alg1_matrix = read_matrix(_path(config, ALG1_MATRIX))
    alg2_matrix = read_matrix(_path(config, ALG2_MATRIX))
    if not isinstance(alg1_matrix, CohesionMatrix2D) or not isinstance(alg2_matrix, CohesionTensor3D):
        raise MatrixFormatError(f'{ALG1_MATRIX} must be 2D and {ALG2_MATRIX} 3D')
    alg1 = cohesion_classify(alg1_matrix, a_set.labels, b_set.labels, name='alg1')
    alg2 = cohesion_classify_unconditional(alg2_matrix, a_set.labels, b_set.labels, name='alg2')
    executor = experiment.executor()
    try:
        argmax_train = argmax_baseline(experiment.spec, state.theta, experiment.train, executor, 'argmax_train')
        argmax_test = argmax_baseline(experiment.spec, state.theta, experiment.test, executor, 'argmax_test')
        argmax_compact = argmax_baseline(experiment.spec, state.theta, b_set, executor, 'argmax_compact_test')
    finally:
        if executor is not None:
            executor.shutdown()
    groups = None
    union_labels = None
    if config.groups.enabled:
        union_matrix = read_matrix(_path(config, UNION_MATRIX))
        membership = np.arange(len(a_set) + len(b_set)) < len(a_set)
        groups = extract_groups(agreement(union_matrix), config.groups.threshold, config.groups.min_support,
                                train_membership=membership, method=config.groups.method)
        union_labels = np.concatenate([a_set.labels, b_set.labels])
    report = build_report(alg1, alg2, argmax_train, argmax_test, argmax_compact, groups, union_labels,
                          size_a=len(a_set), include_predictions=config.report.include_predictions,
                          meta={'trials': alg1_matrix.trials, 'step': state.step, 'sizes': bundle.sizes()})
    write_report(config.out_dir, report)
    for row in report['rows']:
        logger.info('%-24s %-12s accuracy %s', row['algorithm'], row['dataset'], row['accuracy'])
    return report


def cmd_run(config: ExperimentConfig, resume: bool = False) -> dict[str, Any]:
    cmd_prepare(config)
    cmd_train(config, resume)
    cmd_cohesion(config)
    return cmd_report(config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cohesion_groups',
                                     description='cohesive-convergence groups of a trained classifier')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', type=str, default=None, help='YAML experiment config')
    common.add_argument('-o', '--out', type=str, default=None, help='output directory (overrides out_dir)')
    common.add_argument('-t', '--threads', type=int, default=None,
                        help='evaluation threads (default: physical cores)')
    common.add_argument('-s', '--seed-override', type=int, default=None, help='replace every seed in the config')
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    common.add_argument('-q', '--quiet', action='store_true', help='warnings only')
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('prepare', parents=[common], help='load data and write the split manifest')
    train = commands.add_parser('train', parents=[common], help='train the base model')
    train.add_argument('--resume', action='store_true', help='continue from the saved trainer state')
    commands.add_parser('cohesion', parents=[common], help='sample the cohesion matrices')
    commands.add_parser('report', parents=[common], help='classify, extract groups and write the report')
    run = commands.add_parser('run', parents=[common], help='all stages in order')
    run.add_argument('--resume', action='store_true', help='continue training from the saved trainer state')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config)
        config = validate(apply_overrides(config, args.out, args.threads, args.seed_override))
        os.makedirs(config.out_dir, exist_ok=True)
        write_config(config, config.out_dir)
        if args.command == 'prepare':
            cmd_prepare(config)
        elif args.command == 'train':
            cmd_train(config, args.resume)
        elif args.command == 'cohesion':
            cmd_cohesion(config)
        elif args.command == 'report':
            cmd_report(config)
        else:
            cmd_run(config, args.resume)
    except NumericError as exc:
        logger.error('numeric error: %s', exc)
        logger.debug('traceback', exc_info=True)
        return EXIT_NUMERIC
    except (DatasetFormatError, CheckpointFormatError, MatrixFormatError, OSError) as exc:
        logger.error('%s', exc)
        logger.debug('traceback', exc_info=True)
        return EXIT_IO
    except ValueError as exc:
        logger.error('%s', exc)
        logger.debug('traceback', exc_info=True)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == '__main__':
    raise SystemExit(main())
