import json
import os

import pytest
import yaml

from cohesion_groups.cohesion import CohesionMatrix2D, CohesionTensor3D, read_matrix
from cohesion_groups.cohesion_groups import (ALG1_MATRIX, ALG2_MATRIX, EXIT_CONFIG, EXIT_IO, EXIT_OK, MANIFEST,
                                             MODEL_CKPT, RUN_LOG, UNION_MATRIX, main)
from cohesion_groups.report import REPORT_JSON, REPORT_TEXT

TOY = {
    'data': {'source': 'synthetic', 'synthetic': {'classes': 3, 'dim': 4, 'per_class': 30, 'test_per_class': 20}},
    'split': {'compact_size': 8},
    'model': {'kind': 'linear'},
    'optim': {'batch_size': 16, 'epochs': 3},
    'sampling': {'trials': 4},
    'groups': {'min_support': 1},
}


def _config(tmp_path, name='config.yaml', **sections):
    values = {key: dict(value) for key, value in TOY.items()}
    for key, value in sections.items():
        values[key] = {**values.get(key, {}), **value}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(values))
    return str(path)


def _read(path):
    with open(path, 'rb') as infile:
        return infile.read()


@pytest.fixture(scope='module')
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp('run')
    config = _config(root)
    out = str(root / 'out')
    assert main(['run', '-c', config, '-o', out, '-t', '1']) == EXIT_OK
    return root, config, out


def test_run_writes_every_artifact(toy_run):
    _, _, out = toy_run
    for name in (MANIFEST, MODEL_CKPT, RUN_LOG, ALG1_MATRIX, ALG2_MATRIX, UNION_MATRIX, REPORT_JSON, REPORT_TEXT,
                 'config.yaml', 'train.csv', 'test.csv'):
        assert os.path.isfile(os.path.join(out, name)), name
    alg1 = read_matrix(os.path.join(out, ALG1_MATRIX))
    alg2 = read_matrix(os.path.join(out, ALG2_MATRIX))
    union = read_matrix(os.path.join(out, UNION_MATRIX))
    assert isinstance(alg1, CohesionMatrix2D) and alg1.shape == (8, 8)
    assert isinstance(alg2, CohesionTensor3D) and alg2.shape == (8, 8, 3)
    assert union.shape == (16, 16)
    assert alg1.trials == alg2.trials == union.trials == 4


def test_report_contents(toy_run):
    _, _, out = toy_run
    report = json.load(open(os.path.join(out, REPORT_JSON)))
    assert [row['row'] for row in report['rows']] == ['1', '2', 'arg max', 'arg max']
    assert [row['total'] for row in report['rows']] == [8, 8, 90, 60]
    assert report['groups']['size'] == 16
    assert report['meta']['trials'] == 4
    assert len(report['predictions']['alg1']['predicted']) == 8


def test_thread_count_does_not_change_results(toy_run, tmp_path):
    _, config, out = toy_run
    other = str(tmp_path / 'out')
    assert main(['run', '-c', config, '-o', other, '-t', '2']) == EXIT_OK
    for name in (MODEL_CKPT, ALG1_MATRIX, ALG2_MATRIX, UNION_MATRIX, REPORT_JSON):
        assert _read(os.path.join(out, name)) == _read(os.path.join(other, name)), name


def test_stages_match_run(toy_run, tmp_path):
    _, config, out = toy_run
    staged = str(tmp_path / 'out')
    for command in ('prepare', 'train', 'cohesion', 'report'):
        assert main([command, '-c', config, '-o', staged, '-t', '1']) == EXIT_OK
    assert _read(os.path.join(out, ALG2_MATRIX)) == _read(os.path.join(staged, ALG2_MATRIX))
    assert _read(os.path.join(out, REPORT_JSON)) == _read(os.path.join(staged, REPORT_JSON))


def test_resume_matches_uninterrupted(toy_run, tmp_path):
    _, config, out = toy_run
    short = _config(tmp_path, 'short.yaml', optim={'epochs': 2})
    resumed = str(tmp_path / 'out')
    assert main(['prepare', '-c', short, '-o', resumed]) == EXIT_OK
    assert main(['train', '-c', short, '-o', resumed]) == EXIT_OK
    assert main(['train', '--resume', '-c', config, '-o', resumed]) == EXIT_OK
    assert _read(os.path.join(out, MODEL_CKPT)) == _read(os.path.join(resumed, MODEL_CKPT))
    steps = [json.loads(line)['step'] for line in open(os.path.join(resumed, RUN_LOG))]
    assert steps == list(range(1, 19))


def test_seed_override_changes_matrices(toy_run, tmp_path):
    _, config, out = toy_run
    other = str(tmp_path / 'out')
    assert main(['run', '-c', config, '-o', other, '-t', '1', '-s', '5']) == EXIT_OK
    assert _read(os.path.join(out, ALG1_MATRIX)) != _read(os.path.join(other, ALG1_MATRIX))
    assert yaml.safe_load(open(os.path.join(other, 'config.yaml')))['sampling']['seed'] == 5


def test_missing_inputs(tmp_path):
    config = _config(tmp_path)
    assert main(['report', '-c', config, '-o', str(tmp_path / 'empty')]) == EXIT_IO


def test_unknown_config_key(tmp_path):
    config = _config(tmp_path, sampling={'trails': 4})
    assert main(['prepare', '-c', config, '-o', str(tmp_path / 'out')]) == EXIT_CONFIG


def test_compact_set_too_large(tmp_path):
    config = _config(tmp_path, split={'compact_size': 1000})
    assert main(['prepare', '-c', config, '-o', str(tmp_path / 'out')]) == EXIT_CONFIG


def test_missing_cifar_directory(tmp_path):
    config = _config(tmp_path, data={'source': 'cifar10', 'path': str(tmp_path / 'nowhere')})
    assert main(['prepare', '-c', config, '-o', str(tmp_path / 'out')]) == EXIT_CONFIG
