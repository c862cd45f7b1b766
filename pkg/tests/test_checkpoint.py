import numpy as np
import pytest

from cohesion_groups.model import (Checkpoint, CheckpointFormatError, ModelSpec, init_params, read_checkpoint,
                                   spec_hash, write_checkpoint)
from cohesion_groups.model.checkpoint import MAGIC

SPEC = ModelSpec('mlp', input_dim=4, classes=3, hidden=(5,))


@pytest.fixture
def checkpoint() -> Checkpoint:
    return Checkpoint.of(SPEC, 17, init_params(SPEC, seed=2))


def test_file_preserves_parameters(tmp_path, checkpoint):
    path = str(tmp_path / 'model.ckpt')
    write_checkpoint(path, checkpoint)
    again = read_checkpoint(path, SPEC)
    assert again.step == 17
    assert again.spec_hash == spec_hash(SPEC)
    assert again.theta.layout == checkpoint.theta.layout
    np.testing.assert_array_equal(again.theta.values, checkpoint.theta.values)


def test_bytes_are_deterministic(checkpoint):
    data = checkpoint.to_bytes()
    assert data.startswith(MAGIC)
    assert data == Checkpoint.of(SPEC, 17, init_params(SPEC, seed=2)).to_bytes()
    # values are the trailing little-endian float64 block
    np.testing.assert_array_equal(np.frombuffer(data[-8 * len(checkpoint.theta):], dtype='<f8'),
                                  checkpoint.theta.values)


def test_spec_mismatch(tmp_path, checkpoint):
    path = str(tmp_path / 'model.ckpt')
    write_checkpoint(path, checkpoint)
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(path, ModelSpec('mlp', input_dim=4, classes=3, hidden=(6,)))


def test_bad_magic(checkpoint):
    data = b'XXXXXXXX' + checkpoint.to_bytes()[8:]
    with pytest.raises(CheckpointFormatError, match='magic'):
        Checkpoint.from_bytes(data)


def test_truncated_header(checkpoint):
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(checkpoint.to_bytes()[:4])


@pytest.mark.parametrize('cut', [1, 60])
def test_truncated_values(checkpoint, cut):
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(checkpoint.to_bytes()[:-cut])


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(str(tmp_path / 'absent.ckpt'))
