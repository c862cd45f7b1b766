#!/usr/bin/env python3
#
# Checkpoint files: header (magic, version, spec hash, step, layout table)
# followed by the raw parameters as little-endian float64.

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import ModelSpec, ParamSlot, ParamVector, spec_hash

logger = logging.getLogger('cohesion_groups.model.checkpoint')

MAGIC = b'CCGCKPT\x00'
VERSION = 1
_HEADER = struct.Struct('<8sI32sQI')
_NAME_LEN = struct.Struct('<H')
_NDIM = struct.Struct('<B')
_U64 = struct.Struct('<Q')


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """theta after `step` steps of one run; `spec_hash` ties it to its architecture."""
    spec_hash: bytes
    step: int
    theta: ParamVector

    @classmethod
    def of(cls, spec: ModelSpec, step: int, theta: ParamVector) -> Checkpoint:
        return cls(spec_hash(spec), step, theta)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.spec_hash, self.step, len(self.theta.layout))]
        for slot in self.theta.layout:
            name = slot.name.encode('utf-8')
            parts.append(_NAME_LEN.pack(len(name)) + name)
            parts.append(_NDIM.pack(len(slot.shape)) + struct.pack(f'<{len(slot.shape)}Q', *slot.shape))
            parts.append(_U64.pack(slot.offset))
        parts.append(_U64.pack(len(self.theta)))
        parts.append(self.theta.values.astype('<f8').tobytes())
        return b''.join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        try:
            magic, version, digest, step, slots = _HEADER.unpack_from(data, 0)
            if magic != MAGIC:
                raise CheckpointFormatError('not a checkpoint file (bad magic)')
            if version != VERSION:
                raise CheckpointFormatError(f'unsupported checkpoint version {version}')
            pos = _HEADER.size
            layout = []
            for _ in range(slots):
                (length,) = _NAME_LEN.unpack_from(data, pos)
                pos += _NAME_LEN.size
                name = data[pos:pos + length].decode('utf-8')
                pos += length
                (ndim,) = _NDIM.unpack_from(data, pos)
                pos += _NDIM.size
                shape = struct.unpack_from(f'<{ndim}Q', data, pos)
                pos += 8 * ndim
                (offset,) = _U64.unpack_from(data, pos)
                pos += _U64.size
                layout.append(ParamSlot(name, tuple(int(d) for d in shape), int(offset)))
            (count,) = _U64.unpack_from(data, pos)
            pos += _U64.size
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f'truncated checkpoint header: {exc}') from exc
        if len(data) - pos != 8 * count:
            raise CheckpointFormatError(f'expected {count} parameters, found {(len(data) - pos) / 8}')
        values = np.frombuffer(data, dtype='<f8', count=count, offset=pos).astype(np.float64)
        try:
            theta = ParamVector(values, tuple(layout))
        except ValueError as exc:
            raise CheckpointFormatError(str(exc)) from exc
        return cls(digest, int(step), theta)


def write_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    partial = path + '.part'
    with open(partial, 'wb') as outfile:
        outfile.write(checkpoint.to_bytes())
    os.replace(partial, path)
    logger.debug('wrote checkpoint step %s to %s', checkpoint.step, path)


def read_checkpoint(path: str, spec: Optional[ModelSpec] = None) -> Checkpoint:
    '''Reads a checkpoint, refusing one written for a different spec'''
    if not os.path.isfile(path):
        raise FileNotFoundError(f'checkpoint not found: {path}')
    with open(path, 'rb') as infile:
        checkpoint = Checkpoint.from_bytes(infile.read())
    if spec is not None and checkpoint.spec_hash != spec_hash(spec):
        raise CheckpointFormatError(f'{path} was written for a different model spec')
    return checkpoint
