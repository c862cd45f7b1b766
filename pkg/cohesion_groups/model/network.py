#!/usr/bin/env python3
#
# Classifiers F_theta over a flat parameter vector: forward pass, softmax
# cross-entropy, empirical risk and its exact gradient.

from __future__ import annotations

import functools
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from ..dataset import LabeledSet, Sample
from .layers import Conv2d, Dense, Layer, MaxPool2d, Params, ReLU, Reshape

logger = logging.getLogger('cohesion_groups.model')

MODEL_KINDS = ('linear', 'mlp', 'cnn-small')


class NumericError(ArithmeticError):
    def __init__(self, message: str, layer: Optional[str] = None, step: Optional[int] = None) -> None:
        super().__init__(message)
        self.layer = layer
        self.step = step


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of F_theta. Only rectifier activations; no layer keeps
    running statistics, so a training step changes nothing but theta."""
    kind: str
    input_dim: int
    classes: int
    hidden: tuple[int, ...] = (256, 256)
    channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    image_shape: Optional[tuple[int, int, int]] = None
    activation: str = 'relu'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        if self.image_shape is not None:
            object.__setattr__(self, 'image_shape', tuple(int(d) for d in self.image_shape))
        if self.kind not in MODEL_KINDS:
            raise ValueError(f'model kind must be one of {MODEL_KINDS}, got {self.kind!r}')
        if self.activation != 'relu':
            raise ValueError(f'unsupported activation {self.activation!r}')
        if self.input_dim < 1 or self.classes < 2:
            raise ValueError('need input_dim >= 1 and classes >= 2')
        if self.kind == 'mlp' and (not self.hidden or min(self.hidden) < 1):
            raise ValueError('mlp needs at least one hidden layer of positive width')
        if self.kind == 'cnn-small':
            if self.image_shape is None or len(self.image_shape) != 3:
                raise ValueError('cnn-small needs image_shape (C, H, W)')
            if int(np.prod(self.image_shape)) != self.input_dim:
                raise ValueError(f'image_shape {self.image_shape} does not match input_dim {self.input_dim}')
            if len(self.channels) != 2 or min(self.channels) < 1:
                raise ValueError('cnn-small needs two positive conv channel counts')
            if self.image_shape[1] % 4 or self.image_shape[2] % 4:
                raise ValueError('cnn-small needs image height and width divisible by 4')


def spec_hash(spec: ModelSpec) -> bytes:
    canonical = json.dumps(asdict(spec), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).digest()


class ParamSlot(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 snapshot of theta plus the (name, shape, offset) layout."""
    values: np.ndarray
    layout: tuple[ParamSlot, ...] = field(repr=False)

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError('parameter values must be flat')
        layout = tuple(ParamSlot(s.name, tuple(s.shape), int(s.offset)) for s in self.layout)
        expected = 0
        for slot in layout:
            if slot.offset != expected:
                raise ValueError(f'slot {slot.name} at offset {slot.offset}, expected {expected}')
            expected += slot.size
        if expected != values.size:
            raise ValueError(f'layout covers {expected} values, vector has {values.size}')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'layout', layout)

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)

    def as_dict(self) -> Params:
        return {slot.name: self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
                for slot in self.layout}

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)


def _build_layers(spec: ModelSpec) -> list[Layer]:
    layers: list[Layer] = []

    def add(layer: Layer) -> Layer:
        layers.append(layer)
        return layer

    shape: tuple[int, ...] = (spec.input_dim,)
    if spec.kind == 'mlp':
        for i, width in enumerate(spec.hidden, start=1):
            shape = add(Dense(f'fc{i}', shape, width)).output_shape
            shape = add(ReLU(f'relu{i}', shape)).output_shape
    elif spec.kind == 'cnn-small':
        assert spec.image_shape is not None
        shape = add(Reshape('image', shape, spec.image_shape)).output_shape
        for i, channels in enumerate(spec.channels, start=1):
            shape = add(Conv2d(f'conv{i}', shape, channels, spec.kernel_size)).output_shape
            shape = add(ReLU(f'relu{i}', shape)).output_shape
            shape = add(MaxPool2d(f'pool{i}', shape)).output_shape
        shape = add(Reshape('flatten', shape, (int(np.prod(shape)),))).output_shape
    add(Dense('out', shape, spec.classes))
    return layers


class Network:
    def __init__(self, spec: ModelSpec) -> None:
        self.spec = spec
        self.layers = _build_layers(spec)
        layout = []
        offset = 0
        for layer in self.layers:
            for name, shape in layer.param_shapes():
                slot = ParamSlot(name, shape, offset)
                layout.append(slot)
                offset += slot.size
        self.layout = tuple(layout)
        self.size = offset

    def _params(self, theta: ParamVector) -> Params:
        if theta.layout != self.layout:
            raise ValueError('parameter layout does not match the model spec')
        return theta.as_dict()

    def forward(self, theta: ParamVector, x: np.ndarray) -> tuple[np.ndarray, list]:
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f'expected inputs of shape (N, {self.spec.input_dim}), got {x.shape}')
        params = self._params(theta)
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(params, out)
            if not np.isfinite(out).all():
                raise NumericError(f'non-finite output in layer {layer.name}', layer=layer.name)
            caches.append(cache)
        return out, caches

    def backward(self, theta: ParamVector, caches: list, dlogits: np.ndarray) -> np.ndarray:
        params = self._params(theta)
        grads: Params = {}
        dout = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, layer_grads = layer.backward(params, cache, dout)
            grads.update(layer_grads)
        flat = np.empty(self.size)
        for slot in self.layout:
            flat[slot.offset:slot.offset + slot.size] = grads[slot.name].ravel()
        return flat


@functools.lru_cache(maxsize=16)
def get_network(spec: ModelSpec) -> Network:
    return Network(spec)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    '''He-normal weights, zero biases'''
    network = get_network(spec)
    rng = np.random.default_rng(seed)
    values = np.zeros(network.size)
    for slot in network.layout:
        if slot.name.endswith('.weight'):
            fan_in = slot.size // slot.shape[0]
            values[slot.offset:slot.offset + slot.size] = rng.normal(0.0, np.sqrt(2.0 / fan_in), slot.size)
    logger.debug('initialized %s parameters of %s model with seed %s', network.size, spec.kind, seed)
    return ParamVector(values, network.layout)


def zero_params(spec: ModelSpec) -> ParamVector:
    network = get_network(spec)
    return ParamVector(np.zeros(network.size), network.layout)


SampleBatch = Union[LabeledSet, Sequence[Sample]]


def as_arrays(samples: SampleBatch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, LabeledSet):
        return samples.features, samples.labels
    if not samples:
        return np.empty((0, 0)), np.empty(0, dtype=np.int64)
    features = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    return features, np.array([s.label for s in samples], dtype=np.int64)


def forward(spec: ModelSpec, theta: ParamVector, x: np.ndarray) -> np.ndarray:
    '''Logits of a single feature vector'''
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f'expected one feature vector, got shape {x.shape}')
    return get_network(spec).forward(theta, x[None, :])[0][0]


def logits_batch(spec: ModelSpec, theta: ParamVector, features: np.ndarray) -> np.ndarray:
    return get_network(spec).forward(theta, np.asarray(features, dtype=np.float64))[0]


def _check_labels(labels: np.ndarray, classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f'labels outside [0, {classes})')


def _nll(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return lse - logits[np.arange(labels.size), labels]


def loss(logits: np.ndarray, y: int) -> float:
    '''Softmax cross-entropy -log softmax(logits)[y], log-sum-exp stabilized'''
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.size:
        raise ValueError(f'label {y} outside [0, {logits.size})')
    return float(_nll(logits[None, :], np.array([y]))[0])


def per_sample_losses(spec: ModelSpec, theta: ParamVector, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, spec.classes)
    return _nll(logits_batch(spec, theta, features), labels)


def batch_risk(spec: ModelSpec, theta: ParamVector, samples: SampleBatch) -> float:
    features, labels = as_arrays(samples)
    if labels.size == 0:
        raise ValueError('empty batch')
    return float(per_sample_losses(spec, theta, features, labels).mean())


def risk_and_grad(spec: ModelSpec, theta: ParamVector, features: np.ndarray,
                  labels: np.ndarray) -> tuple[float, np.ndarray]:
    '''Mean cross-entropy over the batch and its gradient with respect to theta'''
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError('empty batch')
    _check_labels(labels, spec.classes)
    network = get_network(spec)
    logits, caches = network.forward(theta, np.asarray(features, dtype=np.float64))
    rows = np.arange(labels.size)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    risk = float(_nll(logits, labels).mean())
    dlogits = probs
    dlogits[rows, labels] -= 1.0
    dlogits /= labels.size
    return risk, network.backward(theta, caches, dlogits)


def grad(spec: ModelSpec, theta: ParamVector, samples: SampleBatch) -> np.ndarray:
    features, labels = as_arrays(samples)
    return risk_and_grad(spec, theta, features, labels)[1]
