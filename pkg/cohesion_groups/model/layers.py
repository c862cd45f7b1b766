#!/usr/bin/env python3
#
# Layers with explicit forward and backward passes over batches, float64 only.

from __future__ import annotations

from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = dict[str, np.ndarray]
Shape = tuple[int, ...]


class Layer:
    """Base layer. Shapes exclude the batch axis."""

    def __init__(self, name: str, input_shape: Shape) -> None:
        self.name = name
        self.input_shape = tuple(input_shape)

    def param_shapes(self) -> list[tuple[str, Shape]]:
        return []

    @property
    def output_shape(self) -> Shape:
        return self.input_shape

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}({self.name}, {self.input_shape} -> {self.output_shape})'


class Reshape(Layer):
    def __init__(self, name: str, input_shape: Shape, shape: Shape) -> None:
        super().__init__(name, input_shape)
        if int(np.prod(shape)) != int(np.prod(input_shape)):
            raise ValueError(f'cannot reshape {input_shape} to {shape}')
        self.shape = tuple(shape)

    @property
    def output_shape(self) -> Shape:
        return self.shape

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        return x.reshape((x.shape[0],) + self.shape), None

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        return dout.reshape((dout.shape[0],) + self.input_shape), {}


class Dense(Layer):
    def __init__(self, name: str, input_shape: Shape, units: int) -> None:
        super().__init__(name, input_shape)
        if len(self.input_shape) != 1:
            raise ValueError(f'{name}: dense input must be flat, got {input_shape}')
        self.units = units

    def param_shapes(self) -> list[tuple[str, Shape]]:
        return [(f'{self.name}.weight', (self.units, self.input_shape[0])), (f'{self.name}.bias', (self.units,))]

    @property
    def output_shape(self) -> Shape:
        return (self.units,)

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        weight, bias = params[f'{self.name}.weight'], params[f'{self.name}.bias']
        return x @ weight.T + bias, x

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        x = cache
        weight = params[f'{self.name}.weight']
        grads = {f'{self.name}.weight': dout.T @ x, f'{self.name}.bias': dout.sum(axis=0)}
        return dout @ weight, grads


class ReLU(Layer):
    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        return np.maximum(x, 0.0), x > 0

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        return dout * cache, {}


class Conv2d(Layer):
    """Stride 1, zero 'same' padding, odd square kernels."""

    def __init__(self, name: str, input_shape: Shape, channels: int, kernel_size: int = 3) -> None:
        super().__init__(name, input_shape)
        if len(self.input_shape) != 3:
            raise ValueError(f'{name}: conv input must be (C, H, W), got {input_shape}')
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f'{name}: kernel size must be odd, got {kernel_size}')
        self.channels = channels
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2

    def param_shapes(self) -> list[tuple[str, Shape]]:
        k = self.kernel_size
        return [(f'{self.name}.weight', (self.channels, self.input_shape[0], k, k)),
                (f'{self.name}.bias', (self.channels,))]

    @property
    def output_shape(self) -> Shape:
        return (self.channels,) + self.input_shape[1:]

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        weight, bias = params[f'{self.name}.weight'], params[f'{self.name}.bias']
        p, k = self.padding, self.kernel_size
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # windows[n, c, h, w, i, j] = padded[n, c, h + i, w + j]
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return out + bias[None, :, None, None], windows

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        windows = cache
        weight = params[f'{self.name}.weight']
        p, k = self.padding, self.kernel_size
        n, c, h, w = (dout.shape[0],) + self.input_shape
        grads = {f'{self.name}.weight': np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3])),
                 f'{self.name}.bias': dout.sum(axis=(0, 2, 3))}
        dpadded = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dpadded[:, :, i:i + h, j:j + w] += np.tensordot(dout, weight[:, :, i, j],
                                                                axes=([1], [0])).transpose(0, 3, 1, 2)
        return dpadded[:, :, p:p + h, p:p + w], grads


class MaxPool2d(Layer):
    """2x2 windows, stride 2; ties resolved to the first position in each window."""

    def __init__(self, name: str, input_shape: Shape) -> None:
        super().__init__(name, input_shape)
        if len(self.input_shape) != 3 or self.input_shape[1] % 2 or self.input_shape[2] % 2:
            raise ValueError(f'{name}: pooling needs (C, H, W) with even H and W, got {input_shape}')

    @property
    def output_shape(self) -> Shape:
        c, h, w = self.input_shape
        return (c, h // 2, w // 2)

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        n = x.shape[0]
        c, h, w = self.output_shape
        blocks = x.reshape(n, c, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, 4)
        winner = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0], winner

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        winner = cache
        n = dout.shape[0]
        c, h, w = self.output_shape
        dblocks = np.zeros((n, c, h, w, 4))
        np.put_along_axis(dblocks, winner[..., None], dout[..., None], axis=-1)
        dx = dblocks.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape((n,) + self.input_shape)
        return dx, {}
